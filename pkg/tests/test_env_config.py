import importlib

import pytest

import env_config

SWITCHES = ("RUN_CONTEXT", "OUTPUT_DIR", "EVENT_LOG", "THREADS", "EXTRA_SWITCH")


def _clear_switches(monkeypatch):
    # load_dotenv writes into os.environ; register every switch so the test restores it
    for key in SWITCHES:
        monkeypatch.setenv(key, "")
        monkeypatch.delenv(key)


def test_env_config_defaults(monkeypatch, tmp_path):
    monkeypatch.setenv("ENV_FILE", str(tmp_path / "missing.env"))
    _clear_switches(monkeypatch)
    cfg = importlib.reload(env_config).env_config()
    assert cfg["RUN_CONTEXT"] == "cli"
    assert cfg["OUTPUT_DIR"] == "results"
    assert cfg["EVENT_LOG"] is None
    assert cfg["THREADS"] == 1


def test_env_config_reads_env_file(monkeypatch, tmp_path):
    env_file = tmp_path / ".env"
    env_file.write_text("RUN_CONTEXT=test\nTHREADS=4\nEXTRA_SWITCH=on\n")
    monkeypatch.setenv("ENV_FILE", str(env_file))
    _clear_switches(monkeypatch)
    cfg = importlib.reload(env_config).env_config()
    assert cfg["RUN_CONTEXT"] == "test"
    assert cfg["THREADS"] == 4
    assert cfg["EXTRA_SWITCH"] == "on"


def test_env_config_bad_threads_falls_back(monkeypatch, tmp_path):
    monkeypatch.setenv("ENV_FILE", str(tmp_path / "missing.env"))
    monkeypatch.setenv("THREADS", "many")
    assert env_config.env_config()["THREADS"] == 1


def test_sim_config_missing_key():
    with pytest.raises(KeyError, match="Missing required config key"):
        env_config.sim_config("missing")


def test_sim_config_none_value(monkeypatch):
    monkeypatch.setitem(env_config.SIM_CONFIG, "n_students", None)
    with pytest.raises(ValueError):
        env_config.sim_config("n_students")


def test_sim_config_published_constants():
    assert env_config.sim_config("ex1_loading_range") == (0.7, 0.9)
    assert env_config.sim_config("ex2_t_values") == tuple(range(2, 21))
    assert env_config.sim_config("ex3_class_size") == 25


def test_env_config_event_log_override(monkeypatch, tmp_path):
    monkeypatch.setenv("ENV_FILE", str(tmp_path / "missing.env"))
    _clear_switches(monkeypatch)
    monkeypatch.setenv("EVENT_LOG", str(tmp_path / "events.csv"))
    monkeypatch.setenv("RUN_CONTEXT", "TEST")
    cfg = env_config.env_config()
    assert cfg["EVENT_LOG"] == str(tmp_path / "events.csv")
    assert cfg["RUN_CONTEXT"] == "test"


def test_sim_config_run_defaults():
    assert env_config.sim_config("reps") == 100
    assert env_config.sim_config("base_seed") == 0
    assert "mar_rate" not in env_config.SIM_CONFIG
