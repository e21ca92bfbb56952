import numpy as np
import pytest

import utils.log_writer as log_writer
from utils.panel_core import PanelDesign, standard_model
from utils.simgen import substream


@pytest.fixture
def rng():
    return substream(12345)


@pytest.fixture
def balanced_design(rng):
    n, T = 8, 4
    student = np.repeat(np.arange(n), T)
    time = np.tile(np.arange(T), n)
    Z = np.column_stack([np.ones(n * T), rng.standard_normal(n * T), rng.standard_normal(n * T)])
    return PanelDesign(Z=Z, student=student, time=time, T=T, column_names=("intercept", "x1", "x2"))


@pytest.fixture
def standard_h():
    return standard_model(4, nu2=0.7, sigma2=0.3)


@pytest.fixture(autouse=True)
def default_event_log(monkeypatch):
    monkeypatch.setitem(log_writer.config, "EVENT_LOG", None)
    monkeypatch.setitem(log_writer.config, "RUN_CONTEXT", "test")


@pytest.fixture
def event_log(tmp_path, monkeypatch):
    path = tmp_path / "event_log.csv"
    monkeypatch.setitem(log_writer.config, "EVENT_LOG", str(path))
    return path


@pytest.fixture
def write_cfg(tmp_path):
    def _write(text: str, name: str = "experiment.cfg"):
        path = tmp_path / name
        path.write_text(text)
        return path
    return _write
