# Installs the panelbias command and makes the library importable from other projects
# Add this to the requestor's requirements.txt: git+<repo url>@main#egg=panelbias

from setuptools import setup


setup(
    name="panelbias",
    version="0.1.0",
    py_modules=["env_config", "experiment_config", "run_experiment", "diagnose", "cli"],
    packages=["utils"],
    install_requires=[
        # numerical core (utils/panel_core.py, utils/estimators.py, utils/diagnostics.py)
        "numpy>=1.24",
        "scipy>=1.10",
        # tables, CSV output and the event log
        "pandas>=2.0",
        # SVG charts
        "matplotlib>=3.7",
        # .env switches and experiment files
        "python-dotenv",
    ],
    entry_points={"console_scripts": ["panelbias=cli:main"]},
    python_requires=">=3.9",
)
