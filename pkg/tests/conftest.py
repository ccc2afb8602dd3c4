import os
from contextlib import contextmanager

import pytest

from rfqi.config import ExperimentConfig
from rfqi.harness import read_results, run_experiment

# Default harness configuration: d=50, |rho|=10, sigma_s=0.4, sigma_r=0.6,
# 50 replications, oracle from 20000 trajectories, FQE.
DEFAULT_CONFIG = ExperimentConfig(master_seed=20240501)


@contextmanager
def threads(value):
    old = os.environ.get("RFQI_THREADS")
    os.environ["RFQI_THREADS"] = str(value)
    try:
        yield
    finally:
        if old is None:
            del os.environ["RFQI_THREADS"]
        else:
            os.environ["RFQI_THREADS"] = old


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """(output directory, records) of the full default experiment, single worker."""
    out = tmp_path_factory.mktemp("default_run")
    with threads(1):
        results = run_experiment(DEFAULT_CONFIG, out)
    return out, read_results(results)


@pytest.fixture(scope="session")
def default_rerun(tmp_path_factory):
    """The same experiment again, on a two-process pool."""
    out = tmp_path_factory.mktemp("default_rerun")
    with threads(2):
        run_experiment(DEFAULT_CONFIG, out)
    return out


# criterion lines collected by test_acceptance, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
