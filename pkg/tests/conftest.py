import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from popinf.cli import load_param_file
from popinf.dataset import SnapshotSet
from popinf.fom import HeatConfig, heat_solve

CONFIGS = Path(__file__).parents[1] / "configs"

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", parent=settings.get_profile("default"),
                          max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def heat_training_set():
    """Desk-scale heat snapshots at the five arc samples."""
    params = load_param_file(CONFIGS / "heat_train.json")
    config = HeatConfig()
    states = [heat_solve(config, mu).states for mu in params]
    return SnapshotSet(params, states, config.time, ("u",), ("alpha", "beta"))


ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Recorder for acceptance-criterion verdicts, echoed in the summary."""
    def record(number, passed, detail):
        ACCEPTANCE[number] = (passed, detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
