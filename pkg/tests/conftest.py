import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

from planarcomm.plant import MismatchField  # noqa: E402
from planarcomm.sim import ScenarioConfig  # noqa: E402

TAU = 0.04


@pytest.fixture(scope="session")
def default_config():
    return ScenarioConfig()


@pytest.fixture(scope="session")
def zero_config():
    return ScenarioConfig(mismatch=MismatchField.constant((0.0, 0.0)))


def field_sup(fld, n=100):
    """max ||delta||_inf over an n x n workspace grid."""
    from planarcomm.plant import delta_field
    from planarcomm.sim import uniform_grid
    return float(np.max(np.abs(delta_field(fld, uniform_grid(n)))))


def fit_default_gp(dataset, period=TAU):
    from planarcomm.gpff import TuneBudget, default_kernel_params, gp_fit, tune_hyperparams
    budget = TuneBudget(restarts=2, max_evals=300, subsample=200)
    params = [tune_hyperparams(dataset.positions, dataset.eta[:, j],
                               default_kernel_params(dataset.eta[:, j], period), budget)
              for j in range(2)]
    return gp_fit(dataset.positions, dataset.eta, params)


@pytest.fixture(scope="session")
def default_dataset(default_config):
    from planarcomm.sim import collect_eta_grid, uniform_grid
    return collect_eta_grid(default_config, uniform_grid(24), workers=4)


@pytest.fixture(scope="session")
def default_gp(default_dataset):
    return fit_default_gp(default_dataset)


@pytest.fixture(scope="session")
def default_eta_star(default_config):
    from planarcomm.calibrate import GdConfig, gd_calibrate
    from planarcomm.sim import SteadyStateProbe
    eta, _ = gd_calibrate(GdConfig.for_pitch(TAU), SteadyStateProbe(default_config, workers=4))
    return eta


@pytest.fixture(scope="session")
def scenario_logs(default_config, default_gp, default_eta_star):
    from dataclasses import replace
    from planarcomm.sim import run_scenario
    return {
        "baseline": run_scenario(default_config),
        "static-calibrated": run_scenario(replace(default_config, mode="static-calibrated",
                                                  eta_init=tuple(default_eta_star))),
        "dynamic": run_scenario(replace(default_config, mode="dynamic")),
        "dynamic+ff": run_scenario(replace(default_config, mode="dynamic+ff", gp=default_gp)),
    }


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
