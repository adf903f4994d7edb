from importlib import resources

import numpy as np
import pytest

from gridshed.ao1_opf import solve_ao1
from gridshed.grid_model import ScenarioConfig, apply_scenario, parse_case
from gridshed.power_equations import SwitchVector, network


def _case_text(name):
    return resources.files("gridshed").joinpath(f"cases/{name}.m").read_text()


@pytest.fixture(scope="session")
def case5_text():
    return _case_text("case5")


@pytest.fixture(scope="session")
def case30_text():
    return _case_text("case30")


@pytest.fixture(scope="session")
def case5(case5_text):
    return parse_case(case5_text)


@pytest.fixture(scope="session")
def case30(case30_text):
    return parse_case(case30_text)


@pytest.fixture(scope="session")
def stressed30(case30):
    """30-bus case under the default mismatch scenario (demand > capacity)."""
    return apply_scenario(case30, ScenarioConfig())


@pytest.fixture(scope="session")
def stressed30_start(stressed30):
    """Continuous stage at full service on the stressed case.

    Generation parks at its caps because demand exceeds capacity; the result
    still carries a usable iterate and duals for the switching stage.
    """
    y = SwitchVector(np.ones(network(stressed30).n_dem))
    res = solve_ao1(stressed30, y)
    return res, (res.state, res.input, y)
