import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from liquidation.config import load_scenario
from liquidation.dp import SolverGrid, solve_surface
from liquidation.model import Cara, MarketModel, PowerLaw

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def scenario():
    return load_scenario()


@pytest.fixture(scope="session")
def quad_model():
    """One asset, no drift, quadratic impact: the closed-form case."""
    return MarketModel(np.array([[0.3]]), np.array([0.0]), T_max=1.0), PowerLaw(0.5, 2.0)


@pytest.fixture(scope="session")
def small_surface(scenario):
    """Default scenario on a coarse grid."""
    sc = scenario.with_grid(L=4)
    return solve_surface(sc.model, sc.impact, sc.utility, sc.grid)


@pytest.fixture(scope="session")
def cara_surface(quad_model):
    model, impact = quad_model
    grid = SolverGrid.build(1.0, [10.0], L=5, x_box=[(-2.0, 12.0, 0.25)])
    return solve_surface(model, impact, Cara(1.0), grid)
