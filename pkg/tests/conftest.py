import numpy as np
import pytest

from bilevel_flow import (
    IntegratorConfig,
    SolverState,
    integrate,
    make_quadratic_ll,
    make_toy1,
    safe_flow_velocity,
)


@pytest.fixture(scope="session")
def toy1():
    return make_toy1()


@pytest.fixture(scope="session")
def quad5():
    return make_quadratic_ll(seed=0, n=5, m=5, cond_max=10.0)


@pytest.fixture(scope="session")
def quad20():
    return make_quadratic_ll(seed=0, n=20, m=20, cond_max=10.0)


@pytest.fixture(scope="session")
def rk4_reference_terminal(toy1):
    """Terminal (x, y) of the equality-filtered flow on toy1 at T=1, dt=1e-5.

    Expensive (100k steps); shared by the order-of-accuracy checks.
    """
    field = lambda s: safe_flow_velocity(toy1, s.x, s.y, 1.0)
    config = IntegratorConfig(dt=1e-5, horizon=1.0, record_every=10**9)
    traj = integrate(field, SolverState([0.0], [1.0]), config)
    final = traj.final_state
    return np.concatenate([final.x, final.y])
