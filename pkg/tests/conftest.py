import numpy as np
import pytest

from jumpbsde.driver import make_time_grid
from jumpbsde.problem import compute_weight_paths
from jumpbsde.problems import lipschitz_z
from jumpbsde.solver import RegressionConfig, solve_backward


@pytest.fixture(scope="session")
def lip_setup():
    """lipschitz_z at p = 1.5 on a small ensemble, solved once."""
    prob = lipschitz_z(p=1.5)
    ens = prob.simulate(make_time_grid(1.0, 32), 2000, 11)
    w = compute_weight_paths(prob, ens)
    sol = solve_backward(prob, ens, w, RegressionConfig(degree=2, ridge=1e-8))
    return prob, ens, w, sol


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
