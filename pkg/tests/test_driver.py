import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jumpbsde.driver import (
    FactorSDE,
    JumpMeasureSpec,
    TimeGrid,
    brownian_factor,
    coarsen,
    make_time_grid,
    simulate_brownian,
    simulate_ensemble,
    simulate_factor,
    simulate_jumps,
)
from jumpbsde.errors import InvalidGridError, InvalidSpecError, ModelViolationError


def test_uniform_grid():
    np.testing.assert_allclose(make_time_grid(1, 4).times, [0, 0.25, 0.5, 0.75, 1])
    np.testing.assert_allclose(make_time_grid(2, 1).times, [0, 2])


@pytest.mark.parametrize("T,n", [(0, 4), (-1, 4), (1, 0)])
def test_bad_grid(T, n):
    with pytest.raises(InvalidGridError):
        make_time_grid(T, n)


def test_grid_must_increase():
    with pytest.raises(InvalidGridError):
        TimeGrid(np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(InvalidGridError):
        TimeGrid(np.array([0.1, 0.5]))


def test_index_of():
    g = make_time_grid(1, 8)
    assert g.index_of(0.0) == 0
    assert g.index_of(0.375) == 3
    assert g.index_of(1.0) == 8


def test_brownian_variance():
    # Δt = 0.01; sample variance within a 4σ band around Δt
    n = 100_000
    g = make_time_grid(0.02, 2)
    dW = simulate_brownian(g, n, 1, seed=3)
    var = dW[:, 0, 0].var()
    band = 4 * 0.01 * np.sqrt(2.0 / n)
    assert abs(var - 0.01) < band


def test_brownian_deterministic_and_shape():
    g = make_time_grid(1, 5)
    a = simulate_brownian(g, 10, 2, seed=9)
    b = simulate_brownian(g, 10, 2, seed=9)
    assert np.array_equal(a, b)
    assert simulate_brownian(g, 1, 3, seed=1).shape == (1, 5, 3)


def test_prefix_property():
    g = make_time_grid(1, 6)
    spec = JumpMeasureSpec([[1.0]], 1.0, 2.0)
    big = simulate_ensemble(g, 50, 1, 4, spec)
    small = simulate_ensemble(g, 20, 1, 4, spec)
    assert np.array_equal(big.brownian_increments[:20], small.brownian_increments)
    assert np.array_equal(big.jump_counts[:20], small.jump_counts)


def test_poisson_mean():
    g = make_time_grid(0.5, 1)
    spec = JumpMeasureSpec([[1.0]], 1.0, 2.0)
    counts = simulate_jumps(g, spec, np.zeros((100_000, 2, 1)), 100_000, seed=5)
    assert abs(counts.mean() - 1.0) < 4 * np.sqrt(1.0 / 100_000)


def test_zero_intensity():
    g = make_time_grid(1, 4)
    spec = JumpMeasureSpec([[1.0]], 1.0, 0.0)
    assert not simulate_jumps(g, spec, np.zeros((30, 5, 1)), 30, seed=1).any()


def test_poisson_splitting():
    n = 100_000
    g = make_time_grid(1, 1)
    spec = JumpMeasureSpec([[1.0], [2.0]], [0.3, 0.7], 1.0)
    counts = simulate_jumps(g, spec, np.zeros((n, 2, 1)), n, seed=8)
    for j, q in enumerate((0.3, 0.7)):
        assert abs(counts[:, 0, j].mean() - q) < 4 * np.sqrt(q / n)


def test_spec_validation():
    with pytest.raises(InvalidSpecError):
        JumpMeasureSpec([[0.0]], 1.0, 1.0)
    with pytest.raises(InvalidSpecError):
        JumpMeasureSpec([[1.0]], -1.0, 1.0)
    bad = JumpMeasureSpec([[1.0]], 1.0, lambda t, x: -np.ones(x.shape[0]))
    with pytest.raises(ModelViolationError):
        bad.rates(0.0, np.zeros((3, 1)))


def test_brownian_factor_is_cumsum():
    g = make_time_grid(1, 16)
    dW = simulate_brownian(g, 40, 1, seed=2)
    X = simulate_factor(g, brownian_factor(1), dW, np.zeros((40, 16, 0), dtype=np.uint32))
    np.testing.assert_allclose(X[:, 1:, 0], np.cumsum(dW[:, :, 0], axis=1), atol=1e-14)


def test_counting_factor():
    g = make_time_grid(1, 16)
    spec = JumpMeasureSpec([[1.0]], 1.0, 3.0)
    cfg = FactorSDE(x0=[0.0], jump=lambda t, x, j: np.ones((x.shape[0], 1)))
    counts = simulate_jumps(g, spec, np.zeros((40, 17, 1)), 40, seed=2)
    X = simulate_factor(g, cfg, np.zeros((40, 16, 1)), counts)
    np.testing.assert_array_equal(X[:, 1:, 0], np.cumsum(counts[:, :, 0], axis=1))


def test_ode_factor():
    g = make_time_grid(1, 2**10)
    cfg = FactorSDE(x0=[1.0], drift=lambda t, x: -x)
    X = simulate_factor(g, cfg, np.zeros((1, 2**10, 1)), np.zeros((1, 2**10, 0), dtype=np.uint32))
    assert abs(X[0, -1, 0] - np.exp(-1)) < 1e-2


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([2, 4]), st.integers(0, 1000))
def test_coarsen_preserves_totals(factor, seed):
    g = make_time_grid(1, 8)
    ens = simulate_ensemble(g, 5, 1, seed, JumpMeasureSpec([[1.0]], 1.0, 2.0))
    c = coarsen(ens, factor)
    assert c.n_steps == 8 // factor
    np.testing.assert_allclose(c.brownian_increments.sum(axis=1), ens.brownian_increments.sum(axis=1), atol=1e-12)
    assert np.array_equal(c.terminal_counts(), ens.terminal_counts())
    np.testing.assert_array_equal(c.factor_states, ens.factor_states[:, ::factor])


def test_ensemble_arrays_read_only():
    ens = simulate_ensemble(make_time_grid(1, 4), 3, 1, 0)
    with pytest.raises(ValueError):
        ens.brownian_increments[0, 0, 0] = 1.0
