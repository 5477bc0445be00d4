import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jumpbsde.driver import make_time_grid
from jumpbsde.errors import DegeneratePairError, InvalidExponentError, PreconditionError
from jumpbsde.problem import compute_weight_paths
from jumpbsde.problems import jump_terminal, linear_y, lipschitz_z, local_growth, monotone_cubic
from jumpbsde.solver import DiscreteSolution, RegressionConfig, solve_backward
from jumpbsde.verify import (
    adapted_input_pairs,
    apriori_check,
    b_p,
    brownian_triple,
    estimate_contraction_factor,
    ito_refinement,
    jump_lower_term,
    jump_only_triple,
    jump_remainder,
    lemma31_integral,
    loglog_slope,
    verify_ito_formula,
    verify_lemma31,
    verify_lemma33,
    verify_localization_convergence,
)

JUMP_CFG = RegressionConfig(degree=1, ridge=1e-8)


# integral bound for p > 2


@pytest.mark.parametrize("p,exact", [(3.0, 1 / 3), (4.0, 1 / 4), (2.5, 2 / 5)])
def test_integral_closed_form(p, exact):
    # x = 1, y = -1: ∫(1 − r)^{p−1} dr = 1/p
    assert lemma31_integral(np.array([1.0]), np.array([-1.0]), p) == pytest.approx(exact, rel=1e-9)
    assert exact >= 3.0 ** (1 - p)


@settings(max_examples=30, deadline=None)
@given(st.floats(2.0, 6.0), st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_integral_against_trapezoid(p, x, y):
    x, y = np.array(x), np.array(y)
    r = np.linspace(0.0, 1.0, 20_001)
    vals = (1 - r) * np.linalg.norm(x[None] + r[:, None] * y[None], axis=1) ** (p - 2)
    ref = np.sum((vals[1:] + vals[:-1]) / 2) * (r[1] - r[0])
    assert lemma31_integral(x, y, p) == pytest.approx(ref, rel=1e-3, abs=1e-6)


def test_integral_y_zero():
    x = np.array([2.0, 1.0])
    p = 3.5
    assert lemma31_integral(x, np.zeros(2), p) == pytest.approx(np.linalg.norm(x) ** (p - 2) / 2, rel=1e-10)


def test_lemma31_small_run():
    rep = verify_lemma31(n_samples=400, seed=3)
    assert rep.passed
    regimes = rep.details["regimes"]
    assert all(v > 0 for v in regimes.values())
    assert rep.lhs <= 1.0


def test_lemma31_needs_p_above_two():
    with pytest.raises(InvalidExponentError):
        verify_lemma31(p_range=(1.5, 1.9), n_samples=10)


# jump inequality for p in (1, 2)


def test_b_p():
    assert b_p(1.5) == 0.375


def test_jump_example():
    x, y = np.array([1.0]), np.array([-2.0])
    assert jump_remainder(x, y, 1.5) == pytest.approx(3.0)
    assert jump_lower_term(x, y, 1.5) == pytest.approx(1.5)


def test_jump_zero_u():
    x = np.array([0.7, -0.2])
    assert jump_remainder(x, np.zeros(2), 1.3) == 0.0
    assert jump_lower_term(x, np.zeros(2), 1.3) == 0.0


@settings(max_examples=300, deadline=None)
@given(
    st.floats(1.01, 1.99),
    st.lists(st.floats(-10, 10), min_size=3, max_size=3),
    st.lists(st.floats(-10, 10), min_size=3, max_size=3),
)
def test_jump_inequality_property(p, x, y):
    x, y = np.array(x), np.array(y)
    rem, low = jump_remainder(x, y, p), jump_lower_term(x, y, p)
    assert rem >= low - 1e-10 * (1 + np.linalg.norm(x) ** p + np.linalg.norm(y) ** p)


@pytest.mark.parametrize("p", [1.2, 1.5, 1.8])
def test_lemma33_on_solution(lip_setup, p):
    prob, ens, w, sol = lip_setup
    rep = verify_lemma33(p, 1.0, sol, ens, w)
    assert rep.details["n_jumps"] > 0
    assert rep.passed, rep.details["witness"]


# Itô identity


def test_ito_zero_path():
    prob = jump_terminal()
    ens = prob.simulate(make_time_grid(1.0, 8), 20, 0)
    w = compute_weight_paths(prob, ens)
    sol = DiscreteSolution(np.zeros((20, 9, 1)), np.zeros((20, 8, 1, 1)), np.zeros((20, 8, 1, 1)), ens.grid)
    rep = verify_ito_formula(1.5, 1.0, 0.5, sol, ens, w, drift=np.zeros((20, 8, 1)))
    assert np.all(rep.lhs == 0) and np.all(rep.rhs == 0)


@pytest.mark.parametrize("p,mu", [(1.2, 0.0), (1.5, 0.5), (1.8, 2.0)])
def test_ito_jump_only_exact(p, mu):
    prob = jump_terminal()
    ens = prob.simulate(make_time_grid(1.0, 32), 500, 7)
    w = compute_weight_paths(prob, ens)
    X0, F, Z, U = jump_only_triple(ens, seed=1)
    sol = DiscreteSolution(np.repeat(X0[:, None], 33, axis=1), Z, U, ens.grid)
    assert verify_ito_formula(p, 1.0, mu, sol, ens, w, drift=F).relative < 1e-10


def test_ito_brownian_order():
    prob = linear_y()
    fine = prob.simulate(make_time_grid(1.0, 256), 1000, 5)
    res = ito_refinement(prob, fine, (4, 2, 1), 1.5, 0.0, 0.0, brownian_triple)
    assert res["order"] >= 0.4


def test_ito_rejects_p():
    prob = jump_terminal()
    ens = prob.simulate(make_time_grid(1.0, 4), 5, 0)
    w = compute_weight_paths(prob, ens)
    sol = DiscreteSolution(np.zeros((5, 5, 1)), np.zeros((5, 4, 1, 1)), np.zeros((5, 4, 1, 1)), ens.grid)
    with pytest.raises(InvalidExponentError):
        verify_ito_formula(2.5, 1.0, 0.0, sol, ens, w)


def test_loglog_slope():
    h = np.array([0.1, 0.05, 0.025])
    assert loglog_slope(h, 3 * h**0.5) == pytest.approx(0.5)


# a priori displays


def _pair(p, n_paths=1500):
    p1 = lipschitz_z(p=p, intensity=4.0)
    p2 = lipschitz_z(p=p, intensity=4.0, terminal_scale=0.5, b=0.3, decay=0.3)
    ens = p1.simulate(make_time_grid(1.0, 16), n_paths, 3)
    w = compute_weight_paths(p1, ens)
    return p1, p2, ens, w, solve_backward(p1, ens, w, JUMP_CFG), solve_backward(p2, ens, w, JUMP_CFG)


@pytest.mark.parametrize("case,p", [("P2", 2.0), ("Pgt2_Y", 3.0), ("Pgt2_ZU", 3.0)])
def test_apriori_identical_solutions(case, p):
    p1, _, ens, w, s1, _ = _pair(p, 300)
    rep = apriori_check(case, p1, s1, ens, w, p, 1.0, p1, s1)
    assert rep.lhs == 0.0 and rep.rhs == 0.0
    assert rep.measured_ratio == 0.0


@pytest.mark.parametrize("case,p", [("P2", 2.0), ("Pgt2_Y", 3.0), ("Pgt2_ZU", 3.0)])
def test_apriori_homogeneity(case, p):
    p1, p2, ens, w, s1, s2 = _pair(p, 300)
    rep = apriori_check(case, p1, s1, ens, w, p, 1.0, p2, s2)
    assert rep.details["homogeneity_gap"] <= 1e-12
    assert rep.passed and np.isfinite(rep.measured_ratio) and rep.lhs > 0


def test_apriori_plt2_needs_u_free():
    p1, p2, ens, w, s1, s2 = _pair(1.5, 200)
    with pytest.raises(PreconditionError):
        apriori_check("Plt2", p1, s1, ens, w, 1.5, 1.0, p2, s2)


def test_apriori_plt2_u_free():
    p1 = monotone_cubic(p=1.5)
    p2 = linear_y(a=-0.5, c=0.5, p=1.5)
    ens = p1.simulate(make_time_grid(1.0, 16), 400, 1)
    w = compute_weight_paths(p1, ens)
    s1, s2 = solve_backward(p1, ens, w), solve_backward(p2, ens, w)
    rep = apriori_check("Plt2", p1, s1, ens, w, 1.5, 1.0, p2, s2)
    assert rep.passed


def test_apriori_p2_needs_p2():
    p1, p2, ens, w, s1, s2 = _pair(2.0, 200)
    with pytest.raises(InvalidExponentError):
        apriori_check("P2", p1, s1, ens, w, 3.0, 1.0, p2, s2)


# contraction


def test_contraction_degenerate_pair():
    prob = lipschitz_z()
    ens = prob.simulate(make_time_grid(1.0, 8), 200, 0)
    w = compute_weight_paths(prob, ens)
    a, _ = adapted_input_pairs(prob, ens, 1)[0]
    with pytest.raises(DegeneratePairError):
        estimate_contraction_factor(prob, ens, w, JUMP_CFG, 1.0, [(a, a)])


def test_contraction_zu_free_is_zero():
    prob = linear_y()
    ens = prob.simulate(make_time_grid(1.0, 8), 200, 0)
    w = compute_weight_paths(prob, ens)
    est = estimate_contraction_factor(prob, ens, w, RegressionConfig(degree=1), 1.0, adapted_input_pairs(prob, ens, 2))
    assert est.factor < 1e-10


def test_contraction_decreases_in_beta():
    prob = lipschitz_z(p=2.0)
    ens = prob.simulate(make_time_grid(1.0, 16), 1000, 2)
    w = compute_weight_paths(prob, ens)
    pairs = adapted_input_pairs(prob, ens, 2, seed=1)
    f = [estimate_contraction_factor(prob, ens, w, JUMP_CFG, b, pairs).factor for b in (0.5, 2.0, 8.0)]
    assert f[0] >= f[1] >= f[2]
    assert f[2] < 1


# localization


def test_localization_inactive_distances_zero():
    prob = linear_y()
    ens = prob.simulate(make_time_grid(1.0, 8), 100, 0)
    w = compute_weight_paths(prob, ens)
    res = verify_localization_convergence(prob, ens, w, [2, 4], cfg=RegressionConfig(degree=1))
    assert res["distances"] == [0.0] and res["driver_gaps"] == [0.0]


def test_localization_unbounded_growth():
    prob = local_growth()
    ens = prob.simulate(make_time_grid(1.0, 16), 2000, 4)
    w = compute_weight_paths(prob, ens)
    res = verify_localization_convergence(prob, ens, w, [1, 2, 4, 8], cfg=RegressionConfig(degree=2))
    assert res["passed"], res["distances"]
    assert res["distances"][0] > 0
