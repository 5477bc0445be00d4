"""One test per acceptance criterion; each prints a single PASS/FAIL line."""

import time

import numpy as np
import pytest

from jumpbsde.cache import cache_ensemble, ensembles_identical, load_ensemble
from jumpbsde.config import parse_config
from jumpbsde.driver import make_time_grid
from jumpbsde.experiments import BUILTIN_FOR_UNIQUENESS, bundle_json, run_experiment, run_suite
from jumpbsde.problem import ProbeSpec, probe_conditions
from jumpbsde.problems import builtin_problem


@pytest.fixture
def announce(capsys):
    def emit(number, passed, summary):
        with capsys.disabled():
            print(f"\n{'PASS' if passed else 'FAIL'} criterion {number}: {summary}")

    return emit


def _reports(bundle):
    return {row["check"] + ":" + row["name"]: row for row in bundle.checks}


def _config(**raw):
    return parse_config(raw)


def test_criterion_1_oracle_suite(announce):
    start = time.perf_counter()
    bundle = run_suite("oracle")
    elapsed = time.perf_counter() - start
    rows = _reports(bundle)
    y_err = rows["brownian_terminal/oracle:oracle_Y"]["lhs"]
    z_err = rows["brownian_terminal/oracle:oracle_Z"]["lhs"]
    u_err = rows["jump_terminal/oracle:oracle_U"]["lhs"]
    y0_rel = rows["linear_y/oracle:oracle_Y0_rel"]["lhs"]
    cfg = bundle.metadata["runs"][0]["config"]
    ok = (
        cfg["ensemble"]["n_paths"] == 10_000
        and cfg["grid"]["n_steps"] == 64
        and y_err < 1e-2 * np.sqrt(cfg["grid"]["T"])
        and z_err < 5e-2
        and u_err < 5e-2
        and y0_rel < 1e-2
        and elapsed < 60
    )
    announce(1, ok, f"|Y-W| {y_err:.2e}, Z {z_err:.2e}, U {u_err:.2e}, Y0 rel {y0_rel:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_inequality_suite(announce):
    start = time.perf_counter()
    bundle = run_experiment(
        _config(
            name="inequalities",
            problem="lipschitz_z",
            grid={"n_steps": 64},
            ensemble={"n_paths": 4000, "seed": 2024},
            scheme={"degree": 2, "ridge": 1e-8},
            checks=["lemma31", {"name": "lemma33", "ps": [1.2, 1.5, 1.8]}, {"name": "remark21", "ps": [2.0, 3.0, 1.5]}],
        )
    )
    elapsed = time.perf_counter() - start
    rows = _reports(bundle)
    l31 = bundle.details["lemma31"]["reports"][0]["details"]
    l33 = [r["details"] for r in bundle.details["lemma33"]["reports"]]
    r21 = {r["name"]: r for r in bundle.details["remark21"]["reports"]}
    ok = (
        l31["n_samples"] >= 10_000
        and l31["n_violations"] == 0
        and all(d["n_violations"] == 0 and d["n_jumps"] > 0 for d in l33)
        and [d["p"] for d in l33] == [1.2, 1.5, 1.8]
        and r21["remark21_p2"]["relation"] == "=="
        and r21["remark21_p3"]["constant"] == pytest.approx(1.5**1.5)
        and r21["remark21_p1.5"]["constant"] == 2.0
        and all(r["passed"] for r in r21.values())
        and all(row["passed"] for row in rows.values())
        and elapsed < 120
    )
    announce(
        2,
        ok,
        f"lemma31 0/{l31['n_samples']} violations, lemma33 {sum(d['n_jumps'] for d in l33)} jumps checked, "
        f"remark21 ratios {[round(r['measured_ratio'], 3) for r in r21.values()]}, {elapsed:.1f}s",
    )
    assert ok


def test_criterion_3_ito(announce):
    bundle = run_experiment(
        _config(problem="lipschitz_z", ensemble={"seed": 2024}, checks=[{"name": "ito", "levels": [64, 128, 256, 512]}])
    )
    rows = _reports(bundle)
    rel = rows["ito:ito_jump_only"]["lhs"]
    order = rows["ito:ito_refinement_order"]["lhs"]
    ok = rel <= 1e-10 and order >= 0.4
    announce(3, ok, f"jump-only relative {rel:.1e}, diffusion order {order:.3f}")
    assert ok


def test_criterion_4_apriori(announce):
    bundle = run_experiment(
        _config(problem="lipschitz_z", ensemble={"seed": 2024}, checks=[{"name": "apriori", "sizes": [1000, 4000, 16000]}])
    )
    rows = _reports(bundle)
    parts = []
    ok = True
    for case in ("P2", "Pgt2_Y", "Pgt2_ZU", "Plt2"):
        stab = rows[f"apriori:apriori_{case}_stability"]
        homog = rows[f"apriori:apriori_{case}_homogeneity"]
        zero = rows[f"apriori:apriori_{case}_zero_collapse"]
        ok &= stab["lhs"] < 0.2 and homog["lhs"] <= 1e-12 and zero["lhs"] == 0.0 and zero["passed"]
        parts.append(f"{case} spread {stab['lhs']:.3f}")
    announce(4, ok, ", ".join(parts))
    assert ok


def test_criterion_5_contraction(announce):
    bundle = run_experiment(
        _config(
            problem="lipschitz_z",
            grid={"n_steps": 32},
            ensemble={"n_paths": 4000, "seed": 17},
            scheme={"degree": 2, "ridge": 1e-8, "picard": {"k_max": 50, "tol": 1e-6}},
            checks=[{"name": "contraction", "ps": [1.5, 2.5]}],
        )
    )
    ok, parts = True, []
    for p in ("1.5", "2.5"):
        sweep = bundle.details["contraction"][f"p{p}"]["sweep"]
        factors = [e["factor"] for e in sweep]
        top = sweep[-1]
        iters = max(r["iteration"] for r in bundle.picard if r["label"] == f"p{p}")
        converged = all(r["converged"] for r in bundle.picard if r["label"] == f"p{p}")
        ok &= (
            len(factors) == 5
            and all(b <= a for a, b in zip(factors, factors[1:]))
            and top["factor"] < 1 + 3 * top["std_error"]
            and converged
            and iters <= 10
        )
        parts.append(f"p={p} factors {[round(f, 3) for f in factors]}, Picard {iters} it")
    announce(5, ok, "; ".join(parts))
    assert ok


def test_criterion_6_localization_truncation(announce):
    bundle = run_experiment(
        _config(
            problem="local_growth",
            grid={"n_steps": 32},
            ensemble={"n_paths": 4000, "seed": 3},
            scheme={"degree": 2},
            checks=[{"name": "localization", "levels": [1, 2, 4, 8]}, {"name": "truncation", "n_samples": 10_000}],
        )
    )
    d = bundle.details["localization"]["distances"]
    mono = all(b <= 1.1 * a for a, b in zip(d, d[1:]))
    trunc = bundle.details["truncation"]
    bad = sum(v["exceed"] + v["moved_inside"] for k, v in trunc.items() if k != "reports")
    inside = sum(v["n_inside"] for k, v in trunc.items() if k != "reports")
    ok = mono and bad == 0 and inside > 0 and bundle.passed
    announce(6, ok, f"E2 distances {[round(x, 4) for x in d]}, truncation violations {bad} ({inside} samples inside)")
    assert ok


def test_criterion_7_uniqueness(announce):
    admitted = [k for k in BUILTIN_FOR_UNIQUENESS if probe_conditions(builtin_problem(k), ProbeSpec(n_samples=300)).admitted]
    bundle = run_experiment(
        _config(
            problem="zero",
            grid={"n_steps": 32},
            ensemble={"n_paths": 2000, "seed": 31},
            scheme={"degree": 2, "ridge": 1e-8, "picard": {"k_max": 50, "tol": 1e-6}},
            checks=[{"name": "uniqueness", "problems": admitted}],
        )
    )
    gaps = {row["problems"]: row["lhs"] for row in bundle.checks}
    ok = len(gaps) == len(BUILTIN_FOR_UNIQUENESS) == len(admitted) and all(g < 5e-6 for g in gaps.values())
    announce(7, ok, f"{len(gaps)} problems, worst E_p gap {max(gaps.values()):.2e} (limit 5e-06)")
    assert ok


def test_criterion_8_infrastructure(announce, tmp_path):
    prob = builtin_problem("lipschitz_z")
    ens = prob.simulate(make_time_grid(1.0, 64), 1000, 11)
    back = load_ensemble(cache_ensemble(ens, tmp_path / "e.jbsd"))
    round_trip = ensembles_identical(ens, back) and all(
        getattr(ens, a).tobytes() == getattr(back, a).tobytes()
        for a in ("brownian_increments", "jump_counts", "factor_states", "rates")
    )

    cfg = _config(
        problem="lipschitz_z",
        grid={"n_steps": 16},
        ensemble={"n_paths": 1000, "seed": 8},
        scheme={"degree": 2, "ridge": 1e-8},
        checks=["residual", "norms", "picard", "cache_roundtrip"],
    )
    same = bundle_json(run_experiment(cfg), False) == bundle_json(run_experiment(cfg), False)

    rate = run_experiment(
        _config(problem="brownian_square", grid={"n_steps": 128}, ensemble={"n_paths": 10_000, "seed": 7}, scheme={"degree": 2}, checks=["residual_rate"])
    )
    order = rate.details["residual_rate"]["order"]
    ok = round_trip and same and abs(order - 0.5) <= 0.1
    announce(8, ok, f"cache bit-identical {round_trip}, reports identical {same}, residual order {order:.3f}")
    assert ok
