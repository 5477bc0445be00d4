"""Run configured experiments and write their reports.

A run builds the problem, simulates the ensemble, solves once and then
executes the requested checks in name order.  Every check contributes rows
to ``checks`` (and possibly ``norms``/``picard``); wall-clock times live in
``timing`` and are the only part of a report allowed to differ between two
runs of the same config.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import platform
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import scipy

from . import __version__
from .cache import cache_ensemble, ensembles_identical, load_ensemble
from .config import CHECK_NAMES, CheckSpec, ExperimentConfig, build_problem, parse_config, problem_from_dict
from .driver import coarsen, make_time_grid
from .errors import InvalidSpecError, JumpBSDEError, NonContractionError
from .norms import EstimateReport, all_norms, distance
from .norms import check_remark21 as remark21_report
from .problem import compute_weight_paths
from .problems import brownian_terminal, jump_terminal, lipschitz_z
from .solver import (
    DiscreteSolution,
    RegressionConfig,
    beta_threshold,
    bsde_residual,
    picard_iterate,
    q_truncate,
    solve_backward,
)
from .verify import (
    adapted_input_pairs,
    apriori_check,
    contraction_sweep,
    ito_refinement,
    jump_only_triple,
    loglog_slope,
    oracle_errors,
    ratio_stability,
    verify_ito_formula,
    verify_lemma31,
    verify_lemma33,
    verify_localization_convergence,
)

NORM_COLUMNS = ("run", "kind", "component", "p", "beta", "value", "std_error", "n_paths")
CHECK_COLUMNS = (
    "check",
    "name",
    "passed",
    "lhs",
    "lhs_se",
    "rhs",
    "rhs_se",
    "constant",
    "relation",
    "measured_ratio",
    "slack_sigmas",
    "p",
    "beta",
    "n_paths",
    "n_steps",
    "problems",
)
PICARD_COLUMNS = ("run", "label", "iteration", "distance", "ratio", "converged", "tol")


class CheckExecutionError(JumpBSDEError):
    def __init__(self, check: str, cause: Exception):
        super().__init__(f"check {check!r} failed with {type(cause).__name__}: {cause}")
        self.check = check
        self.cause = cause


@dataclass
class ReportBundle:
    metadata: dict = field(default_factory=dict)
    norms: List[dict] = field(default_factory=list)
    checks: List[dict] = field(default_factory=list)
    picard: List[dict] = field(default_factory=list)
    residuals: Dict[str, dict] = field(default_factory=dict)
    details: Dict[str, dict] = field(default_factory=dict)
    timing: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(row["passed"] for row in self.checks)

    def failures(self) -> List[dict]:
        return [{"check": r["check"], "name": r["name"], "measured_ratio": r["measured_ratio"]} for r in self.checks if not r["passed"]]

    def body(self) -> dict:
        """Everything except timing."""
        return {
            "metadata": self.metadata,
            "norms": self.norms,
            "checks": self.checks,
            "picard": self.picard,
            "residuals": self.residuals,
            "details": self.details,
        }

    def to_dict(self) -> dict:
        return {**self.body(), "timing": self.timing}


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if np.isnan(v):
            return "nan"
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def _row(check_id: str, rep: EstimateReport) -> dict:
    d = rep.details
    probs = d.get("problems", d.get("problem", ""))
    if isinstance(probs, (list, tuple)):
        probs = ";".join(map(str, probs))
    return {
        "check": check_id,
        "name": rep.name,
        "passed": bool(rep.passed),
        "lhs": rep.lhs,
        "lhs_se": rep.lhs_se,
        "rhs": rep.rhs,
        "rhs_se": rep.rhs_se,
        "constant": rep.constant,
        "relation": rep.relation,
        "measured_ratio": rep.measured_ratio,
        "slack_sigmas": rep.slack_sigmas,
        "p": d.get("p", ""),
        "beta": d.get("beta", ""),
        "n_paths": d.get("n_paths", ""),
        "n_steps": d.get("n_steps", ""),
        "problems": probs,
    }


def flag(name, passed, value=float("nan"), target=float("nan"), relation="<=", **details) -> EstimateReport:
    """A report for a check that is a plain yes/no with one measured value."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = float(value) / float(target) if target not in (0, 0.0) else float("nan")
    return EstimateReport(
        name=name,
        lhs=float(value),
        lhs_se=0.0,
        rhs=float(target),
        rhs_se=0.0,
        constant=1.0,
        relation=relation,
        slack_sigmas=0.0,
        passed=bool(passed),
        measured_ratio=ratio,
        details=details,
    )


# --------------------------------------------------------------------------
# run context


class RunContext:
    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.cfg = RegressionConfig(degree=config.degree, ridge=config.ridge)
        self.grid = make_time_grid(config.T, config.n_steps)
        self.problem = build_problem(config)
        self._ensemble = None
        self._weights = None
        self._solution = None

    @property
    def ensemble(self):
        if self._ensemble is None:
            self._ensemble = self.problem.simulate(self.grid, self.config.n_paths, self.config.seed)
        return self._ensemble

    @property
    def weights(self):
        if self._weights is None:
            self._weights = compute_weight_paths(self.problem, self.ensemble)
        return self._weights

    @property
    def solution(self):
        if self._solution is None:
            self._solution = solve_backward(self.problem, self.ensemble, self.weights, self.cfg)
        return self._solution

    def meta(self, **extra):
        return {
            "p": self.problem.p,
            "beta": self.problem.beta,
            "n_paths": self.ensemble.n_paths,
            "n_steps": self.ensemble.n_steps,
            "problems": [self.problem.name],
            **extra,
        }


@dataclass
class CheckOutcome:
    reports: List[EstimateReport] = field(default_factory=list)
    norms: List[dict] = field(default_factory=list)
    picard: List[dict] = field(default_factory=list)
    residual: Optional[dict] = None
    details: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# oracles

ORACLE_DEFAULTS = {
    "zero": {"Y": 1e-12, "Z": 1e-12, "U": 1e-12},
    "brownian_terminal": {"Y": 1e-2, "Z": 5e-2},
    "jump_terminal": {"U": 5e-2},
    "linear_y": {"Y0_rel": 1e-2},
    "brownian_square": {"Y": 5e-2, "Z": 2e-1},
}


def exact_solution(problem, ensemble) -> Dict[str, np.ndarray]:
    key = problem.params.get("key")
    P, n = ensemble.n_paths, ensemble.n_steps
    d, k, m = problem.dim_d, problem.dim_k, problem.n_marks
    X = ensemble.factor_states
    t = ensemble.grid.times
    zeros = {"Y": np.zeros((P, n + 1, d)), "Z": np.zeros((P, n, d, k)), "U": np.zeros((P, n, d, m))}
    if key == "zero":
        return zeros
    if key == "brownian_terminal":
        Z = zeros["Z"].copy()
        Z[:, :, 0, 0] = 1.0
        return {"Y": X[:, :, :1], "Z": Z, "U": zeros["U"]}
    if key == "jump_terminal":
        U = np.ones((P, n, 1, 1))
        return {"Y": X[:, :, :1], "Z": zeros["Z"], "U": U}
    if key == "linear_y":
        a, c = problem.params["a"], problem.params["c"]
        Y = np.broadcast_to(c * np.exp(a * (t[-1] - t))[None, :, None], (P, n + 1, 1))
        return {"Y": Y, "Z": zeros["Z"]}
    if key == "brownian_square":
        W = X[:, :, :1]
        Z = 2.0 * W[:, :-1, :, None]
        return {"Y": W**2 + (t[-1] - t)[None, :, None], "Z": Z}
    raise InvalidSpecError(f"no exact solution is known for problem {problem.name!r}")


def check_oracle(ctx: RunContext, params: dict) -> CheckOutcome:
    key = ctx.problem.params.get("key")
    if key not in ORACLE_DEFAULTS:
        raise InvalidSpecError(f"no oracle for problem {ctx.problem.name!r}")
    limits = {**ORACLE_DEFAULTS[key], **params.get("limits", {})}
    exact = exact_solution(ctx.problem, ctx.ensemble)
    errs = oracle_errors(ctx.solution, exact.get("Y"), exact.get("Z"), exact.get("U"))
    if "Y" in exact:
        y0 = float(ctx.solution.Y[:, 0, 0].mean())
        e0 = float(exact["Y"][:, 0, 0].mean())
        errs["Y0_rel"] = abs(y0 - e0) / abs(e0) if e0 != 0 else abs(y0)
    reports = []
    sqrt_T = np.sqrt(ctx.grid.T)
    for comp, lim in sorted(limits.items()):
        target = lim * sqrt_T if comp == "Y" and key != "zero" else lim
        reports.append(flag(f"oracle_{comp}", errs[comp] < target, errs[comp], target, **ctx.meta()))
    return CheckOutcome(reports=reports, details={"errors": errs})


# --------------------------------------------------------------------------
# checks


def check_residual(ctx, params):
    stats = bsde_residual(ctx.problem, ctx.solution, ctx.ensemble)
    limit = float(params.get("max", np.inf))
    ok = bool(np.isfinite(stats.max_l2) and stats.max_l2 <= limit)
    rep = flag("residual", ok, stats.max_l2, limit, **ctx.meta())
    residual = {"max_l2": stats.max_l2, "argmax": stats.argmax, "node_l2": stats.node_l2}
    return CheckOutcome(reports=[rep], residual=residual)


def check_residual_rate(ctx, params):
    """Max-node residual on coarsened copies of one fine ensemble."""
    levels = sorted(int(v) for v in params.get("levels", (16, 32, 64, 128)))
    target, tol = float(params.get("order", 0.5)), float(params.get("tol", 0.1))
    grid = make_time_grid(ctx.grid.T, levels[-1])
    fine = ctx.problem.simulate(grid, ctx.config.n_paths, ctx.config.seed)
    rows = []
    for n in levels:
        ens = coarsen(fine, levels[-1] // n)
        sol = solve_backward(ctx.problem, ens, None, ctx.cfg)
        rows.append({"n_steps": n, "max_l2": bsde_residual(ctx.problem, sol, ens).max_l2})
    order = loglog_slope([ctx.grid.T / r["n_steps"] for r in rows], [r["max_l2"] for r in rows])
    ok = abs(order - target) <= tol
    rep = flag("residual_rate", ok, order, target, "==", **ctx.meta(n_steps=levels, tolerance=tol))
    return CheckOutcome(reports=[rep], details={"levels": rows, "order": order})


def check_norms(ctx, params):
    p = float(params.get("p", ctx.problem.p))
    beta = float(params.get("beta", ctx.problem.beta))
    prob = ctx.problem.with_exponent(p, beta)
    weights = ctx.weights if p == ctx.problem.p else compute_weight_paths(prob, ctx.ensemble)
    table = all_norms(ctx.solution, weights, ctx.ensemble, p, beta)
    rows = [{"kind": k, **{c: v for c, v in est.to_dict().items() if c != "kind"}} for k, est in sorted(table.items())]
    ok = all(np.isfinite(r["value"]) for r in rows)
    return CheckOutcome(reports=[flag("norms_finite", ok, len(rows), len(rows), "==", **ctx.meta(p=p, beta=beta))], norms=rows)


def check_remark21(ctx, params):
    reports = []
    for p in params.get("ps", [ctx.problem.p]):
        p = float(p)
        prob = ctx.problem.with_exponent(p)
        weights = compute_weight_paths(prob, ctx.ensemble)
        rep = remark21_report(ctx.solution.U, weights, ctx.ensemble, p, prob.beta, float(params.get("slack_sigmas", 3.0)))
        rep.details.update(n_steps=ctx.ensemble.n_steps, problems=[ctx.problem.name])
        reports.append(rep)
    return CheckOutcome(reports=reports)


def check_lemma31(ctx, params):
    rep = verify_lemma31(
        tuple(params.get("p_range", (2.0, 6.0))),
        int(params.get("n_samples", 10_000)),
        tuple(params.get("dims", (1, 2, 3))),
        int(params.get("seed", ctx.config.seed)),
    )
    return CheckOutcome(reports=[rep])


def check_lemma33(ctx, params):
    reports = []
    for p in params.get("ps", (1.2, 1.5, 1.8)):
        prob = ctx.problem.with_exponent(float(p))
        weights = compute_weight_paths(prob, ctx.ensemble)
        rep = verify_lemma33(float(p), prob.beta, ctx.solution, ctx.ensemble, weights)
        rep.details["problems"] = [ctx.problem.name]
        reports.append(rep)
    return CheckOutcome(reports=reports)


def check_ito(ctx, params):
    """Exactness on jump-only paths and the refinement order with X = W."""
    p = float(params.get("p", 1.5))
    seed = ctx.config.seed
    jump = jump_terminal(p=p)
    ens = jump.simulate(make_time_grid(ctx.grid.T, int(params.get("jump_steps", 64))), int(params.get("jump_paths", 2000)), seed)
    weights = compute_weight_paths(jump, ens)
    X0, F, Z, U = jump_only_triple(ens, seed=seed)
    sol = DiscreteSolution(np.repeat(X0[:, None], ens.n_steps + 1, axis=1), Z, U, ens.grid)
    beta, mu = float(params.get("beta", 1.0)), float(params.get("mu", p - 1.0))
    rel = verify_ito_formula(p, beta, mu, sol, ens, weights, drift=F).relative
    tol = float(params.get("exact_tol", 1e-10))
    meta = {"p": p, "beta": beta, "n_paths": ens.n_paths, "n_steps": ens.n_steps, "problems": [jump.name], "mu": mu}
    r1 = flag("ito_jump_only", rel <= tol, rel, tol, **meta)

    levels = sorted(int(v) for v in params.get("levels", (64, 128, 256, 512)))
    bt = brownian_terminal(p=p)
    fine = bt.simulate(make_time_grid(ctx.grid.T, levels[-1]), int(params.get("diffusion_paths", 10_000)), seed)
    study = ito_refinement(bt, fine, [levels[-1] // n for n in levels], p, 0.0, 0.0)
    min_order = float(params.get("min_order", 0.4))
    meta = {"p": p, "beta": 0.0, "n_paths": fine.n_paths, "n_steps": levels, "problems": [bt.name]}
    r2 = flag("ito_refinement_order", study["order"] >= min_order, study["order"], min_order, ">=", **meta)
    return CheckOutcome(reports=[r1, r2], details={"jump_only_relative": rel, "refinement": study})


APRIORI_PAIRS = {
    # (problem 1 overrides, problem 2 overrides, p)
    "P2": ({}, {"b": 0.3, "decay": 0.3, "terminal_scale": 0.5}, 2.0),
    "Pgt2_Y": ({}, {"b": 0.3, "decay": 0.3, "terminal_scale": 0.5}, 3.0),
    "Pgt2_ZU": ({}, {"b": 0.3, "decay": 0.3, "terminal_scale": 0.5}, 3.0),
    "Plt2": ({"b_u": 0.0}, {"b": 0.3, "decay": 0.3, "terminal_scale": 0.5}, 1.5),
}


def check_apriori(ctx, params):
    """Ratio stability and homogeneity of the a priori displays on lipschitz-z pairs."""
    cases = params.get("cases", list(APRIORI_PAIRS))
    sizes = [int(s) for s in params.get("sizes", (1000, 4000, 16000))]
    intensity = float(params.get("intensity", 4.0))
    max_spread = float(params.get("max_spread", 0.2))
    n_steps = int(params.get("n_steps", 32))
    cfg = RegressionConfig(degree=int(params.get("degree", 1)), ridge=float(params.get("ridge", 1e-8)))
    grid = make_time_grid(ctx.grid.T, n_steps)
    reports, details = [], {}
    for case in cases:
        over1, over2, p = APRIORI_PAIRS[case]
        p1 = lipschitz_z(p=p, intensity=intensity, **over1)
        p2 = lipschitz_z(p=p, intensity=intensity, **over2)
        ens = p1.simulate(grid, max(sizes), ctx.config.seed)
        study = ratio_stability(case, p1, ens, sizes, cfg, p2)
        homog = all(r.passed for r in study["reports"])
        # zero-data collapse: a solution against itself
        w = compute_weight_paths(p1, ens.subset(sizes[0]))
        sol = solve_backward(p1, ens.subset(sizes[0]), w, cfg)
        zero = apriori_check(case, p1, sol, ens.subset(sizes[0]), w, p, p1.beta, p1, sol)
        collapse = zero.lhs == 0.0 and zero.rhs == 0.0
        last = study["reports"][-1]
        meta = {**last.details, "n_paths": sizes, "problems": [p1.name, p2.name]}
        reports.append(flag(f"apriori_{case}_stability", study["spread"] < max_spread, study["spread"], max_spread, **meta))
        reports.append(flag(f"apriori_{case}_homogeneity", homog, max(r.details["homogeneity_gap"] for r in study["reports"]), 1e-12, **meta))
        reports.append(flag(f"apriori_{case}_zero_collapse", collapse, zero.lhs, 0.0, "==", **meta))
        details[case] = {"ratios": study["ratios"], "spread": study["spread"], "lhs": [r.lhs for r in study["reports"]], "rhs": [r.rhs for r in study["reports"]]}
    return CheckOutcome(reports=reports, details=details)


def check_contraction(ctx, params):
    reports, picard_rows, details = [], [], {}
    ladder = [float(f) for f in params.get("ladder", (0.25, 0.5, 1.0, 2.0, 4.0))]
    max_iter = int(params.get("max_iterations", 10))
    for p in params.get("ps", (ctx.problem.p,)):
        p = float(p)
        b_star = beta_threshold(p)
        prob = ctx.problem.with_exponent(p, b_star)
        weights = compute_weight_paths(prob, ctx.ensemble)
        pairs = adapted_input_pairs(prob, ctx.ensemble, int(params.get("n_pairs", 3)), seed=ctx.config.seed)
        sweep = contraction_sweep(prob, ctx.ensemble, weights, ctx.cfg, [b_star * f for f in ladder], pairs)
        factors = [e.factor for e in sweep]
        mono = all(b <= a for a, b in zip(factors, factors[1:]))
        top = sweep[-1]
        meta = ctx.meta(p=p, beta=[e.beta for e in sweep])
        reports.append(flag(f"contraction_monotone_p{p:g}", mono, factors[-1], factors[0], **meta))
        reports.append(flag(f"contraction_top_p{p:g}", top.factor < 1.0 + 3.0 * top.std_error, top.factor, 1.0, **meta))
        _, trace = picard_iterate(prob, ctx.ensemble, weights, ctx.cfg, k_max=ctx.config.k_max, tol=ctx.config.tol, raise_on_failure=False)
        ok = trace.converged and trace.iterations <= max_iter
        reports.append(flag(f"picard_p{p:g}", ok, trace.iterations, max_iter, **ctx.meta(p=p, beta=b_star)))
        picard_rows += _trace_rows(f"p{p:g}", trace)
        details[f"p{p:g}"] = {"beta_threshold": b_star, "sweep": [e.to_dict() for e in sweep]}
    return CheckOutcome(reports=reports, picard=picard_rows, details=details)


def _trace_rows(label, trace):
    rows = []
    ratios = [float("nan")] + trace.ratios
    for k, (dist, ratio) in enumerate(zip(trace.distances, ratios), start=1):
        rows.append({"label": label, "iteration": k, "distance": dist, "ratio": ratio, "converged": trace.converged, "tol": trace.tol})
    return rows


def check_picard(ctx, params):
    try:
        _, trace = picard_iterate(ctx.problem, ctx.ensemble, ctx.weights, ctx.cfg, k_max=ctx.config.k_max, tol=ctx.config.tol)
    except NonContractionError as exc:
        rep = flag("picard", False, ctx.config.k_max, ctx.config.k_max, **ctx.meta(ratios=exc.ratios))
        return CheckOutcome(reports=[rep])
    rep = flag("picard", trace.converged, trace.iterations, ctx.config.k_max, **ctx.meta())
    return CheckOutcome(reports=[rep], picard=_trace_rows(ctx.problem.name, trace))


def uniqueness_gap(problem, ensemble, weights, cfg, k_max, tol, seed, scale=1.0):
    """E_p distance between the Picard limits from (0, 0) and from random (z, u)."""
    P, n = ensemble.n_paths, ensemble.n_steps
    d, k, m = problem.dim_d, problem.dim_k, problem.n_marks
    rng = np.random.default_rng(seed)
    init = (scale * rng.normal(size=(P, n, d, k)), scale * rng.normal(size=(P, n, d, m)))
    a, ta = picard_iterate(problem, ensemble, weights, cfg, None, k_max, tol)
    b, tb = picard_iterate(problem, ensemble, weights, cfg, init, k_max, tol)
    return distance(a, b, weights, ensemble, problem.p, problem.beta, metric="E_p"), ta, tb


def check_uniqueness(ctx, params):
    reports, rows = [], []
    keys = params.get("problems")
    specs = [{"key": k, "params": {}} for k in keys] if keys else [ctx.config.problem]
    factor = float(params.get("factor", 5.0))
    for spec in specs:
        prob = problem_from_dict(spec, ctx.config.p, ctx.config.beta)
        ens = prob.simulate(ctx.grid, ctx.config.n_paths, ctx.config.seed)
        weights = compute_weight_paths(prob, ens)
        gap, ta, tb = uniqueness_gap(prob, ens, weights, ctx.cfg, ctx.config.k_max, ctx.config.tol, ctx.config.seed)
        limit = factor * ctx.config.tol
        meta = {"p": prob.p, "beta": prob.beta, "n_paths": ens.n_paths, "n_steps": ens.n_steps, "problems": [prob.name]}
        reports.append(flag(f"uniqueness_{prob.name}", gap <= limit, gap, limit, **meta))
        rows += _trace_rows(f"{prob.name}|zero", ta) + _trace_rows(f"{prob.name}|random", tb)
    return CheckOutcome(reports=reports, picard=rows)


def check_localization(ctx, params):
    levels = [float(v) for v in params.get("levels", (1, 2, 4, 8))]
    p = float(params.get("p", 2.0))
    beta = float(params.get("beta", ctx.problem.beta))
    prob = ctx.problem.with_exponent(p, beta)
    weights = compute_weight_paths(prob, ctx.ensemble)
    res = verify_localization_convergence(prob, ctx.ensemble, weights, levels, p, beta, ctx.cfg, float(params.get("slack", 0.1)))
    meta = ctx.meta(p=p, beta=beta, levels=levels)
    r1 = flag("localization_distances", res["distances_monotone"], res["distances"][-1], res["distances"][0], **meta)
    r2 = flag("localization_driver_gaps", res["driver_gaps_monotone"], res["driver_gaps"][-1], res["driver_gaps"][0], **meta)
    return CheckOutcome(reports=[r1, r2], details={"distances": res["distances"], "driver_gaps": res["driver_gaps"], "levels": levels})


def truncation_violations(n_samples, levels, seed, dim=3):
    rng = np.random.default_rng(seed)
    out = {}
    for level in levels:
        # radii log-normal around the level: about half inside the ball
        direction = rng.normal(size=(n_samples, dim))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        x = direction * (level * np.exp(rng.normal(size=(n_samples, 1))))
        q = q_truncate(x, level)
        norms = np.linalg.norm(x, axis=1)
        too_big = int(np.sum(np.linalg.norm(q, axis=1) > level))
        inside = norms <= level
        moved = int(np.sum(np.any(q[inside] != x[inside], axis=1)))
        out[level] = {"exceed": too_big, "moved_inside": moved, "n_inside": int(inside.sum())}
    return out


def check_truncation(ctx, params):
    n = int(params.get("n_samples", 10_000))
    levels = [float(v) for v in params.get("levels", (1, 2, 4, 8))]
    res = truncation_violations(n, levels, ctx.config.seed)
    bad = sum(v["exceed"] + v["moved_inside"] for v in res.values())
    rep = flag("truncation_q_n", bad == 0, bad, 0, "==", n_paths=n, levels=levels)
    return CheckOutcome(reports=[rep], details={str(k): v for k, v in res.items()})


def check_cache_roundtrip(ctx, params):
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ensemble.jbsd"
        cache_ensemble(ctx.ensemble, path)
        same = ensembles_identical(ctx.ensemble, load_ensemble(path))
    return CheckOutcome(reports=[flag("cache_roundtrip", same, float(same), 1.0, "==", **ctx.meta())])


CHECKS: Dict[str, Callable[[RunContext, dict], CheckOutcome]] = {
    "apriori": check_apriori,
    "cache_roundtrip": check_cache_roundtrip,
    "contraction": check_contraction,
    "ito": check_ito,
    "lemma31": check_lemma31,
    "lemma33": check_lemma33,
    "localization": check_localization,
    "norms": check_norms,
    "oracle": check_oracle,
    "picard": check_picard,
    "remark21": check_remark21,
    "residual": check_residual,
    "residual_rate": check_residual_rate,
    "truncation": check_truncation,
    "uniqueness": check_uniqueness,
}
assert tuple(sorted(CHECKS)) == CHECK_NAMES


# --------------------------------------------------------------------------
# running


def versions() -> dict:
    return {"jumpbsde": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def run_experiment(config: ExperimentConfig) -> ReportBundle:
    start = time.perf_counter()
    ctx = RunContext(config)
    bundle = ReportBundle(
        metadata={
            "name": config.name,
            "config_hash": config.config_hash,
            "config": config.hash_payload(),
            "versions": versions(),
        }
    )
    for spec in sorted(config.checks, key=lambda c: c.id):
        t0 = time.perf_counter()
        try:
            outcome = CHECKS[spec.name](ctx, spec.params)
        except JumpBSDEError as exc:
            raise CheckExecutionError(spec.id, exc) from exc
        _merge(bundle, config.name, spec, outcome)
        bundle.timing[spec.id] = time.perf_counter() - t0
    bundle.timing["total"] = time.perf_counter() - start
    return _finalize(bundle)


def _merge(bundle: ReportBundle, run: str, spec: CheckSpec, outcome: CheckOutcome, prefix: str = ""):
    cid = prefix + spec.id
    bundle.checks += [_row(cid, r) for r in outcome.reports]
    bundle.norms += [{"run": run, **r} for r in outcome.norms]
    bundle.picard += [{"run": run, **r} for r in outcome.picard]
    if outcome.residual is not None:
        bundle.residuals[cid] = outcome.residual
    bundle.details[cid] = {**outcome.details, "reports": [r.to_dict() for r in outcome.reports]}


def _finalize(bundle: ReportBundle) -> ReportBundle:
    bundle.checks.sort(key=lambda r: (r["check"], r["name"]))
    return dataclasses.replace(
        bundle,
        metadata=_clean(bundle.metadata),
        norms=_clean(bundle.norms),
        checks=_clean(bundle.checks),
        picard=_clean(bundle.picard),
        residuals=_clean(bundle.residuals),
        details=_clean(bundle.details),
    )


def run_many(name: str, configs: List[ExperimentConfig]) -> ReportBundle:
    """Run several configs into one bundle; check ids are prefixed by run name."""
    start = time.perf_counter()
    bundle = ReportBundle(metadata={"name": name, "runs": [], "versions": versions()})
    for config in configs:
        ctx = RunContext(config)
        bundle.metadata["runs"].append({"name": config.name, "config_hash": config.config_hash, "config": config.hash_payload()})
        for spec in sorted(config.checks, key=lambda c: c.id):
            t0 = time.perf_counter()
            try:
                outcome = CHECKS[spec.name](ctx, spec.params)
            except JumpBSDEError as exc:
                raise CheckExecutionError(f"{config.name}/{spec.id}", exc) from exc
            _merge(bundle, config.name, spec, outcome, prefix=f"{config.name}/")
            bundle.timing[f"{config.name}/{spec.id}"] = time.perf_counter() - t0
    bundle.metadata["config_hash"] = hashlib.sha256(
        "".join(r["config_hash"] for r in bundle.metadata["runs"]).encode()
    ).hexdigest()
    bundle.timing["total"] = time.perf_counter() - start
    return _finalize(bundle)


# --------------------------------------------------------------------------
# suites


def _suite_configs(name: str) -> List[dict]:
    if name == "oracle":
        return [
            {"name": "brownian_terminal", "problem": "brownian_terminal", "grid": {"n_steps": 64}, "ensemble": {"n_paths": 10_000, "seed": 1234}, "checks": ["oracle", "residual", "norms"]},
            {"name": "jump_terminal", "problem": "jump_terminal", "grid": {"n_steps": 64}, "ensemble": {"n_paths": 10_000, "seed": 1234}, "checks": ["oracle", "residual"]},
            {"name": "linear_y", "problem": {"key": "linear_y", "params": {"a": 0.5, "c": 1.0}}, "grid": {"n_steps": 64}, "ensemble": {"n_paths": 10_000, "seed": 1234}, "checks": ["oracle"]},
        ]
    if name == "inequalities":
        return [
            {
                "name": "lipschitz_z",
                "problem": "lipschitz_z",
                "grid": {"n_steps": 64},
                "ensemble": {"n_paths": 4000, "seed": 2024},
                "scheme": {"degree": 2, "ridge": 1e-8},
                "checks": [
                    "lemma31",
                    "lemma33",
                    {"name": "remark21", "ps": [2.0, 3.0, 1.5]},
                    "ito",
                    "apriori",
                ],
            }
        ]
    if name == "contraction":
        return [
            {
                "name": "lipschitz_z",
                "problem": "lipschitz_z",
                "grid": {"n_steps": 32},
                "ensemble": {"n_paths": 4000, "seed": 17},
                "scheme": {"degree": 2, "ridge": 1e-8, "picard": {"k_max": 50, "tol": 1e-6}},
                "checks": [{"name": "contraction", "ps": [1.5, 2.5]}],
            },
            {
                "name": "uniqueness",
                "problem": "zero",
                "grid": {"n_steps": 32},
                "ensemble": {"n_paths": 2000, "seed": 31},
                "scheme": {"degree": 2, "ridge": 1e-8, "picard": {"k_max": 50, "tol": 1e-6}},
                "checks": [{"name": "uniqueness", "problems": sorted(BUILTIN_FOR_UNIQUENESS)}],
            },
        ]
    if name == "convergence":
        return [
            {
                "name": "local_growth",
                "problem": "local_growth",
                "grid": {"n_steps": 32},
                "ensemble": {"n_paths": 4000, "seed": 3},
                "scheme": {"degree": 2},
                "checks": ["localization", "truncation", "cache_roundtrip"],
            },
            {
                "name": "brownian_square",
                "problem": "brownian_square",
                "grid": {"n_steps": 128},
                "ensemble": {"n_paths": 10_000, "seed": 7},
                "scheme": {"degree": 2},
                "checks": ["residual_rate"],
            },
        ]
    raise InvalidSpecError(f"unknown suite {name!r}; choose from {SUITES}")


SUITES = ("oracle", "inequalities", "contraction", "convergence")
BUILTIN_FOR_UNIQUENESS = (
    "zero",
    "linear_y",
    "brownian_terminal",
    "jump_terminal",
    "monotone_cubic",
    "brownian_square",
    "lipschitz_z",
    "local_growth",
)


def suite_configs(name: str, n_paths=None, n_steps=None, seed=None) -> List[ExperimentConfig]:
    out = []
    for raw in _suite_configs(name):
        cfg = parse_config(raw)
        if any(v is not None for v in (n_paths, n_steps, seed)):
            cfg = cfg.with_overrides(n_paths=n_paths, n_steps=n_steps, seed=seed)
        out.append(cfg)
    return out


def run_suite(name: str, n_paths=None, n_steps=None, seed=None) -> ReportBundle:
    return run_many(f"suite:{name}", suite_configs(name, n_paths, n_steps, seed))


# --------------------------------------------------------------------------
# output


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: _csv_value(row.get(c, "")) for c in columns})
    return buf.getvalue()


def _csv_value(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ";".join(map(str, v))
    return v


def bundle_json(bundle: ReportBundle, include_timing: bool = True) -> str:
    payload = bundle.to_dict() if include_timing else bundle.body()
    return json.dumps(payload, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_outputs(bundle: ReportBundle, directory, formats=("json", "csv")) -> dict:
    """Write the bundle; return a manifest {file name: sha256}.

    The JSON body and the CSVs carry no timing; timing goes to timing.json,
    which is listed in the manifest without a hash."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {directory}: {exc.strerror}") from exc
    files = {}
    if "json" in formats:
        files["report.json"] = bundle_json(bundle, include_timing=False)
        files["timing.json"] = json.dumps(_clean(bundle.timing), sort_keys=True, indent=2) + "\n"
    if "csv" in formats:
        files["norms.csv"] = _csv_text(NORM_COLUMNS, bundle.norms)
        files["checks.csv"] = _csv_text(CHECK_COLUMNS, bundle.checks)
        files["picard.csv"] = _csv_text(PICARD_COLUMNS, bundle.picard)
    manifest = {"directory": str(directory), "files": {}}
    for name, text in sorted(files.items()):
        path = directory / name
        try:
            path.write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc.strerror}") from exc
        digest = None if name == "timing.json" else hashlib.sha256(text.encode()).hexdigest()
        manifest["files"][name] = {"path": str(path), "sha256": digest}
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest
