"""Monte Carlo estimators of the weighted solution norms.

For a process on the grid the pathwise functionals (p-th powers) are

    S_p   max_i  e^{(p/2 ^ 1) β A_i} |Y_i|^p
    S_pA  Σ_i    e^{(p/2 ^ 1) β A_i} |Y_i|^p ζ_i² Δt_i
    H_p   (Σ_i   e^{β A_i} ‖Z_i‖² Δt_i)^{p/2}
    L_pQ  (Σ_i   e^{β A_i} Σ_j |U_i(e_j)|² q_j λ Δt_i)^{p/2}
    L_pN  (Σ_i   e^{β A_i} Σ_j |U_i(e_j)|² ΔN_i[j])^{p/2}

and a norm estimate is (sample mean)^{1/p}.  Composite norms add the p-th
powers: B_p = S_p + S_pA, frakL_p = L_pQ + L_pN, E_p = B_p + H_p + frakL_p.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from .driver import PathEnsemble
from .errors import InvalidComponentError, InvalidExponentError, NumericalBlowupError
from .problem import WeightPaths

BASE_KINDS = ("S_p", "S_pA", "H_p", "L_pQ", "L_pN")
COMPOSITES = {
    "B_p": ("S_p", "S_pA"),
    "frakL_p": ("L_pQ", "L_pN"),
    "E_p": ("S_p", "S_pA", "H_p", "L_pQ", "L_pN"),
    # metric of the Picard map
    "picard": ("S_pA", "H_p", "L_pN", "L_pQ"),
}
KIND_COMPONENT = {
    "S_p": "Y",
    "S_pA": "Y",
    "B_p": "Y",
    "H_p": "Z",
    "L_pQ": "U",
    "L_pN": "U",
    "frakL_p": "U",
    "E_p": "all",
    "picard": "all",
}


@dataclass(frozen=True)
class NormEstimate:
    kind: str
    component: str
    p: float
    beta: float
    value: float
    std_error: float
    n_paths: int
    mean: float = 0.0
    mean_std_error: float = 0.0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "component": self.component,
            "p": self.p,
            "beta": self.beta,
            "value": self.value,
            "std_error": self.std_error,
            "n_paths": self.n_paths,
        }


@dataclass(frozen=True)
class EstimateReport:
    """One inequality ``lhs (<= | ==) constant * rhs`` estimated by Monte Carlo."""

    name: str
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    constant: float = 1.0
    relation: str = "<="
    slack_sigmas: float = 3.0
    passed: bool = False
    measured_ratio: float = float("nan")
    details: Dict = field(default_factory=dict)

    @classmethod
    def build(cls, name, lhs, lhs_se, rhs, rhs_se, constant=1.0, relation="<=", slack_sigmas=3.0, details=None):
        slack = slack_sigmas * float(np.hypot(lhs_se, constant * rhs_se))
        if relation == "==":
            passed = abs(lhs - constant * rhs) <= slack
        elif relation == "<=":
            passed = lhs <= constant * rhs + slack
        else:
            raise ValueError(f"unknown relation {relation!r}")
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = float(np.divide(lhs, rhs)) if rhs != 0 else (float("nan") if lhs == 0 else float("inf"))
        return cls(
            name=name,
            lhs=float(lhs),
            lhs_se=float(lhs_se),
            rhs=float(rhs),
            rhs_se=float(rhs_se),
            constant=float(constant),
            relation=relation,
            slack_sigmas=float(slack_sigmas),
            passed=bool(passed),
            measured_ratio=ratio,
            details=dict(details or {}),
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _check_p(p):
    if not np.isfinite(p) or p <= 1:
        raise InvalidExponentError(f"p must exceed 1, got {p!r}")


def _finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericalBlowupError(f"non-finite entries in component {name}")


def y_weight(A: np.ndarray, p: float, beta: float) -> np.ndarray:
    return np.exp(min(p / 2.0, 1.0) * beta * A)


def pathwise(kind: str, solution, weights: WeightPaths, ensemble: PathEnsemble, p: float, beta: float) -> np.ndarray:
    """p-th power pathwise functional of ``kind``, shape (n_paths,)."""
    _check_p(p)
    A = weights.A
    dt = ensemble.grid.steps[None, :]
    if kind in ("S_p", "S_pA"):
        Y = solution.Y
        _finite("Y", Y)
        vals = y_weight(A, p, beta) * np.linalg.norm(Y, axis=2) ** p
        if kind == "S_p":
            return vals.max(axis=1)
        return (vals[:, :-1] * weights.zeta2[:, :-1] * dt).sum(axis=1)
    w = np.exp(beta * A[:, :-1])
    if kind == "H_p":
        Z = solution.Z
        _finite("Z", Z)
        inner = (w * np.sum(Z**2, axis=(2, 3)) * dt).sum(axis=1)
    elif kind in ("L_pQ", "L_pN"):
        U = solution.U
        _finite("U", U)
        sq = np.sum(U**2, axis=2)  # (P, n, m)
        if kind == "L_pQ":
            inner = (w * np.sum(sq * ensemble.rates, axis=2) * dt).sum(axis=1)
        else:
            inner = (w * np.sum(sq * ensemble.jump_counts, axis=2)).sum(axis=1)
    else:
        raise InvalidComponentError(f"unknown norm kind {kind!r}")
    return inner ** (p / 2.0)


def _estimate(kind, component, values, p, beta):
    P = values.size
    mean = float(values.mean())
    se = float(values.std(ddof=1) / np.sqrt(P)) if P > 1 else 0.0
    value = mean ** (1.0 / p)
    value_se = value / (p * mean) * se if mean > 0 else 0.0
    return NormEstimate(kind, component, float(p), float(beta), value, value_se, int(P), mean, se)


def weighted_norm(component: str, kind: str, solution, weights: WeightPaths, ensemble: PathEnsemble, p: float, beta: float) -> NormEstimate:
    _check_p(p)
    expected = KIND_COMPONENT.get(kind)
    if expected is None:
        raise InvalidComponentError(f"unknown norm kind {kind!r}")
    if expected != component:
        raise InvalidComponentError(f"norm {kind} applies to component {expected}, not {component}")
    parts = COMPOSITES.get(kind, (kind,))
    values = sum(pathwise(part, solution, weights, ensemble, p, beta) for part in parts)
    return _estimate(kind, component, values, p, beta)


def all_norms(solution, weights, ensemble, p, beta):
    out = {}
    for kind, comp in KIND_COMPONENT.items():
        if kind == "picard":
            continue
        out[kind] = weighted_norm(comp, kind, solution, weights, ensemble, p, beta)
    return out


@dataclass(frozen=True)
class _Triple:
    Y: np.ndarray
    Z: np.ndarray
    U: np.ndarray


def difference(a, b) -> _Triple:
    return _Triple(a.Y - b.Y, a.Z - b.Z, a.U - b.U)


def distance(a, b, weights, ensemble, p, beta, metric: str = "E_p") -> float:
    """Norm of ``a - b`` in the E_p norm or the Picard metric."""
    diff = difference(a, b)
    return weighted_norm("all", metric, diff, weights, ensemble, p, beta).value


def remark21_sides(U, weights, ensemble, p, beta):
    sol = _Triple(None, None, U)
    q_side = pathwise("L_pQ", sol, weights, ensemble, p, beta)
    n_side = pathwise("L_pN", sol, weights, ensemble, p, beta)
    return q_side, n_side


def check_remark21(U, weights: WeightPaths, ensemble: PathEnsemble, p: float, beta: float, slack_sigmas: float = 3.0) -> EstimateReport:
    """Compare the compensator-side and counting-side jump functionals.

    p = 2: equal in expectation.  p > 2: Q-side <= (p/2)^{p/2} N-side.
    p in (1, 2): N-side <= 2 Q-side.
    """
    _check_p(p)
    q_side, n_side = remark21_sides(U, weights, ensemble, p, beta)
    P = q_side.size

    def stats(v):
        return float(v.mean()), float(v.std(ddof=1) / np.sqrt(P)) if P > 1 else 0.0

    q, q_se = stats(q_side)
    n, n_se = stats(n_side)
    details = {"p": p, "beta": beta, "n_paths": P}
    if p == 2:
        return EstimateReport.build("remark21_p2", q, q_se, n, n_se, 1.0, "==", slack_sigmas, details)
    if p > 2:
        return EstimateReport.build(
            f"remark21_p{p:g}", q, q_se, n, n_se, (p / 2.0) ** (p / 2.0), "<=", slack_sigmas, details
        )
    return EstimateReport.build(f"remark21_p{p:g}", n, n_se, q, q_se, 2.0, "<=", slack_sigmas, details)
