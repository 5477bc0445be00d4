"""Backward scheme, Picard map, localization/truncation and residuals.

One backward step on [t_i, t_{i+1}] with regression operator E_i:

    ŷ   = E_i[Y_{i+1}]
    Z_i = E_i[(Y_{i+1} − ŷ) ΔW_i^T] / Δt_i
    U_i = E_i[(Y_{i+1} − ŷ) ΔÑ_i[j]] / (q_j λ Δt_i)
    Y_i = E_i[Y_{i+1} − Z_i ΔW_i − Σ_j U_i(e_j) ΔÑ_i[j]] + f(t_i, X_i, Y_i, Z_i, U_i) Δt_i

Subtracting ŷ and the martingale increments does not change the conditional
expectations (they are F_i-measurable / conditionally centred) but removes
most of the regression noise.  The last line is solved for Y_i by damped
fixed-point iteration.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .driver import PathEnsemble, TimeGrid
from .errors import (
    DimensionMismatchError,
    ImplicitStepError,
    InvalidSpecError,
    NonContractionError,
    SingularRegressionError,
)
from .norms import distance
from .problem import PathTable, ProblemSpec, WeightPaths, evaluate_generator, evaluate_terminal


@dataclass(frozen=True)
class RegressionConfig:
    degree: int = 1
    ridge: float = 0.0
    implicit_max_iter: int = 100
    implicit_tol: float = 1e-12
    damping: float = 0.5

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 0:
            raise InvalidSpecError(f"basis degree must be a nonnegative integer, got {self.degree!r}")
        if self.ridge < 0:
            raise InvalidSpecError("ridge must be nonnegative")
        if not 0 < self.damping <= 1:
            raise InvalidSpecError("damping must lie in (0, 1]")


@dataclass(frozen=True)
class DiscreteSolution:
    """Y: (P, n+1, d), Z: (P, n, d, k), U: (P, n, d, m)."""

    Y: np.ndarray
    Z: np.ndarray
    U: np.ndarray
    grid: TimeGrid
    provenance: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.Y.shape[0]


@dataclass
class PicardTrace:
    distances: List[float] = field(default_factory=list)
    converged: bool = False
    tol: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.distances)

    @property
    def ratios(self) -> List[float]:
        d = self.distances
        return [d[i + 1] / d[i] if d[i] > 0 else 0.0 for i in range(len(d) - 1)]

    def to_dict(self) -> dict:
        return {
            "distances": list(map(float, self.distances)),
            "converged": self.converged,
            "iterations": self.iterations,
            "tol": self.tol,
        }


# --------------------------------------------------------------------------
# regression


def _monomials(dim: int, degree: int):
    for deg in range(1, degree + 1):
        yield from itertools.combinations_with_replacement(range(dim), deg)


def design_matrix(states: np.ndarray, degree: int) -> np.ndarray:
    """Polynomial basis of total degree <= ``degree`` in standardized states.

    Coordinates that are constant across paths carry no information and are
    dropped (the factor is deterministic at t = 0).
    """
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    if not np.all(np.isfinite(states)):
        raise DimensionMismatchError("regression states must be finite")
    mean = states.mean(axis=0)
    std = states.std(axis=0)
    keep = std > 1e-12 * (1.0 + np.abs(mean))
    s = (states[:, keep] - mean[keep]) / std[keep]
    cols = [np.ones(states.shape[0])]
    for combo in _monomials(s.shape[1], degree):
        cols.append(np.prod(s[:, combo], axis=1))
    return np.column_stack(cols)


class Projector:
    """Least-squares projection onto the basis evaluated at fixed states."""

    def __init__(self, states: np.ndarray, cfg: RegressionConfig):
        phi = design_matrix(states, cfg.degree)
        P, nb = phi.shape
        if P < nb:
            raise SingularRegressionError(f"{P} paths cannot fit {nb} basis functions; add paths or set ridge > 0")
        self.ridge = cfg.ridge
        if cfg.ridge == 0:
            q, r = np.linalg.qr(phi)
            diag = np.abs(np.diag(r))
            if diag.min() <= 1e-10 * diag.max():
                raise SingularRegressionError(
                    f"rank-deficient design ({nb} basis functions); set a positive ridge parameter"
                )
            self._q = q
        else:
            gram = phi.T @ phi / P
            pen = cfg.ridge * np.eye(nb)
            pen[0, 0] = 0.0
            self._phi = phi
            self._solve = np.linalg.cholesky(gram + pen)

    def fit(self, targets: np.ndarray) -> np.ndarray:
        t = np.asarray(targets, dtype=float)
        flat = t.reshape(t.shape[0], -1)
        if self.ridge == 0:
            fitted = self._q @ (self._q.T @ flat)
        else:
            rhs = self._phi.T @ flat / flat.shape[0]
            L = self._solve
            coef = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
            fitted = self._phi @ coef
        return fitted.reshape(t.shape)


def regress_conditional_expectation(targets, states, cfg: RegressionConfig = RegressionConfig()):
    return Projector(states, cfg).fit(targets)


# --------------------------------------------------------------------------
# backward scheme


def _implicit_solve(problem, t, x, base, z, u, dt, cfg, step):
    y = base.copy()
    theta = cfg.damping
    for _ in range(cfg.implicit_max_iter):
        target = base + evaluate_generator(problem, t, x, y, z, u) * dt
        y_new = (1.0 - theta) * y + theta * target
        gap = np.abs(y_new - y)
        y = y_new
        if np.all(gap <= cfg.implicit_tol * (1.0 + np.abs(y))):
            return y
    f1 = evaluate_generator(problem, t, x, y, z, u)
    f0 = evaluate_generator(problem, t, x, base, z, u)
    with np.errstate(divide="ignore", invalid="ignore"):
        lip = np.nanmax(np.linalg.norm(f1 - f0, axis=1) / np.linalg.norm(y - base, axis=1))
    raise ImplicitStepError(
        f"implicit y-step did not converge at step {step} after {cfg.implicit_max_iter} iterations; "
        f"max gap {gap.max():.3g}, Lipschitz surrogate * dt = {lip * dt:.3g}",
        step=step,
        residual=float(gap.max()),
    )


def _coupling_inputs(coupling, P, n, d, k, m):
    if coupling is None or coupling == "explicit_zu":
        return None
    if isinstance(coupling, tuple) and coupling[0] == "frozen_zu":
        _, z_in, u_in = coupling
        z_in = np.zeros((P, n, d, k)) if z_in is None else np.asarray(z_in, dtype=float)
        u_in = np.zeros((P, n, d, m)) if u_in is None else np.asarray(u_in, dtype=float)
        if z_in.shape != (P, n, d, k) or u_in.shape != (P, n, d, m):
            raise DimensionMismatchError("frozen (z, u) inputs do not match the ensemble")
        return z_in, u_in
    raise InvalidSpecError(f"unknown coupling {coupling!r}")


def frozen(z_in, u_in):
    return ("frozen_zu", z_in, u_in)


def solve_backward(
    problem: ProblemSpec,
    ensemble: PathEnsemble,
    weights: Optional[WeightPaths] = None,
    cfg: RegressionConfig = RegressionConfig(),
    coupling="explicit_zu",
) -> DiscreteSolution:
    grid = ensemble.grid
    P, n = ensemble.n_paths, grid.n_steps
    d, k, m = problem.dim_d, problem.dim_k, problem.n_marks
    if ensemble.dim_k != k or ensemble.n_marks != m:
        raise DimensionMismatchError(
            f"ensemble has k={ensemble.dim_k}, m={ensemble.n_marks}; problem needs k={k}, m={m}"
        )
    fixed = _coupling_inputs(coupling, P, n, d, k, m)
    Y = np.empty((P, n + 1, d))
    Z = np.zeros((P, n, d, k))
    U = np.zeros((P, n, d, m))
    Y[:, n] = evaluate_terminal(problem, ensemble)
    dW = ensemble.brownian_increments
    dNt = ensemble.compensated_increments
    for i in range(n - 1, -1, -1):
        t, dt = grid.times[i], grid.steps[i]
        x = ensemble.factor_states[:, i]
        proj = Projector(x, cfg)
        y_next = Y[:, i + 1]
        dy = y_next - proj.fit(y_next)
        Z[:, i] = proj.fit(dy[:, :, None] * dW[:, i, None, :]) / dt
        if m:
            raw = proj.fit(dy[:, :, None] * dNt[:, i, None, :])
            scale = ensemble.rates[:, i] * dt
            with np.errstate(divide="ignore", invalid="ignore"):
                U[:, i] = np.where(scale[:, None, :] > 0, raw / scale[:, None, :], 0.0)
        mart = np.einsum("pdk,pk->pd", Z[:, i], dW[:, i]) + np.einsum("pdm,pm->pd", U[:, i], dNt[:, i])
        base = proj.fit(y_next - mart)
        if fixed is None:
            z_use, u_use = Z[:, i], U[:, i]
        else:
            z_use, u_use = fixed[0][:, i], fixed[1][:, i]
        Y[:, i] = _implicit_solve(problem, t, x, base, z_use, u_use, dt, cfg, i)
    provenance = {
        "problem": problem.name,
        "degree": cfg.degree,
        "ridge": cfg.ridge,
        "coupling": "explicit_zu" if fixed is None else "frozen_zu",
        "n_paths": P,
        "n_steps": n,
        "seed": ensemble.seed,
    }
    return DiscreteSolution(Y, Z, U, grid, provenance)


def generator_path(problem: ProblemSpec, solution: DiscreteSolution, ensemble: PathEnsemble, z=None, u=None) -> np.ndarray:
    """f(t_i, X_i, Y_i, Z_i, U_i) for i < n, shape (P, n, d)."""
    n = ensemble.n_steps
    z = solution.Z if z is None else z
    u = solution.U if u is None else u
    out = np.empty((solution.n_paths, n, problem.dim_d))
    for i in range(n):
        out[:, i] = evaluate_generator(
            problem, ensemble.grid.times[i], ensemble.factor_states[:, i], solution.Y[:, i], z[:, i], u[:, i]
        )
    return out


# --------------------------------------------------------------------------
# Picard map


def beta_threshold(p: float, rho: float = 1.0) -> float:
    """β ≥ 1 + 2(p − 1) ρ^{1/(p−1)}; the library fixes ρ = 1 unless told otherwise."""
    return 1.0 + 2.0 * (p - 1.0) * rho ** (1.0 / (p - 1.0))


def picard_iterate(
    problem: ProblemSpec,
    ensemble: PathEnsemble,
    weights: WeightPaths,
    cfg: RegressionConfig = RegressionConfig(),
    init: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    k_max: int = 50,
    tol: float = 1e-6,
    raise_on_failure: bool = True,
) -> Tuple[DiscreteSolution, PicardTrace]:
    """Iterate Φ(z, u) = solution with (z, u) frozen in the generator.

    Distances are measured in the Picard metric (S^{p,A} + H + L_N + L_Q
    p-th powers, then the p-th root); the first entry compares the first
    iterate with the initial triple (0, z⁰, u⁰).
    """
    if tol <= 0:
        raise InvalidSpecError("tol must be positive")
    P, n = ensemble.n_paths, ensemble.n_steps
    d, k, m = problem.dim_d, problem.dim_k, problem.n_marks
    if init is None:
        z, u = np.zeros((P, n, d, k)), np.zeros((P, n, d, m))
    else:
        z, u = init
    prev = DiscreteSolution(np.zeros((P, n + 1, d)), z, u, ensemble.grid)
    trace = PicardTrace(tol=tol)
    sol = prev
    for _ in range(k_max):
        sol = solve_backward(problem, ensemble, weights, cfg, frozen(z, u))
        dist = distance(sol, prev, weights, ensemble, problem.p, problem.beta, metric="picard")
        trace.distances.append(dist)
        prev = sol
        z, u = sol.Z, sol.U
        if dist < tol:
            trace.converged = True
            break
    sol = dataclasses.replace(sol, provenance={**sol.provenance, "picard_iterations": trace.iterations})
    if not trace.converged and raise_on_failure:
        raise NonContractionError(
            f"Picard iteration for {problem.name!r} did not reach tol={tol} in {k_max} iterations; "
            f"ratios {[round(r, 4) for r in trace.ratios]}",
            ratios=trace.ratios,
        )
    return sol, trace


# --------------------------------------------------------------------------
# localization and truncation


def stopping_index(weights: WeightPaths, level: float) -> np.ndarray:
    """First grid index with a >= level, or n when never reached."""
    hit = weights.a >= level
    n = weights.A.shape[1] - 1
    return np.where(hit.any(axis=1), hit.argmax(axis=1), n)


def localize_generator(problem: ProblemSpec, weights: WeightPaths, level: float) -> ProblemSpec:
    """Switch the generator off from the first node where a >= level.

    The indicator is taken as t_i < τ (so the step starting at τ is already
    off); when τ = T it is never triggered and the generator is unchanged.
    The coefficient callbacks, hence a and A, are left as they are.
    """
    if level < 1:
        raise InvalidSpecError("localization level must be >= 1")
    grid = weights.grid
    tau = stopping_index(weights, level)
    n = grid.n_steps
    idx = np.arange(n + 1)[None, :]
    active = (idx < tau[:, None]) | (tau[:, None] == n)
    table = PathTable(grid, active.astype(float))
    base = problem.generator

    def generator(t, x, y, z, u):
        on = table(t, y.shape[0])[:, None]
        return on * base(t, x, y, z, u)

    return dataclasses.replace(
        problem,
        name=f"{problem.name}|loc({level:g})",
        generator=generator,
        params={**problem.params, "localization_level": level},
    )


def q_truncate(x, level: float):
    """q_n(x) = x n / (|x| v n); the norm is taken over the last axis."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return np.clip(x, -level, level)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    # shrink by a few ulps so the bound survives any summation order of the norm
    margin = 1.0 - 4.0 * max(x.shape[-1], 1) * np.finfo(float).eps
    scale = np.where(norm > level, margin * level / np.where(norm > level, norm, 1.0), 1.0)
    q = x * scale
    # rounding can still leave |q| above the level; pull it back inside
    for _ in range(8):
        over = np.linalg.norm(q, axis=-1, keepdims=True) > level
        if not over.any():
            break
        scale = np.where(over, np.nextafter(scale, 0.0), scale)
        q = x * scale
    return q


def truncate_data(problem: ProblemSpec, level: float) -> ProblemSpec:
    """ξ → q_n(ξ) and f(y) → f(y) − f(0) + q_n(f(0)) at the same (t, x, z, u)."""
    if level < 1:
        raise InvalidSpecError("truncation level must be >= 1")
    base_f, base_xi = problem.generator, problem.terminal

    def generator(t, x, y, z, u):
        f0 = base_f(t, x, np.zeros_like(y), z, u)
        return base_f(t, x, y, z, u) - f0 + q_truncate(f0, level)

    def terminal(x_T, counts_T):
        return q_truncate(np.asarray(base_xi(x_T, counts_T), dtype=float), level)

    return dataclasses.replace(
        problem,
        name=f"{problem.name}|trunc({level:g})",
        generator=generator,
        terminal=terminal,
        params={**problem.params, "truncation_level": level},
    )


# --------------------------------------------------------------------------
# residual


@dataclass(frozen=True)
class ResidualStats:
    node_l2: np.ndarray
    pathwise: np.ndarray

    @property
    def max_l2(self) -> float:
        return float(self.node_l2.max())

    @property
    def argmax(self) -> int:
        return int(self.node_l2.argmax())

    def flagged(self, threshold: float) -> np.ndarray:
        return np.flatnonzero(self.node_l2 > threshold)


def bsde_residual(problem: ProblemSpec, solution: DiscreteSolution, ensemble: PathEnsemble, weights=None) -> ResidualStats:
    """R_i = Y_i − [ξ + Σ_{j≥i} f_j Δt_j − Σ_{j≥i} Z_j ΔW_j − Σ_{j≥i} U_j ΔÑ_j] per path."""
    f = generator_path(problem, solution, ensemble)
    dt = ensemble.grid.steps[None, :, None]
    incr = (
        f * dt
        - np.einsum("pidk,pik->pid", solution.Z, ensemble.brownian_increments)
        - np.einsum("pidm,pim->pid", solution.U, ensemble.compensated_increments)
    )
    tail = np.zeros_like(solution.Y)
    tail[:, :-1] = np.cumsum(incr[:, ::-1], axis=1)[:, ::-1]
    xi = evaluate_terminal(problem, ensemble)
    R = solution.Y - (xi[:, None, :] + tail)
    l2 = np.sqrt(np.mean(np.sum(R**2, axis=2), axis=0))
    return ResidualStats(node_l2=l2, pathwise=R)
