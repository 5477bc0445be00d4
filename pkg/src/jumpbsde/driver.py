"""Path ensembles for the driving noises.

Brownian increments, Poisson jump counts over a finite mark list and an Euler
factor process used as the regression state.  Every path owns its own random
stream (``SeedSequence(seed, spawn_key=(stream, path))``) so an ensemble of
``n`` paths is a prefix of any larger ensemble with the same seed, and the
result never depends on the order in which paths are produced.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import poisson

from .errors import (
    DimensionMismatchError,
    InvalidGridError,
    InvalidSpecError,
    ModelViolationError,
    NumericalBlowupError,
)

_BROWNIAN_STREAM = 0
_JUMP_STREAM = 1


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise InvalidGridError("a grid needs at least two time points")
        if times[0] != 0.0:
            raise InvalidGridError("grid must start at t_0 = 0")
        if not np.all(np.diff(times) > 0):
            raise InvalidGridError("grid times must be strictly increasing")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)

    def index_of(self, t: float) -> int:
        """Grid index of the node equal to ``t`` (up to round-off)."""
        i = int(np.searchsorted(self.times, t - 1e-12 * max(self.T, 1.0)))
        if i > self.n_steps or abs(self.times[i] - t) > 1e-9 * max(self.T, 1.0):
            raise InvalidGridError(f"t={t!r} is not a grid node")
        return i


def make_time_grid(T: float, n_steps: int) -> TimeGrid:
    """Uniform grid on [0, T] with ``n_steps`` intervals."""
    if not np.isfinite(T) or T <= 0:
        raise InvalidGridError(f"horizon must be positive, got T={T!r}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise InvalidGridError(f"n_steps must be a positive integer, got {n_steps!r}")
    times = np.linspace(0.0, float(T), int(n_steps) + 1)
    times[-1] = float(T)
    return TimeGrid(times)


@dataclass(frozen=True)
class JumpMeasureSpec:
    """Finite mark space with compensator ``q_j(t, x) * intensity(t, x) dt``.

    ``kernel_masses`` and ``jump_intensity`` may be constants or callables
    ``(t, x) -> (P,)`` (``kernel_masses`` callables return ``(P, m)``).
    """

    marks: np.ndarray
    kernel_masses: object = 1.0
    jump_intensity: object = 0.0

    def __post_init__(self):
        marks = np.asarray(self.marks, dtype=float)
        if marks.size == 0:
            marks = marks.reshape(0, 1)
        if marks.ndim == 1:
            marks = marks[:, None]
        if marks.ndim != 2:
            raise InvalidSpecError("marks must be a list of vectors")
        if marks.shape[0] and np.any(np.all(marks == 0.0, axis=1)):
            raise InvalidSpecError("marks must be nonzero vectors")
        marks.setflags(write=False)
        object.__setattr__(self, "marks", marks)
        if not callable(self.kernel_masses):
            q = np.broadcast_to(np.asarray(self.kernel_masses, dtype=float), (marks.shape[0],)).copy()
            if np.any(q < 0):
                raise InvalidSpecError("kernel masses must be nonnegative")
            q.setflags(write=False)
            object.__setattr__(self, "kernel_masses", q)
        if not callable(self.jump_intensity):
            lam = float(self.jump_intensity)
            if lam < 0 or not np.isfinite(lam):
                raise InvalidSpecError("jump intensity must be finite and nonnegative")
            object.__setattr__(self, "jump_intensity", lam)

    @property
    def n_marks(self) -> int:
        return self.marks.shape[0]

    @property
    def is_state_dependent(self) -> bool:
        return callable(self.kernel_masses) or callable(self.jump_intensity)

    def rates(self, t: float, x: np.ndarray) -> np.ndarray:
        """Compensator rates q_j(t, x) * intensity(t, x), shape (P, m)."""
        x = np.atleast_2d(x)
        P = x.shape[0]
        if callable(self.kernel_masses):
            q = np.asarray(self.kernel_masses(t, x), dtype=float).reshape(P, self.n_marks)
        else:
            q = np.broadcast_to(self.kernel_masses, (P, self.n_marks))
        if callable(self.jump_intensity):
            lam = np.asarray(self.jump_intensity(t, x), dtype=float).reshape(P, 1)
        else:
            lam = np.full((P, 1), self.jump_intensity)
        out = q * lam
        if not np.all(np.isfinite(out)):
            raise ModelViolationError(f"non-finite compensator rate at t={t}")
        if np.any(out < 0):
            raise ModelViolationError(f"negative compensator rate at t={t}")
        return out


def no_jumps() -> JumpMeasureSpec:
    return JumpMeasureSpec(marks=np.zeros((0, 1)), kernel_masses=np.zeros(0), jump_intensity=0.0)


@dataclass(frozen=True)
class FactorSDE:
    """Coefficients of the Euler factor recursion.

    drift(t, x) -> (P, d_X); diffusion(t, x) -> (P, d_X, k);
    jump(t, x, mark_index) -> (P, d_X).  ``None`` means zero.
    """

    x0: np.ndarray
    drift: Optional[Callable] = None
    diffusion: Optional[Callable] = None
    jump: Optional[Callable] = None

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)

    @property
    def dim(self) -> int:
        return self.x0.size


def brownian_factor(dim_k: int) -> FactorSDE:
    """X = W."""
    eye = np.eye(dim_k)
    return FactorSDE(x0=np.zeros(dim_k), diffusion=lambda t, x: np.broadcast_to(eye, (x.shape[0], dim_k, dim_k)))


def noise_factor(dim_k: int, spec: JumpMeasureSpec) -> FactorSDE:
    """X = (W, compensated counts per mark)."""
    m = spec.n_marks
    dim = dim_k + m
    sigma = np.zeros((dim, dim_k))
    sigma[:dim_k, :dim_k] = np.eye(dim_k)

    def drift(t, x):
        out = np.zeros((x.shape[0], dim))
        if m:
            out[:, dim_k:] = -spec.rates(t, x)
        return out

    def jump(t, x, j):
        out = np.zeros((x.shape[0], dim))
        out[:, dim_k + j] = 1.0
        return out

    return FactorSDE(
        x0=np.zeros(dim),
        drift=drift,
        diffusion=lambda t, x: np.broadcast_to(sigma, (x.shape[0], dim, dim_k)),
        jump=jump,
    )


def _path_generator(seed: int, stream: int, path: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(stream, path))
    return np.random.Generator(np.random.PCG64(ss))


def _check_counts(n_paths, name="n_paths"):
    if int(n_paths) != n_paths or n_paths < 1:
        raise InvalidSpecError(f"{name} must be a positive integer, got {n_paths!r}")
    return int(n_paths)


def simulate_brownian(grid: TimeGrid, n_paths: int, dim_k: int, seed: int) -> np.ndarray:
    """Brownian increments, shape (n_paths, n_steps, dim_k)."""
    n_paths = _check_counts(n_paths)
    dim_k = _check_counts(dim_k, "dim_k")
    n = grid.n_steps
    out = np.empty((n_paths, n, dim_k))
    for path in range(n_paths):
        out[path] = _path_generator(seed, _BROWNIAN_STREAM, path).standard_normal((n, dim_k))
    out *= np.sqrt(grid.steps)[None, :, None]
    return out


def _jump_uniforms(grid: TimeGrid, n_paths: int, n_marks: int, seed: int) -> np.ndarray:
    n = grid.n_steps
    out = np.empty((n_paths, n, n_marks))
    if n_marks == 0:
        return out
    for path in range(n_paths):
        out[path] = _path_generator(seed, _JUMP_STREAM, path).random((n, n_marks))
    return out


def _poisson_from_uniforms(u: np.ndarray, mean: np.ndarray) -> np.ndarray:
    counts = np.zeros(mean.shape, dtype=np.uint32)
    live = mean > 0
    if np.any(live):
        counts[live] = np.maximum(poisson.ppf(u[live], mean[live]), 0).astype(np.uint32)
    return counts


def simulate_jumps(
    grid: TimeGrid,
    spec: JumpMeasureSpec,
    factor_states: Optional[np.ndarray],
    n_paths: int,
    seed: int,
) -> np.ndarray:
    """Poisson counts per (path, step, mark) with means frozen at the left endpoint.

    Counts are produced by inverting the Poisson CDF on per-path uniforms, so for
    a given seed the count at a step only depends on that step's mean.
    """
    n_paths = _check_counts(n_paths)
    m = spec.n_marks
    n = grid.n_steps
    if spec.is_state_dependent:
        if factor_states is None:
            raise DimensionMismatchError("state-dependent compensator needs factor states")
        if factor_states.shape[:2] != (n_paths, n + 1):
            raise DimensionMismatchError(
                f"factor states of shape {factor_states.shape} do not match ({n_paths}, {n + 1}, .)"
            )
    uniforms = _jump_uniforms(grid, n_paths, m, seed)
    counts = np.zeros((n_paths, n, m), dtype=np.uint32)
    dummy = np.zeros((n_paths, 1))
    for i in range(n):
        x = factor_states[:, i] if factor_states is not None else dummy
        mean = spec.rates(grid.times[i], x) * grid.steps[i]
        counts[:, i] = _poisson_from_uniforms(uniforms[:, i], mean)
    return counts


def _factor_step(config, t, x, dt, dw, dn):
    x_new = x.copy()
    if config.drift is not None:
        x_new += np.asarray(config.drift(t, x)) * dt
    if config.diffusion is not None:
        x_new += np.einsum("pak,pk->pa", np.asarray(config.diffusion(t, x)), dw)
    if config.jump is not None:
        for j in range(dn.shape[1]):
            hit = dn[:, j] > 0
            if np.any(hit):
                x_new[hit] += np.asarray(config.jump(t, x, j))[hit] * dn[hit, j, None]
    return x_new


def _check_finite(x, step):
    bad = ~np.all(np.isfinite(x), axis=1)
    if np.any(bad):
        path = int(np.flatnonzero(bad)[0])
        raise NumericalBlowupError(f"factor state not finite at path {path}, step {step}", path=path, step=step)


def simulate_factor(grid: TimeGrid, config: FactorSDE, brownian: np.ndarray, jumps: np.ndarray) -> np.ndarray:
    """Euler recursion for the factor, shape (n_paths, n_steps + 1, d_X)."""
    n_paths, n, _ = brownian.shape
    if n != grid.n_steps or jumps.shape[:2] != (n_paths, n):
        raise DimensionMismatchError("noise blocks do not match the grid")
    X = np.empty((n_paths, n + 1, config.dim))
    X[:, 0] = config.x0
    dn = jumps.astype(float)
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n):
            X[:, i + 1] = _factor_step(config, grid.times[i], X[:, i], grid.steps[i], brownian[:, i], dn[:, i])
            _check_finite(X[:, i + 1], i + 1)
    return X


@dataclass(frozen=True)
class PathEnsemble:
    grid: TimeGrid
    brownian_increments: np.ndarray
    jump_counts: np.ndarray
    factor_states: np.ndarray
    rates: np.ndarray
    seed: int
    marks: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))

    def __post_init__(self):
        P, n, _ = self.brownian_increments.shape
        if n != self.grid.n_steps:
            raise DimensionMismatchError("brownian block does not match grid")
        if self.jump_counts.shape[:2] != (P, n) or self.rates.shape != self.jump_counts.shape:
            raise DimensionMismatchError("jump block does not match brownian block")
        if self.factor_states.shape[:2] != (P, n + 1):
            raise DimensionMismatchError("factor block does not match brownian block")
        for name in ("brownian_increments", "jump_counts", "factor_states", "rates"):
            getattr(self, name).setflags(write=False)

    @property
    def n_paths(self) -> int:
        return self.brownian_increments.shape[0]

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    @property
    def dim_k(self) -> int:
        return self.brownian_increments.shape[2]

    @property
    def n_marks(self) -> int:
        return self.jump_counts.shape[2]

    @property
    def dim_x(self) -> int:
        return self.factor_states.shape[2]

    @property
    def compensated_increments(self) -> np.ndarray:
        """ΔÑ = ΔN − rate·Δt, shape (P, n, m)."""
        return self.jump_counts - self.rates * self.grid.steps[None, :, None]

    def terminal_counts(self) -> np.ndarray:
        return self.jump_counts.sum(axis=1, dtype=np.int64)

    def subset(self, n_paths: int) -> "PathEnsemble":
        return PathEnsemble(
            grid=self.grid,
            brownian_increments=self.brownian_increments[:n_paths].copy(),
            jump_counts=self.jump_counts[:n_paths].copy(),
            factor_states=self.factor_states[:n_paths].copy(),
            rates=self.rates[:n_paths].copy(),
            seed=self.seed,
            marks=self.marks,
        )


def simulate_ensemble(
    grid: TimeGrid,
    n_paths: int,
    dim_k: int,
    seed: int,
    jump_spec: Optional[JumpMeasureSpec] = None,
    factor: Optional[FactorSDE] = None,
) -> PathEnsemble:
    """Brownian block, jump block and factor in one pass.

    With a state-dependent compensator the counts at step i use the factor at
    step i, so the factor and the jumps are advanced together.  The counts are
    identical to ``simulate_jumps(grid, spec, X, n_paths, seed)`` on the
    resulting factor states.
    """
    n_paths = _check_counts(n_paths)
    spec = jump_spec if jump_spec is not None else no_jumps()
    if factor is None:
        factor = noise_factor(dim_k, spec) if spec.n_marks else brownian_factor(dim_k)
    dW = simulate_brownian(grid, n_paths, dim_k, seed)
    uniforms = _jump_uniforms(grid, n_paths, spec.n_marks, seed)
    n, m = grid.n_steps, spec.n_marks
    X = np.empty((n_paths, n + 1, factor.dim))
    X[:, 0] = factor.x0
    counts = np.zeros((n_paths, n, m), dtype=np.uint32)
    rates = np.zeros((n_paths, n, m))
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n):
            t, dt = grid.times[i], grid.steps[i]
            if m:
                rates[:, i] = spec.rates(t, X[:, i])
                counts[:, i] = _poisson_from_uniforms(uniforms[:, i], rates[:, i] * dt)
            X[:, i + 1] = _factor_step(factor, t, X[:, i], dt, dW[:, i], counts[:, i].astype(float))
            _check_finite(X[:, i + 1], i + 1)
    return PathEnsemble(grid, dW, counts, X, rates, int(seed), marks=spec.marks)


def coarsen(ensemble: PathEnsemble, factor: int) -> PathEnsemble:
    """Aggregate ``factor`` consecutive steps (same paths, coarser grid).

    Rates are averaged over the merged steps, which is exact for compensators
    that do not vary inside a merged step.
    """
    n = ensemble.n_steps
    if n % factor:
        raise InvalidGridError(f"{n} steps cannot be coarsened by {factor}")
    P = ensemble.n_paths
    nc = n // factor
    grid = TimeGrid(ensemble.grid.times[::factor])
    dW = ensemble.brownian_increments.reshape(P, nc, factor, -1).sum(axis=2)
    dN = ensemble.jump_counts.reshape(P, nc, factor, -1).sum(axis=2, dtype=np.uint32)
    rates = ensemble.rates.reshape(P, nc, factor, -1).mean(axis=2)
    X = ensemble.factor_states[:, ::factor].copy()
    return PathEnsemble(grid, dW, dN, X, rates, ensemble.seed, marks=ensemble.marks)


def moment_report(ensemble: PathEnsemble) -> dict:
    """Per-step z-scores of the Brownian variance and Poisson means."""
    dW = ensemble.brownian_increments
    P = ensemble.n_paths
    dt = ensemble.grid.steps[:, None]
    var = dW.var(axis=0, ddof=1)
    # sd of the sample variance of a Gaussian is sqrt(2/(P-1)) * dt
    var_z = (var - dt) / (np.sqrt(2.0 / (P - 1)) * dt)
    mean_counts = ensemble.jump_counts.mean(axis=0)
    expected = ensemble.rates.mean(axis=0) * dt
    with np.errstate(divide="ignore", invalid="ignore"):
        count_z = np.where(expected > 0, (mean_counts - expected) / np.sqrt(expected / P), 0.0)
    return {"variance_z": var_z, "count_z": count_z}


def sample_correlations(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-step sample correlation of two (P, n) arrays."""
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    den = np.sqrt((a * a).sum(axis=0) * (b * b).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, (a * b).sum(axis=0) / den, 0.0)


__all__: Sequence[str] = [
    "TimeGrid",
    "JumpMeasureSpec",
    "FactorSDE",
    "PathEnsemble",
    "make_time_grid",
    "simulate_brownian",
    "simulate_jumps",
    "simulate_factor",
    "simulate_ensemble",
    "brownian_factor",
    "noise_factor",
    "no_jumps",
    "coarsen",
]
