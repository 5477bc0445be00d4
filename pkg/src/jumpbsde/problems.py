"""Named test problems.

Most of them are instances of one family, generators of the form

    f(t, x, y, z, u) = c + A y + B:z + Σ_j C_j u(e_j) r_j(t, x) − Σ_k c_k ⊙ y^{2k+1}

(r_j = compensator rate of mark j, odd powers componentwise) with terminal
conditions that are simple functions of the terminal factor.  For this family
the structure coefficients follow from the matrices: α from the symmetric part
of A, the z-Lipschitz constant from the spectral norm of B, the u-Lipschitz
constant from C weighted by √r_j.
"""

from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .driver import FactorSDE, JumpMeasureSpec, brownian_factor, no_jumps, noise_factor
from .errors import InvalidSpecError
from .problem import ProblemSpec


def _spectral(mat: np.ndarray) -> float:
    return float(np.linalg.norm(mat, 2)) if mat.size else 0.0


def linear_terminal(matrix, constant=0.0, kind="linear") -> Callable:
    """ξ = g(c + M x_T) with g the identity, sin, or square (componentwise)."""
    M = np.atleast_2d(np.asarray(matrix, dtype=float))
    c = np.asarray(constant, dtype=float)
    outer = {"linear": lambda v: v, "sin": np.sin, "square": np.square, "tanh": np.tanh}
    if kind not in outer:
        raise InvalidSpecError(f"unknown terminal kind {kind!r}")
    g = outer[kind]

    def terminal(x_T, counts_T):
        return g(c + x_T @ M.T)

    return terminal


def affine_problem(
    name: str,
    dim_d: int = 1,
    dim_k: int = 1,
    jump_spec: Optional[JumpMeasureSpec] = None,
    factor: Optional[FactorSDE] = None,
    constant=None,
    y_matrix=None,
    z_tensor=None,
    u_tensor=None,
    odd_powers: Sequence[Dict] = (),
    terminal: Optional[Callable] = None,
    y_range: float = 2.0,
    p: float = 2.0,
    beta: float = 1.0,
    epsilon_floor: float = 1e-2,
    params: Optional[dict] = None,
) -> ProblemSpec:
    spec = jump_spec if jump_spec is not None else no_jumps()
    d, k, m = dim_d, dim_k, spec.n_marks
    c = np.zeros(d) if constant is None else np.broadcast_to(np.asarray(constant, dtype=float), (d,)).copy()
    A = np.zeros((d, d)) if y_matrix is None else np.asarray(y_matrix, dtype=float).reshape(d, d)
    B = np.zeros((d, d, k)) if z_tensor is None else np.asarray(z_tensor, dtype=float).reshape(d, d, k)
    C = np.zeros((d, d, m)) if u_tensor is None else np.asarray(u_tensor, dtype=float).reshape(d, d, m)
    powers = []
    for term in odd_powers:
        power = int(term["power"])
        if power < 3 or power % 2 == 0:
            raise InvalidSpecError(f"odd power terms need an odd power >= 3, got {power}")
        coef = np.broadcast_to(np.asarray(term["coef"], dtype=float), (d,)).copy()
        powers.append((power, coef))
    if factor is None:
        factor = noise_factor(k, spec) if m else brownian_factor(k)
    if terminal is None:
        terminal = linear_terminal(np.zeros((d, factor.dim)))

    def generator(t, x, y, z, u):
        out = c + y @ A.T + np.einsum("rak,pak->pr", B, z)
        if m and np.any(C):
            r = spec.rates(t, x)
            out = out + np.einsum("raj,paj,pj->pr", C, u, r)
        for power, coef in powers:
            out = out - coef * y**power
        return out

    sym = 0.5 * (A + A.T)
    alpha = float(np.linalg.eigvalsh(sym).max())
    # positive coefficients in front of -y^{2k+1} only help monotonicity
    if any(np.any(coef < 0) for _, coef in powers):
        alpha = alpha + sum(float(np.max(-coef, initial=0.0)) * power * y_range ** (power - 1) for power, coef in powers)
    lip_z = _spectral(B.reshape(d, d * k))
    g_growth = _spectral(A) + sum(float(np.abs(coef).max()) * y_range ** (power - 1) for power, coef in powers)
    if g_growth <= 0:
        g_growth = 1.0
    phi = max(1.0, float(np.linalg.norm(c)))

    if m and np.any(C):
        if spec.is_state_dependent:

            def lip_u(t, x):
                r = spec.rates(t, x)
                return np.array([_spectral((C * np.sqrt(ri)[None, None, :]).reshape(d, d * m)) for ri in r])

        else:
            r0 = spec.rates(0.0, np.zeros((1, max(factor.dim, 1))))[0]
            lip_u = _spectral((C * np.sqrt(r0)[None, None, :]).reshape(d, d * m))
    else:
        lip_u = 0.0

    return ProblemSpec(
        name=name,
        dim_d=d,
        dim_k=k,
        generator=generator,
        terminal=terminal,
        p=p,
        beta=beta,
        epsilon_floor=epsilon_floor,
        alpha=alpha,
        lipschitz_z=lip_z,
        lipschitz_u=lip_u,
        phi_growth=phi,
        g_growth=g_growth,
        jump_spec=spec,
        factor=factor,
        params=dict(params or {}),
    )


# --------------------------------------------------------------------------
# the library


def zero(p=2.0, beta=1.0, dim_d=1, dim_k=1):
    return affine_problem("zero", dim_d, dim_k, p=p, beta=beta, params={"key": "zero"})


def linear_y(a=0.5, c=1.0, p=2.0, beta=1.0):
    """f = a y, ξ = c; Y_t = c e^{a (T − t)}."""
    prob = affine_problem(
        "linear_y",
        y_matrix=[[a]],
        terminal=lambda x_T, n_T: np.full((x_T.shape[0], 1), float(c)),
        p=p,
        beta=beta,
        params={"key": "linear_y", "a": a, "c": c},
    )
    return prob


def brownian_terminal(p=2.0, beta=1.0, dim_k=1):
    """ξ = W_T^(1), f = 0; Y = W^(1), Z = e_1."""
    M = np.zeros((1, dim_k))
    M[0, 0] = 1.0
    return affine_problem(
        "brownian_terminal", 1, dim_k, terminal=linear_terminal(M), p=p, beta=beta, params={"key": "brownian_terminal"}
    )


def jump_terminal(intensity=16.0, p=2.0, beta=1.0):
    """ξ = Ñ_T (one mark e_1 = 1), f = 0; Y = Ñ, U(e_1) = 1, Z = 0.

    The factor is the compensated count alone."""
    spec = JumpMeasureSpec(marks=[[1.0]], kernel_masses=[1.0], jump_intensity=intensity)
    factor = FactorSDE(
        x0=[0.0],
        drift=lambda t, x: -spec.rates(t, x),
        jump=lambda t, x, j: np.ones((x.shape[0], 1)),
    )
    return affine_problem(
        "jump_terminal",
        1,
        1,
        jump_spec=spec,
        factor=factor,
        terminal=linear_terminal([[1.0]]),
        p=p,
        beta=beta,
        params={"key": "jump_terminal", "intensity": intensity},
    )


def monotone_cubic(p=2.0, beta=1.0, y_range=2.0):
    """f = −y³, ξ = sin(W_T).  The growth coefficient is declared on |y| <= y_range."""
    return affine_problem(
        "monotone_cubic",
        odd_powers=[{"power": 3, "coef": 1.0}],
        terminal=linear_terminal([[1.0]], kind="sin"),
        y_range=y_range,
        p=p,
        beta=beta,
        params={"key": "monotone_cubic", "y_range": y_range},
    )


def brownian_square(p=2.0, beta=1.0):
    """ξ = W_T², f = 0; Y_t = W_t² + T − t, Z = 2 W."""
    return affine_problem(
        "brownian_square", terminal=linear_terminal([[1.0]], kind="square"), p=p, beta=beta, params={"key": "brownian_square"}
    )


def lipschitz_z(b=0.5, b_u=0.25, decay=0.5, intensity=1.0, terminal_scale=1.0, p=2.0, beta=1.0):
    """f = −decay·y + b·z + b_u·u(e_1)·λ with ξ = s (sin(W_T) + Ñ_T / 2)."""
    spec = JumpMeasureSpec(marks=[[1.0]], kernel_masses=[1.0], jump_intensity=intensity)
    return affine_problem(
        "lipschitz_z",
        1,
        1,
        jump_spec=spec,
        y_matrix=[[-decay]],
        z_tensor=[[[b]]],
        u_tensor=[[[b_u]]],
        terminal=lambda x_T, n_T: terminal_scale * _sin_plus_jump(x_T, n_T),
        p=p,
        beta=beta,
        params={
            "key": "lipschitz_z",
            "b": b,
            "b_u": b_u,
            "decay": decay,
            "intensity": intensity,
            "terminal_scale": terminal_scale,
        },
    )


def _sin_plus_jump(x_T, n_T):
    return (np.sin(x_T[:, 0]) + 0.5 * x_T[:, 1])[:, None]


def local_growth(scale=0.5, b=0.5, p=2.0, beta=1.0):
    """f = −scale (1 + x²) y + b z with ξ = 1 + W_T.

    The growth coefficient scale (1 + x²) is unbounded in the factor, so
    a² = scale (1 + x²) + b² crosses any level on some paths.
    """
    g = lambda t, x: scale * (1.0 + x[:, 0] ** 2)  # noqa: E731

    def generator(t, x, y, z, u):
        return -g(t, x)[:, None] * y + b * z[:, :, 0]

    return ProblemSpec(
        name="local_growth",
        dim_d=1,
        dim_k=1,
        generator=generator,
        terminal=lambda x_T, n_T: 1.0 + x_T[:, :1],
        p=p,
        beta=beta,
        alpha=0.0,
        lipschitz_z=b,
        lipschitz_u=0.0,
        phi_growth=1.0,
        g_growth=g,
        factor=brownian_factor(1),
        params={"key": "local_growth", "scale": scale, "b": b},
    )


BUILTIN = {
    "zero": zero,
    "linear_y": linear_y,
    "brownian_terminal": brownian_terminal,
    "jump_terminal": jump_terminal,
    "monotone_cubic": monotone_cubic,
    "brownian_square": brownian_square,
    "lipschitz_z": lipschitz_z,
    "local_growth": local_growth,
}


def builtin_problem(key: str, **kwargs) -> ProblemSpec:
    try:
        factory = BUILTIN[key]
    except KeyError:
        raise InvalidSpecError(f"unknown problem {key!r}; choose from {sorted(BUILTIN)}") from None
    return factory(**kwargs)
