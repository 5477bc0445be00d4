"""Binary cache for path ensembles and discrete solutions.

Layout (little endian): a fixed header, then the raw arrays in C order.

    ensemble  b"JBSD" | version u32 | seed u64 | n_paths u64 | n_steps, dim_k, n_marks, dim_x, mark_dim u32
              times f64[n+1] | dW f64[P,n,k] | X f64[P,n+1,dX] | rates f64[P,n,m] | marks f64[m,mark_dim] | counts u32[P,n,m]
    solution  b"JBSS" | version u32 | seed u64 | n_paths u64 | n_steps, dim_k, n_marks, dim_d, 0 u32
              times f64[n+1] | Y f64[P,n+1,d] | Z f64[P,n,d,k] | U f64[P,n,d,m]
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .driver import PathEnsemble, TimeGrid
from .errors import CacheCorruptionError, CacheFormatError
from .solver import DiscreteSolution

VERSION = 1
HEADER = struct.Struct("<4sIQQIIIII")
ENSEMBLE_MAGIC = b"JBSD"
SOLUTION_MAGIC = b"JBSS"
F64, U32 = np.dtype("<f8"), np.dtype("<u4")


def _blocks_ensemble(P, n, k, m, dx, mk):
    return [
        ("times", F64, (n + 1,)),
        ("dW", F64, (P, n, k)),
        ("X", F64, (P, n + 1, dx)),
        ("rates", F64, (P, n, m)),
        ("marks", F64, (m, mk)),
        ("counts", U32, (P, n, m)),
    ]


def _blocks_solution(P, n, k, m, d):
    return [
        ("times", F64, (n + 1,)),
        ("Y", F64, (P, n + 1, d)),
        ("Z", F64, (P, n, d, k)),
        ("U", F64, (P, n, d, m)),
    ]


def _expected_length(blocks):
    return HEADER.size + sum(dt.itemsize * int(np.prod(shape)) for _, dt, shape in blocks)


def _write(path, header, arrays):
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header)
        for arr, dt in arrays:
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return path


def _read(path, magic):
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise CacheCorruptionError(
            f"{path}: truncated header, expected at least {HEADER.size} bytes, got {len(raw)}",
            expected=HEADER.size,
            actual=len(raw),
        )
    fields = HEADER.unpack_from(raw)
    if fields[0] != magic:
        raise CacheFormatError(f"{path}: bad magic {fields[0]!r}, expected {magic!r}")
    if fields[1] != VERSION:
        raise CacheFormatError(f"{path}: unsupported cache version {fields[1]} (this build reads {VERSION})")
    return raw, fields


def _unpack(path, raw, blocks):
    expected = _expected_length(blocks)
    if len(raw) != expected:
        raise CacheCorruptionError(
            f"{path}: expected {expected} bytes, got {len(raw)}", expected=expected, actual=len(raw)
        )
    out, offset = {}, HEADER.size
    for name, dt, shape in blocks:
        count = int(np.prod(shape))
        out[name] = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(shape).copy()
        offset += count * dt.itemsize
    return out


def cache_ensemble(ensemble: PathEnsemble, path) -> Path:
    P, n, k = ensemble.brownian_increments.shape
    m, dx = ensemble.n_marks, ensemble.dim_x
    marks = np.asarray(ensemble.marks, dtype=float).reshape(m, -1) if m else np.zeros((0, 1))
    header = HEADER.pack(ENSEMBLE_MAGIC, VERSION, int(ensemble.seed), P, n, k, m, dx, marks.shape[1])
    return _write(
        path,
        header,
        [
            (ensemble.grid.times, F64),
            (ensemble.brownian_increments, F64),
            (ensemble.factor_states, F64),
            (ensemble.rates, F64),
            (marks, F64),
            (ensemble.jump_counts, U32),
        ],
    )


def load_ensemble(path) -> PathEnsemble:
    raw, (_, _, seed, P, n, k, m, dx, mk) = _read(path, ENSEMBLE_MAGIC)
    arr = _unpack(path, raw, _blocks_ensemble(P, n, k, m, dx, mk))
    return PathEnsemble(
        grid=TimeGrid(arr["times"]),
        brownian_increments=arr["dW"],
        jump_counts=arr["counts"],
        factor_states=arr["X"],
        rates=arr["rates"],
        seed=int(seed),
        marks=arr["marks"],
    )


def cache_solution(solution: DiscreteSolution, path, seed: int = 0) -> Path:
    P, n, d, k = solution.Z.shape
    m = solution.U.shape[3]
    header = HEADER.pack(SOLUTION_MAGIC, VERSION, int(seed), P, n, k, m, d, 0)
    return _write(path, header, [(solution.grid.times, F64), (solution.Y, F64), (solution.Z, F64), (solution.U, F64)])


def load_solution(path) -> DiscreteSolution:
    raw, (_, _, seed, P, n, k, m, d, _) = _read(path, SOLUTION_MAGIC)
    arr = _unpack(path, raw, _blocks_solution(P, n, k, m, d))
    return DiscreteSolution(arr["Y"], arr["Z"], arr["U"], TimeGrid(arr["times"]), {"seed": int(seed)})


def ensembles_identical(a: PathEnsemble, b: PathEnsemble) -> bool:
    """Bitwise equality of every stored array (NaN-safe, signed zeros distinguished)."""
    pairs = [
        (a.grid.times, b.grid.times),
        (a.brownian_increments, b.brownian_increments),
        (a.factor_states, b.factor_states),
        (a.rates, b.rates),
        (a.jump_counts, b.jump_counts),
    ]
    if a.seed != b.seed:
        return False
    for x, y in pairs:
        if x.shape != y.shape or x.dtype != y.dtype or x.tobytes() != y.tobytes():
            return False
    return True


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
