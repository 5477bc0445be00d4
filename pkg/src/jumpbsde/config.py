"""Experiment configuration: YAML in, validated dataclass out.

A minimal file::

    problem: zero
    ensemble: {n_paths: 1000, seed: 7}
    checks: [residual]

Everything else has a default, and ``ExperimentConfig.to_dict`` echoes the
filled-in values.  Inline problems use coefficient tables or a one-line
generator expression (scalar Y), e.g. ``"1 + 0.5*y - y^3 + 0.2*z + 0.1*u"``
where ``u`` stands for u(e_1)·r_1.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml

from .driver import JumpMeasureSpec
from .errors import ConfigError
from .problem import ProblemSpec
from .problems import BUILTIN, affine_problem, builtin_problem, linear_terminal

CHECK_NAMES = (
    "apriori",
    "cache_roundtrip",
    "contraction",
    "ito",
    "lemma31",
    "lemma33",
    "localization",
    "norms",
    "oracle",
    "picard",
    "remark21",
    "residual",
    "residual_rate",
    "truncation",
    "uniqueness",
)
FORMATS = ("json", "csv")
TOP_LEVEL = ("name", "problem", "p", "beta", "grid", "ensemble", "scheme", "checks", "output")


@dataclass(frozen=True)
class CheckSpec:
    name: str
    id: str
    params: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self):
        return {"name": self.name, "id": self.id, "params": copy.deepcopy(self.params)}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    problem: Dict[str, Any]
    p: float
    beta: float
    T: float
    n_steps: int
    n_paths: int
    seed: int
    degree: int = 1
    ridge: float = 0.0
    k_max: int = 50
    tol: float = 1e-6
    checks: Tuple[CheckSpec, ...] = ()
    out_dir: str = "jumpbsde_out"
    formats: Tuple[str, ...] = ("json", "csv")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "problem": copy.deepcopy(self.problem),
            "p": self.p,
            "beta": self.beta,
            "grid": {"T": self.T, "n_steps": self.n_steps},
            "ensemble": {"n_paths": self.n_paths, "seed": self.seed},
            "scheme": {"degree": self.degree, "ridge": self.ridge, "picard": {"k_max": self.k_max, "tol": self.tol}},
            "checks": [c.to_dict() for c in self.checks],
            "output": {"directory": self.out_dir, "formats": list(self.formats)},
        }

    def hash_payload(self) -> dict:
        # where the files go does not change the experiment
        body = self.to_dict()
        del body["output"]
        return body

    @property
    def config_hash(self) -> str:
        return config_hash(self.hash_payload())

    def with_overrides(self, n_paths=None, n_steps=None, seed=None, out_dir=None, formats=None) -> "ExperimentConfig":
        raw = self.to_dict()
        if n_paths is not None:
            raw["ensemble"]["n_paths"] = n_paths
        if n_steps is not None:
            raw["grid"]["n_steps"] = n_steps
        if seed is not None:
            raw["ensemble"]["seed"] = seed
        if out_dir is not None:
            raw["output"]["directory"] = str(out_dir)
        if formats is not None:
            raw["output"]["formats"] = list(formats)
        return parse_config(raw)


def _canonical(obj):
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def config_hash(payload: dict) -> str:
    text = json.dumps(_canonical(payload), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


# --------------------------------------------------------------------------
# loading and validation


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        problem = getattr(exc, "problem", None) or str(exc)
        if mark is not None:
            raise ConfigError(f"{path}: parse error: {problem}", line=mark.line + 1, column=mark.column + 1) from exc
        raise ConfigError(f"{path}: parse error: {problem}") from exc
    return parse_config(raw)


def _field_error(name, message):
    return ConfigError(f"field '{name}': {message}")


def _number(raw, name, default=None, kind=float):
    value = raw.get(name.split(".")[-1], default) if isinstance(raw, dict) else raw
    if value is None:
        raise _field_error(name, "is required")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _field_error(name, f"expected a number, got {value!r}")
    if kind is int and int(value) != value:
        raise _field_error(name, f"expected an integer, got {value!r}")
    return kind(value)


def _section(raw, name):
    sec = raw.get(name) or {}
    if not isinstance(sec, dict):
        raise _field_error(name, f"expected a mapping, got {type(sec).__name__}")
    return sec


def _reject_unknown(section: dict, allowed, prefix):
    for key in section:
        if key not in allowed:
            raise _field_error(f"{prefix}{key}", f"unknown key; allowed: {', '.join(allowed)}")


def parse_config(raw) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    _reject_unknown(raw, TOP_LEVEL, "")
    problem = _parse_problem(raw.get("problem"))
    p = _number(raw, "p", 2.0)
    if not p > 1:
        raise _field_error("p", f"p must exceed 1, got {p}")
    beta = _number(raw, "beta", 1.0)
    if not beta > 0:
        raise _field_error("beta", f"beta must be positive, got {beta}")

    grid = _section(raw, "grid")
    _reject_unknown(grid, ("T", "n_steps"), "grid.")
    T = _number(grid, "grid.T", 1.0)
    n_steps = _number(grid, "grid.n_steps", 64, int)
    if T <= 0:
        raise _field_error("grid.T", "must be positive")
    if n_steps < 1:
        raise _field_error("grid.n_steps", "must be >= 1")

    ens = _section(raw, "ensemble")
    _reject_unknown(ens, ("n_paths", "seed"), "ensemble.")
    if "seed" not in ens or ens["seed"] is None:
        raise _field_error("ensemble.seed", "a seed is required; runs are never seeded from entropy")
    seed = _number(ens, "ensemble.seed", kind=int)
    if seed < 0:
        raise _field_error("ensemble.seed", "must be nonnegative")
    n_paths = _number(ens, "ensemble.n_paths", 10_000, int)
    if n_paths < 2:
        raise _field_error("ensemble.n_paths", "must be >= 2")

    scheme = _section(raw, "scheme")
    _reject_unknown(scheme, ("degree", "ridge", "picard"), "scheme.")
    degree = _number(scheme, "scheme.degree", 1, int)
    ridge = _number(scheme, "scheme.ridge", 0.0)
    if degree < 0:
        raise _field_error("scheme.degree", "must be >= 0")
    if ridge < 0:
        raise _field_error("scheme.ridge", "must be >= 0")
    picard = _section(scheme, "picard")
    _reject_unknown(picard, ("k_max", "tol"), "scheme.picard.")
    k_max = _number(picard, "scheme.picard.k_max", 50, int)
    tol = _number(picard, "scheme.picard.tol", 1e-6)
    if k_max < 1 or tol <= 0:
        raise _field_error("scheme.picard", "k_max must be >= 1 and tol > 0")

    checks = _parse_checks(raw.get("checks", []))
    out = _section(raw, "output")
    _reject_unknown(out, ("directory", "formats"), "output.")
    out_dir = str(out.get("directory", "jumpbsde_out"))
    formats = out.get("formats", ["json", "csv"])
    if isinstance(formats, str):
        formats = [f.strip() for f in formats.split(",") if f.strip()]
    for f in formats:
        if f not in FORMATS:
            raise _field_error("output.formats", f"unknown format {f!r}; choose from {FORMATS}")

    name = str(raw.get("name") or (problem.get("key") or problem.get("inline", {}).get("name", "inline")))
    return ExperimentConfig(
        name=name,
        problem=problem,
        p=p,
        beta=beta,
        T=T,
        n_steps=n_steps,
        n_paths=n_paths,
        seed=seed,
        degree=degree,
        ridge=ridge,
        k_max=k_max,
        tol=tol,
        checks=tuple(checks),
        out_dir=out_dir,
        formats=tuple(formats),
    )


def _parse_problem(raw) -> dict:
    if raw is None:
        raise _field_error("problem", "is required (a built-in key or an inline definition)")
    if isinstance(raw, str):
        raw = {"key": raw}
    if not isinstance(raw, dict):
        raise _field_error("problem", "expected a key or a mapping")
    if "inline" in raw:
        _reject_unknown(raw, ("inline",), "problem.")
        inline = raw["inline"]
        if not isinstance(inline, dict):
            raise _field_error("problem.inline", "expected a mapping")
        # build once to validate; the dict itself is what gets stored and hashed
        build_inline(inline, 2.0, 1.0)
        return {"inline": copy.deepcopy(inline)}
    _reject_unknown(raw, ("key", "params"), "problem.")
    key = raw.get("key")
    if key not in BUILTIN:
        raise _field_error("problem.key", f"unknown problem {key!r}; choose from {sorted(BUILTIN)}")
    params = raw.get("params") or {}
    if not isinstance(params, dict):
        raise _field_error("problem.params", "expected a mapping")
    if "p" in params or "beta" in params:
        raise _field_error("problem.params", "set p and beta at the top level")
    return {"key": key, "params": copy.deepcopy(params)}


def _parse_checks(raw) -> List[CheckSpec]:
    if not isinstance(raw, list):
        raise _field_error("checks", "expected a list")
    out, seen = [], set()
    for k, item in enumerate(raw):
        if isinstance(item, str):
            item = {"name": item}
        if not isinstance(item, dict) or "name" not in item:
            raise _field_error(f"checks[{k}]", "expected a check name or a mapping with 'name'")
        name = item["name"]
        if name not in CHECK_NAMES:
            raise _field_error(f"checks[{k}].name", f"unknown check {name!r}; choose from {', '.join(CHECK_NAMES)}")
        cid = str(item.get("id", name))
        if cid in seen:
            raise _field_error(f"checks[{k}].id", f"duplicate check id {cid!r}; give repeated checks distinct ids")
        seen.add(cid)
        params = {key: v for key, v in item.items() if key not in ("name", "id")}
        out.append(CheckSpec(name=name, id=cid, params=params))
    return out


# --------------------------------------------------------------------------
# problems


def build_problem(config: ExperimentConfig, p: Optional[float] = None, beta: Optional[float] = None) -> ProblemSpec:
    return problem_from_dict(config.problem, config.p if p is None else p, config.beta if beta is None else beta)


def problem_from_dict(spec: dict, p: float, beta: float) -> ProblemSpec:
    if "inline" in spec:
        return build_inline(spec["inline"], p, beta)
    try:
        return builtin_problem(spec["key"], p=p, beta=beta, **spec.get("params", {}))
    except TypeError as exc:
        raise _field_error("problem.params", str(exc)) from exc


_TERM = re.compile(
    r"\s*(?P<sign>[+-])?\s*"
    r"(?P<coef>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)?\s*"
    r"(?P<star>\*)?\s*"
    r"(?P<var>y|z\d*|u\d*)?"
    r"(?:\s*\^\s*(?P<pow>\d+))?\s*"
)


def parse_generator_expression(expr: str, dim_k: int = 1, n_marks: int = 0) -> dict:
    """Coefficient tables of a scalar generator written as a sum of terms.

    Terms: a constant, ``c*y``, ``c*zK`` (K-th Brownian column, ``z`` = z1),
    ``c*uJ`` (mark J times its compensator rate, ``u`` = u1) and ``c*y^P``
    with P odd >= 3.
    """
    tables = {
        "constant": 0.0,
        "y_matrix": [[0.0]],
        "z_tensor": [[[0.0] * dim_k]],
        "u_tensor": [[[0.0] * n_marks]],
        "odd_powers": [],
    }
    pos, first = 0, True
    text = expr.strip()
    if not text:
        raise ConfigError("empty generator expression")
    while pos < len(text):
        m = _TERM.match(text, pos)
        if m is None or m.end() == pos:
            raise ConfigError(f"cannot parse generator expression at column {pos + 1}: {text[pos:]!r}")
        sign, coef, var, power = m.group("sign"), m.group("coef"), m.group("var"), m.group("pow")
        if sign is None and not first:
            raise ConfigError(f"expected '+' or '-' at column {pos + 1} of {text!r}")
        if coef is None and var is None:
            raise ConfigError(f"empty term at column {pos + 1} of {text!r}")
        if m.group("star") and (coef is None or var is None):
            raise ConfigError(f"misplaced '*' at column {pos + 1} of {text!r}")
        c = float(coef) if coef is not None else 1.0
        if sign == "-":
            c = -c
        if power is not None and var != "y":
            raise ConfigError(f"powers are only allowed on y (column {pos + 1})")
        if var is None:
            tables["constant"] += c
        elif var == "y" and power is None:
            tables["y_matrix"][0][0] += c
        elif var == "y":
            pw = int(power)
            if pw < 3 or pw % 2 == 0:
                raise ConfigError(f"y^{pw}: only odd powers >= 3 are allowed")
            # stored as the coefficient of −y^P
            tables["odd_powers"].append({"power": pw, "coef": -c})
        else:
            idx = int(var[1:] or 1) - 1
            width = dim_k if var[0] == "z" else n_marks
            if not 0 <= idx < width:
                raise ConfigError(f"{var} is out of range ({'dim_k' if var[0] == 'z' else 'n_marks'} = {width})")
            key = "z_tensor" if var[0] == "z" else "u_tensor"
            tables[key][0][0][idx] += c
        pos, first = m.end(), False
    return tables


INLINE_KEYS = (
    "name",
    "dim_d",
    "dim_k",
    "generator",
    "constant",
    "y_matrix",
    "z_tensor",
    "u_tensor",
    "odd_powers",
    "terminal",
    "jumps",
    "y_range",
    "epsilon_floor",
)


def build_inline(inline: dict, p: float, beta: float) -> ProblemSpec:
    _reject_unknown(inline, INLINE_KEYS, "problem.inline.")
    dim_d = int(inline.get("dim_d", 1))
    dim_k = int(inline.get("dim_k", 1))
    jumps = inline.get("jumps")
    spec = None
    if jumps:
        if not isinstance(jumps, dict):
            raise _field_error("problem.inline.jumps", "expected a mapping")
        _reject_unknown(jumps, ("marks", "kernel_masses", "intensity"), "problem.inline.jumps.")
        try:
            spec = JumpMeasureSpec(
                marks=jumps.get("marks", [[1.0]]),
                kernel_masses=jumps.get("kernel_masses", 1.0),
                jump_intensity=float(jumps.get("intensity", 1.0)),
            )
        except ValueError as exc:
            raise _field_error("problem.inline.jumps", str(exc)) from exc
    m = spec.n_marks if spec is not None else 0
    tables = {k: inline[k] for k in ("constant", "y_matrix", "z_tensor", "u_tensor", "odd_powers") if k in inline}
    if "generator" in inline:
        if tables:
            raise _field_error("problem.inline.generator", "give either an expression or coefficient tables, not both")
        if dim_d != 1:
            raise _field_error("problem.inline.generator", "expressions describe scalar problems (dim_d = 1)")
        tables = parse_generator_expression(str(inline["generator"]), dim_k, m)
    term = inline.get("terminal", {"kind": "linear"})
    if not isinstance(term, dict):
        raise _field_error("problem.inline.terminal", "expected a mapping with kind/matrix/constant")
    _reject_unknown(term, ("kind", "matrix", "constant"), "problem.inline.terminal.")
    dim_x = dim_k + m
    matrix = term.get("matrix")
    if matrix is None:
        matrix = np.zeros((dim_d, dim_x))
        matrix[:, 0] = 1.0
    try:
        terminal = linear_terminal(matrix, term.get("constant", 0.0), term.get("kind", "linear"))
        return affine_problem(
            str(inline.get("name", "inline")),
            dim_d,
            dim_k,
            jump_spec=spec,
            terminal=terminal,
            y_range=float(inline.get("y_range", 2.0)),
            p=p,
            beta=beta,
            epsilon_floor=float(inline.get("epsilon_floor", 1e-2)),
            params={"key": "inline"},
            **tables,
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise _field_error("problem.inline", str(exc)) from exc
