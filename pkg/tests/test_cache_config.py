import re

import numpy as np
import pytest
import yaml

from jumpbsde.cache import (
    HEADER,
    cache_ensemble,
    cache_solution,
    ensembles_identical,
    load_ensemble,
    load_solution,
)
from jumpbsde.config import build_problem, config_hash, load_config, parse_config, parse_generator_expression
from jumpbsde.driver import make_time_grid
from jumpbsde.errors import CacheCorruptionError, CacheFormatError, ConfigError
from jumpbsde.problem import compute_weight_paths, evaluate_generator
from jumpbsde.problems import lipschitz_z
from jumpbsde.solver import RegressionConfig, solve_backward


@pytest.fixture
def ensemble():
    return lipschitz_z().simulate(make_time_grid(1.0, 6), 40, 99)


def test_ensemble_round_trip(tmp_path, ensemble):
    path = cache_ensemble(ensemble, tmp_path / "e.jbsd")
    back = load_ensemble(path)
    assert ensembles_identical(ensemble, back)
    assert back.seed == 99
    for name in ("brownian_increments", "jump_counts", "factor_states", "rates"):
        a, b = getattr(ensemble, name), getattr(back, name)
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes()


def test_header_layout(tmp_path, ensemble):
    path = cache_ensemble(ensemble, tmp_path / "e.jbsd")
    fields = HEADER.unpack(path.read_bytes()[: HEADER.size])
    assert fields[0] == b"JBSD"
    assert fields[1:4] == (1, 99, 40)
    assert fields[4:7] == (6, 1, 1)


def test_wrong_magic(tmp_path, ensemble):
    path = cache_ensemble(ensemble, tmp_path / "e.jbsd")
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(CacheFormatError):
        load_ensemble(path)


def test_truncated(tmp_path, ensemble):
    path = cache_ensemble(ensemble, tmp_path / "e.jbsd")
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises(CacheCorruptionError, match=f"expected {len(raw)} bytes, got {len(raw) - 7}"):
        load_ensemble(path)


def test_solution_round_trip(tmp_path, ensemble):
    prob = lipschitz_z()
    sol = solve_backward(prob, ensemble, compute_weight_paths(prob, ensemble), RegressionConfig(degree=1, ridge=1e-8))
    path = cache_solution(sol, tmp_path / "s.jbss", seed=99)
    assert path.read_bytes()[:4] == b"JBSS"
    back = load_solution(path)
    for c in ("Y", "Z", "U"):
        assert getattr(sol, c).tobytes() == getattr(back, c).tobytes()
    with pytest.raises(CacheFormatError):
        load_ensemble(path)


# config


MINIMAL = {"problem": "zero", "ensemble": {"seed": 1}}


def test_minimal_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.p == 2.0 and cfg.beta == 1.0 and cfg.n_steps == 64 and cfg.n_paths == 10_000
    echoed = cfg.to_dict()
    assert echoed["scheme"]["picard"] == {"k_max": 50, "tol": 1e-6}


def test_p_must_exceed_one():
    with pytest.raises(ConfigError, match="p must exceed 1"):
        parse_config({**MINIMAL, "p": 1.0})


def test_missing_seed():
    with pytest.raises(ConfigError, match="seed is required"):
        parse_config({"problem": "zero"})


@pytest.mark.parametrize(
    "raw,field",
    [
        ({**MINIMAL, "beta": -1}, "beta"),
        ({**MINIMAL, "grid": {"n_steps": 0}}, "grid.n_steps"),
        ({**MINIMAL, "problem": "nope"}, "problem.key"),
        ({**MINIMAL, "checks": ["nope"]}, "checks[0].name"),
        ({**MINIMAL, "checks": ["oracle", "oracle"]}, "checks[1].id"),
        ({**MINIMAL, "extra": 1}, "extra"),
        ({**MINIMAL, "output": {"formats": ["xml"]}}, "output.formats"),
    ],
)
def test_validation_names_field(raw, field):
    with pytest.raises(ConfigError, match=re.escape(f"field '{field}'")):
        parse_config(raw)


def test_parse_error_position(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("problem: zero\nensemble: {seed: 1\n")
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert err.value.line is not None and err.value.column is not None


def test_hash_stable_under_reordering(tmp_path):
    a = {"problem": "zero", "p": 2.5, "ensemble": {"seed": 3, "n_paths": 100}, "checks": ["residual"]}
    b = {"checks": ["residual"], "ensemble": {"n_paths": 100, "seed": 3}, "p": 2.5, "problem": "zero"}
    assert parse_config(a).config_hash == parse_config(b).config_hash
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(b))
    assert load_config(path).config_hash == parse_config(a).config_hash
    assert config_hash({"x": 1, "y": 2}) == config_hash({"y": 2, "x": 1})


def test_hash_ignores_output():
    a = parse_config({**MINIMAL, "output": {"directory": "a"}})
    b = parse_config({**MINIMAL, "output": {"directory": "b"}})
    assert a.config_hash == b.config_hash


def test_generator_expression():
    tables = parse_generator_expression("1.5 - 0.5*y + 0.2*z - y^3 + 0.1*u", 1, 1)
    assert tables["constant"] == 1.5
    assert tables["y_matrix"] == [[-0.5]]
    assert tables["z_tensor"] == [[[0.2]]]
    assert tables["u_tensor"] == [[[0.1]]]
    assert tables["odd_powers"] == [{"power": 3, "coef": 1.0}]


@pytest.mark.parametrize("expr", ["", "y^2", "2*", "y y", "z3"])
def test_generator_expression_errors(expr):
    with pytest.raises(ConfigError):
        parse_generator_expression(expr, 1, 0)


def test_inline_problem():
    raw = {
        **MINIMAL,
        "problem": {
            "inline": {
                "name": "mine",
                "generator": "0.5 - y + 0.3*z - y^3",
                "terminal": {"kind": "sin"},
            }
        },
    }
    cfg = parse_config(raw)
    assert cfg.name == "mine"
    prob = build_problem(cfg)
    out = evaluate_generator(prob, 0.0, np.zeros(1), np.array([2.0]), np.array([[1.0]]))
    assert out[0] == pytest.approx(0.5 - 2.0 + 0.3 - 8.0)
