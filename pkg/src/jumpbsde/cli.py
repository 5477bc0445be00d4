"""Command line entry point.

    jumpbsde run CONFIG [--out DIR] [--format json,csv] [--paths N] [--steps N] [--seed S]
    jumpbsde suite oracle|inequalities|contraction|convergence [same flags]
    jumpbsde cache make PATH --problem KEY [--paths N] [--steps N] [--seed S]
    jumpbsde cache verify PATH

Exit status: 0 when every check passed, 1 when some check failed (a JSON
failure summary goes to stdout), 2 on configuration or input errors.
JBSDE_OUT_DIR, when set, replaces the output directory of the config; an
explicit --out still wins.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .cache import cache_ensemble, file_digest, load_ensemble
from .config import FORMATS, load_config, problem_from_dict
from .driver import make_time_grid
from .errors import JumpBSDEError
from .experiments import SUITES, run_experiment, run_suite, write_outputs

ENV_OUT = "JBSDE_OUT_DIR"


def _formats(text):
    out = [f.strip() for f in text.split(",") if f.strip()]
    bad = [f for f in out if f not in FORMATS]
    if bad or not out:
        raise argparse.ArgumentTypeError(f"formats must be a comma list from {FORMATS}, got {text!r}")
    return tuple(out)


def _add_overrides(p):
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", type=_formats, default=None, help="comma list of json,csv")
    p.add_argument("--paths", type=int, help="override n_paths")
    p.add_argument("--steps", type=int, help="override n_steps")
    p.add_argument("--seed", type=int, help="override the seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jumpbsde", description="Monte Carlo lab for BSDEs with jumps")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one config file")
    run.add_argument("config")
    _add_overrides(run)

    suite = sub.add_parser("suite", help="run a built-in suite")
    suite.add_argument("name", choices=SUITES)
    _add_overrides(suite)

    cache = sub.add_parser("cache", help="write or check an ensemble cache")
    csub = cache.add_subparsers(dest="action", required=True)
    make = csub.add_parser("make")
    make.add_argument("path")
    make.add_argument("--problem", default="lipschitz_z")
    make.add_argument("--T", type=float, default=1.0)
    make.add_argument("--paths", type=int, default=1000)
    make.add_argument("--steps", type=int, default=64)
    make.add_argument("--seed", type=int, required=True)
    verify = csub.add_parser("verify")
    verify.add_argument("path")
    return parser


def _out_dir(args, default):
    if args.out:
        return args.out
    return os.environ.get(ENV_OUT) or default


def _finish(bundle, out_dir, formats):
    manifest = write_outputs(bundle, out_dir, formats)
    summary = {
        "passed": bundle.passed,
        "n_checks": len(bundle.checks),
        "failures": bundle.failures(),
        "manifest": os.path.join(manifest["directory"], "manifest.json"),
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0 if bundle.passed else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config = load_config(args.config)
            config = config.with_overrides(args.paths, args.steps, args.seed)
            bundle = run_experiment(config)
            return _finish(bundle, _out_dir(args, config.out_dir), args.format or config.formats)
        if args.command == "suite":
            bundle = run_suite(args.name, args.paths, args.steps, args.seed)
            return _finish(bundle, _out_dir(args, f"jumpbsde_out/{args.name}"), args.format or FORMATS)
        if args.action == "make":
            problem = problem_from_dict({"key": args.problem, "params": {}}, 2.0, 1.0)
            ens = problem.simulate(make_time_grid(args.T, args.steps), args.paths, args.seed)
            path = cache_ensemble(ens, args.path)
            print(json.dumps({"path": str(path), "sha256": file_digest(path)}, sort_keys=True))
            return 0
        ens = load_ensemble(args.path)
        print(
            json.dumps(
                {
                    "path": args.path,
                    "n_paths": ens.n_paths,
                    "n_steps": ens.n_steps,
                    "dim_k": ens.dim_k,
                    "n_marks": ens.n_marks,
                    "seed": ens.seed,
                    "sha256": file_digest(args.path),
                },
                sort_keys=True,
            )
        )
        return 0
    except (JumpBSDEError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
