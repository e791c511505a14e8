"""Command-line front end.

Subcommands
-----------
gen     write a generated instance file
solve   solve an instance file and print a JSON report
bench   run a seeded batch and write per-trial and summary CSVs
verify  run the built-in property checks and print a verdict table

Exit codes: 0 success, 1 verify found failures, 2 usage error, 3 invalid input
or initial point, 4 solver failure.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import InvalidInitialPoint, LineSearchFailure
from .generate import FAMILIES, InstanceFileError, generate, load_instance, save_instance
from .harness import (
    NoValidInitialPoint,
    config_from_mapping,
    read_config_items,
    run_batch,
    apply_overrides,
    solve_instance,
    summary_csv,
    trials_csv,
)

CONFIG_ENV = "FRACPROX_CONFIG"

EXIT_OK, EXIT_VERIFY_FAILED, EXIT_USAGE, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2, 3, 4

log = logging.getLogger("fracprox")

# flag dest -> BatchConfig field
_FLAG_FIELDS = {
    "family": "family", "i": "i", "K": "K", "F": "F", "D": "D",
    "lam": "lam", "gamma": "gamma", "outliers": "outliers",
    "tol": "tol", "sigma": "sigma", "alpha_min": "alpha_min", "alpha_max": "alpha_max",
    "shrink": "shrink", "max_iters": "max_iters", "trials": "trials", "seed": "seed",
    "init": "init", "jobs": "jobs",
}


class UsageError(Exception):
    pass


def _add_common(p):
    p.add_argument("--config", help=f"batch config file (default: ${CONFIG_ENV})")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key; may be repeated")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_family(p):
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--i", type=int, help="scale multiplier for robust/cauchy")
    p.add_argument("--K", type=int, help="sparsity for dct")
    p.add_argument("--F", type=float, help="coherence parameter for dct")
    p.add_argument("--D", type=float, help="dynamic range exponent for dct")
    p.add_argument("--seed", type=int)


def _add_solver(p):
    p.add_argument("--lambda", dest="lam", type=float, help="override regularization weight")
    p.add_argument("--gamma", type=float, help="override Lorentzian scale")
    p.add_argument("--outliers", type=int, help="override outlier count r")
    p.add_argument("--tol", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--alpha-min", dest="alpha_min", type=float)
    p.add_argument("--alpha-max", dest="alpha_max", type=float)
    p.add_argument("--shrink", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--init", help="pseudoinverse | regularized[:mu] | l1[:trim] | user")


def build_parser():
    parser = argparse.ArgumentParser(prog="fracprox", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate an instance file")
    _add_common(p)
    _add_family(p)
    p.add_argument("--out-dir", default=".")
    p.add_argument("-o", "--output", help="file name (default derived from family and seed)")

    p = sub.add_parser("solve", help="solve an instance file")
    _add_common(p)
    _add_solver(p)
    p.add_argument("instance")
    p.add_argument("--x0", help=".npy file with a user-supplied start (implies --init user)")
    p.add_argument("--trace", action="store_true", help="include per-iteration records")
    p.add_argument("--solution", help="write the solution vector to this .npy file")

    p = sub.add_parser("bench", help="run a seeded batch")
    _add_common(p)
    _add_family(p)
    _add_solver(p)
    p.add_argument("--trials", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out-dir", default=".")

    p = sub.add_parser("verify", help="run the property checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="smaller sample sizes")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def resolve_config(args, require_family=True, fixed=None):
    """Merge defaults < config file < --set overrides < explicit flags < `fixed`."""
    mapping = {}
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV)
    try:
        if path:
            mapping.update(_norm(read_config_items(path)))
        for item in getattr(args, "set", []):
            key, sep, value = item.partition("=")
            if not sep:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            mapping.update(_norm({key: value}))
        for dest, name in _FLAG_FIELDS.items():
            value = getattr(args, dest, None)
            if value is not None:
                mapping[name] = value
        mapping.update(fixed or {})
        if "family" not in mapping and require_family:
            raise UsageError("--family is required (or set family in a config file)")
        return config_from_mapping(mapping)
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _norm(mapping):
    return {k.strip().replace("-", "_"): v for k, v in mapping.items()}


def cmd_gen(args):
    cfg = resolve_config(args)
    spec = cfg.gen_spec(cfg.seed)
    inst = generate(spec)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = args.output or f"{spec.family}_{'_'.join(f'{k}{v:g}' for k, v in spec.params().items())}_s{spec.seed}.fpi"
    path = out_dir / name
    save_instance(inst, path)
    m, n = inst.model.shape
    print(json.dumps({"path": str(path), "family": spec.family, "seed": spec.seed,
                      "dims": spec.dims, "lam": inst.model.lam, "shape": [m, n]}))
    return EXIT_OK


def cmd_solve(args):
    try:
        inst = load_instance(args.instance)
    except (OSError, InstanceFileError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    if args.x0:
        args.init = "user"
    spec = inst.spec
    fixed = {"family": spec.family, "i": spec.scale, "K": spec.K, "F": spec.F, "D": spec.D}
    cfg = resolve_config(args, require_family=False, fixed=fixed)
    inst = apply_overrides(inst, cfg)
    x0 = None
    if args.x0:
        try:
            x0 = np.load(args.x0)
        except OSError as exc:
            log.error("%s", exc)
            return EXIT_INPUT
    report = solve_instance(inst, cfg, keep_trace=True, x0=x0)
    if report.status == "invalid-init":
        log.error("invalid initial point: %s", report.error)
        return EXIT_INPUT
    out = {
        "family": report.family, "params": report.params, "seed": report.seed,
        "status": report.status, "time_s": report.wall_time_s,
        "obj": report.objective_final, "rec_err": report.rec_err,
        "iters": report.iterations, "ls_trials": report.line_search_trials_total,
        "residual": report.criticality_residual, "termination": report.termination_reason,
        "eff_sparsity": report.eff_sparsity, "init": report.init,
        "init_adjusted": report.init_adjusted, "descent_violations": report.descent_violations,
    }
    if args.trace and report.trace is not None:
        tr = report.trace
        out["trace"] = {
            "sigma": tr.sigma,
            "F": tr.F_values,
            "alpha": [r.alpha for r in tr.records],
            "step_norm": [r.step_norm for r in tr.records],
            "trials": [r.line_search_trials for r in tr.records],
        }
    print(json.dumps(out, default=_json_default))
    if args.solution and report.x is not None:
        np.save(args.solution, report.x)
    if report.status != "ok":
        log.error("solver failure: %s", report.error)
        return EXIT_SOLVER
    return EXIT_OK


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(type(v))


def cmd_bench(args):
    cfg = resolve_config(args)
    summary, reports = run_batch(cfg, keep_trace=False)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{cfg.family}_{'_'.join(f'{k}{v:g}' for k, v in cfg.params().items())}_seed{cfg.seed}"
    (out_dir / f"{stem}_trials.csv").write_text(trials_csv(reports))
    text = summary_csv([summary])
    (out_dir / f"{stem}_summary.csv").write_text(text)
    sys.stdout.write(text)
    if summary.failed:
        log.error("%d of %d trials failed", summary.failed, summary.trials)
        return EXIT_SOLVER
    return EXIT_OK


def cmd_verify(args):
    from .verify import run_all

    results = run_all(seed=args.seed, quick=args.quick)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}")
    ok = all(r.passed for r in results)
    print(f"{'verdict':<{width}}  {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY_FAILED


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    handler = {"gen": cmd_gen, "solve": cmd_solve, "bench": cmd_bench, "verify": cmd_verify}[args.command]
    try:
        return handler(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (InvalidInitialPoint, NoValidInitialPoint) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except LineSearchFailure as exc:
        log.error("%s", exc)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
