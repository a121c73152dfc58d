"""Command line entry point: ``sinai-mme <task> --table cfg.json [options]``."""

from __future__ import annotations

import argparse
import sys
import warnings

from .errors import BilliardError
from .reports import TASKS, ExperimentSpec, load_spec, run


def _floats(s):
    return [float(x) for x in s.split(",") if x.strip()]


def _ints(s):
    return [int(x) for x in s.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sinai-mme", description=__doc__)
    ap.add_argument("task", choices=TASKS + ("run",), help="task to run; 'run' reads everything from --spec")
    ap.add_argument("--table", help="table config (JSON or TOML)")
    ap.add_argument("--spec", help="experiment spec file (JSON or TOML); flags override its params")
    ap.add_argument("--out", default=None, help="output directory (default: out)")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--n-max", type=int, dest="n_max")
    ap.add_argument("--t-grid", type=_floats, dest="t_grid", help="comma-separated t values")
    ap.add_argument("--theta0", type=float)
    ap.add_argument("--delta-ladder", type=_ints, dest="delta_ladder",
                    help="comma-separated N with delta = delta0 / 2^N")
    ap.add_argument("--budget", type=int)
    ap.add_argument("--ulam-boxes", type=int, dest="ulam_boxes")
    ap.add_argument("--dump-operator", action="store_true", dest="dump_operator", default=None)
    ap.add_argument("--timing", action="store_true", default=None, help="record wall times in counts.csv")
    ap.add_argument("--scan-scatterer", type=int, dest="scan_scatterer", help="radius sweep: scatterer index")
    ap.add_argument("--scan-radii", type=_floats, dest="scan_radii", help="radius sweep: comma-separated radii")
    ap.add_argument("--cache", default=None, help="cache directory (default: $SINAI_MME_CACHE)")
    ap.add_argument("-q", "--quiet", action="store_true")
    return ap


PARAM_FLAGS = ("n_max", "t_grid", "theta0", "delta_ladder", "budget", "ulam_boxes", "dump_operator", "timing",
               "scan_scatterer", "scan_radii")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    log = None if args.quiet else (lambda m: print(m, file=sys.stderr))
    try:
        if args.spec:
            spec = load_spec(args.spec)
            if args.task != "run":
                spec.task = args.task
        elif args.task == "run":
            raise BilliardError("task 'run' needs --spec")
        else:
            if not args.table:
                raise BilliardError("--table is required")
            spec = ExperimentSpec(args.table, args.task)
        if args.table and args.spec:
            spec.table = args.table
        if args.out is not None:
            spec.out = args.out
        if args.seed is not None:
            spec.seed = args.seed
        for k in PARAM_FLAGS:
            v = getattr(args, k)
            if v is not None:
                spec.params[k] = v
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            res = run(spec, cache_dir=args.cache, log=log)
    except BilliardError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if not args.quiet:
        print("\n".join(res.summary))
    return res.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
