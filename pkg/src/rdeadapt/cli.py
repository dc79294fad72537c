"""Command-line entry point ``rdeadapt``."""

from __future__ import annotations

import argparse
import sys

from .adaptive import VARIANTS

EXIT_OK, EXIT_ERROR, EXIT_UNCONVERGED = 0, 1, 2


def build_parser():
    ap = argparse.ArgumentParser(prog="rdeadapt", description="Adaptive log-ODE solver for rough differential equations.")
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--example", metavar="NAME", help="registered example: spike-path, spike-field, "
                     "changing-roughness, langevin")
    src.add_argument("--path", metavar="FILE", help="CSV path file with header t,x1,...,xd")
    ap.add_argument("--field", metavar="NAME", help="registered vector field (with --path)")
    ap.add_argument("--y0", metavar="V", help="comma-separated initial value (with --path)")
    ap.add_argument("--algorithm", choices=VARIANTS, default="er-predicting")
    ap.add_argument("--tol-abs", type=float)
    ap.add_argument("--tol-rel", type=float)
    ap.add_argument("--max-degree", type=int, default=5)
    ap.add_argument("--p", type=float, help="roughness of the driver")
    ap.add_argument("--ode-tol", type=float, help="fixed inner ODE tolerance (default 0.01*TOL/n)")
    ap.add_argument("--subdivisions", type=int, default=8, help="substeps of the local error reference")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--horizon", type=float, help="time horizon of the langevin example")
    ap.add_argument("--full-scale", action="store_true", help="paper-size sample counts and horizon")
    ap.add_argument("--full-error", action="store_true", help="represent the error of the full solution")
    ap.add_argument("--initial-intervals", type=int, default=4)
    ap.add_argument("--max-rounds", type=int, default=30)
    ap.add_argument("--reference", choices=("chord", "grid", "none"), default="chord")
    ap.add_argument("--cache-dir", help="reference cache directory ('' disables caching)")
    ap.add_argument("--no-plots", action="store_true")
    ap.add_argument("--out", metavar="DIR", help="artifact directory")
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        from .cli_examples import cmd_example, cmd_solve
        common = dict(algorithm=args.algorithm, out=args.out, max_degree=args.max_degree, ode_tol=args.ode_tol,
                      subdivisions=args.subdivisions, full_error=args.full_error, reference=args.reference,
                      cache_dir=args.cache_dir, plots=not args.no_plots, max_rounds=args.max_rounds,
                      initial_intervals=args.initial_intervals, seed=args.seed)
        if args.example:
            report, _ = cmd_example(args.example, tol_abs=args.tol_abs, tol_rel=args.tol_rel, p=args.p,
                                    horizon=args.horizon, full_scale=args.full_scale, **common)
        else:
            if not args.field:
                raise ValueError("--path needs --field")
            y0 = None if args.y0 is None else [float(v) for v in args.y0.split(",")]
            kw = {k: v for k, v in (("tol_abs", args.tol_abs), ("tol_rel", args.tol_rel), ("p", args.p))
                  if v is not None}
            report, _ = cmd_solve(args.path, args.field, y0=y0, **kw, **common)
    except Exception as exc:  # every failure maps to exit code 1
        print(f"rdeadapt: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    _print(report)
    return EXIT_OK if report.converged else EXIT_UNCONVERGED


def _print(r):
    def g(x):
        return "n/a" if x is None else f"{x:.6g}"
    deg = ", ".join(f"N={k}: {v}" for k, v in r.intervals_by_degree.items())
    print(f"{r.example} [{r.algorithm}] converged={r.converged} rounds={r.rounds} intervals={r.n_intervals} ({deg})")
    print(f"  tolerance {g(r.tolerance)}  true error {g(r.true_error)}  estimated {g(r.estimated_error)}  "
          f"corrected {g(r.corrected_error)}  time {r.runtime_seconds:.2f}s")


if __name__ == "__main__":
    sys.exit(main())
