"""Command-line entry point.

    warpquad bench run --spec grid.yaml --out results.csv
    warpquad bench summarize --in results.csv
    warpquad fit --data points.csv --warp log --space f
    warpquad integrate --problem problem.yaml --method mmlt_f --budget 30 --seed 0

Exit status is 0 on success and 1 (with one diagnostic line on stderr) on error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import bench
from .hyperfit import FitConfig, fit
from .quadrature import log_density_of_true_Z, log_evidence_estimate
from .sampling import METHODS, mc_estimate, qmc_estimate, run_active, smc_estimate
from .transforms import Warp, warp_inverse

WARP_CHOICES = ("sqrt", "log", "probit", "poly")


def _cmd_bench_run(args) -> int:
    spec = bench.load_spec(args.spec)
    rows = bench.run_benchmark(spec, out=args.out, workers=args.workers)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _cmd_bench_summarize(args) -> int:
    summary = bench.summarize(bench.read_results(args.input))
    print(bench.summary_json(summary) if args.json else bench.format_summary(summary))
    return 0


def _read_xy(path):
    data = np.genfromtxt(path, delimiter=",", names=True, dtype=float, encoding="utf-8")
    names = data.dtype.names
    if names is None or len(names) < 2:
        raise ValueError(f"{path}: need a header and at least one x column plus an f column")
    f_col = "f" if "f" in names else names[-1]
    x_cols = [n for n in names if n != f_col]
    x = np.column_stack([np.atleast_1d(data[n]) for n in x_cols])
    return x, np.atleast_1d(data[f_col])


def _make_warp(args, f) -> Warp:
    if args.warp == "sqrt":
        alpha = args.alpha if args.alpha is not None else 0.8 * float(np.min(f))
        return Warp.sqrt(alpha)
    if args.warp == "log":
        return Warp.log()
    if args.warp == "probit":
        return Warp.probit(args.lower, args.upper)
    if not args.coeffs:
        raise ValueError("--warp poly needs --coeffs c0,c1,...")
    return Warp.polynomial(tuple(float(c) for c in args.coeffs.split(",")))


def _cmd_fit(args) -> int:
    x, f = _read_xy(args.data)
    warp = _make_warp(args, f)
    g = warp_inverse(warp, f)
    res = fit(x, g, warp, FitConfig(space=f"{args.space}_space", family=args.kernel))
    out = {
        "warp": args.warp,
        "space": res.space,
        "kernel": res.family,
        "mean_constant": res.mean_constant,
        "output_scale": res.kernel.output_scale,
        "length_scales": list(res.kernel.length_scales),
        "objective": res.objective,
        "shift": res.shift,
        "n": int(len(f)),
    }
    print(json.dumps(out))
    return 0


def _cmd_integrate(args) -> int:
    spec = bench.load_spec(args.problem)
    problem = bench.generate_problem(spec, args.seed)
    if spec.is_regression:
        raise ValueError(f"{spec.problem} is a regression problem; use 'bench run'")
    truth = problem.log_z_true
    out = {"problem": problem.name, "method": args.method, "seed": args.seed}
    if args.method in METHODS:
        trace = run_active(problem, args.method, max_evals=args.budget, seed=args.seed,
                           n_qmc=spec.n_qmc)
        if trace.final is None:
            raise RuntimeError(trace.error or "run produced no posterior")
        log_z, log_var = log_evidence_estimate(trace.final)
        out.update(evaluations=trace.n_evals, log_z=log_z, log_variance=log_var,
                   variance_ratio=trace.final.variance_ratio,
                   log_p_true=log_density_of_true_Z(trace.final, truth), error=trace.error)
    else:
        n = args.budget + 3
        if args.method == "mc":
            log_z, evals = mc_estimate(problem, n, args.seed), n
        elif args.method == "qmc":
            log_z, evals = qmc_estimate(problem, n, args.seed), n
        elif args.method == "smc":
            log_z, evals = smc_estimate(problem, n, seed=args.seed, return_evals=True)
        else:
            raise ValueError(f"unknown method {args.method!r}")
        out.update(evaluations=evals, log_z=log_z)
    out.update(log_z_true=truth, abs_error=abs(out["log_z"] - truth))
    print(json.dumps(out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="warpquad", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="benchmark grids")
    bsub = b.add_subparsers(dest="bench_command", required=True)
    r = bsub.add_parser("run", help="run a (method x seed) grid from a spec file")
    r.add_argument("--spec", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--workers", type=int, default=None,
                   help=f"process count (default ${bench.THREADS_ENV} or all cores)")
    r.set_defaults(func=_cmd_bench_run)
    s = bsub.add_parser("summarize", help="median curves, termination means, paired tests")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=_cmd_bench_summarize)

    f = sub.add_parser("fit", help="fit GP hyperparameters to a CSV of x columns and f")
    f.add_argument("--data", required=True)
    f.add_argument("--warp", choices=WARP_CHOICES, required=True)
    f.add_argument("--space", choices=("f", "g"), default="f")
    f.add_argument("--kernel", choices=("matern32", "squared_exponential"), default="matern32")
    f.add_argument("--alpha", type=float, default=None, help="sqrt warp offset")
    f.add_argument("--lower", type=float, default=0.0, help="probit lower bound")
    f.add_argument("--upper", type=float, default=1.0, help="probit upper bound")
    f.add_argument("--coeffs", default=None, help="polynomial coefficients, lowest first")
    f.set_defaults(func=_cmd_fit)

    i = sub.add_parser("integrate", help="one quadrature run on a problem spec")
    i.add_argument("--problem", required=True)
    i.add_argument("--method", choices=METHODS + bench.BASELINES, required=True)
    i.add_argument("--budget", type=int, default=30)
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=_cmd_integrate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as err:  # one diagnostic line, nonzero status
        print(f"warpquad: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
