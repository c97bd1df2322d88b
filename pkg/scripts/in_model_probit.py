"""Bounded regression on inverse-probit GP draws: f-space vs g-space fitting.

Each trial draws a 2-D Matern-3/2 function, squashes it through the normal
CDF, trains on 20% of 200 points and scores the moment-matched predictive
distribution on the rest.

    python scripts/in_model_probit.py --trials 100
"""

import argparse
import time

import numpy as np

from warpquad.bench import REGRESSION_METHODS, BenchmarkSpec, generate_problem, regression_row


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--methods", default=",".join(REGRESSION_METHODS))
    p.add_argument("--output-scale", type=float, default=8.0)
    p.add_argument("--length-scale", type=float, default=0.3)
    args = p.parse_args()

    methods = tuple(args.methods.split(","))
    spec = BenchmarkSpec(problem="in_model_probit", dim=2, output_scale=args.output_scale,
                         length_scales=(args.length_scale,), methods=methods,
                         seeds=tuple(range(args.trials)))
    mll = {m: [] for m in methods}
    rmse = {m: [] for m in methods}
    t0 = time.perf_counter()
    for seed in spec.seeds:
        data = generate_problem(spec, seed)
        for m in methods:
            row = regression_row(m, seed, data)
            mll[m].append(row.mll)
            rmse[m].append(row.rmse)
    print(f"{args.trials} trials in {time.perf_counter() - t0:.0f}s")
    print(f"{'method':10s} {'median MLL':>11s} {'mean MLL':>11s} {'median RMSE':>12s}")
    for m in methods:
        print(f"{m:10s} {np.median(mll[m]):11.3f} {np.mean(mll[m]):11.3f} {np.median(rmse[m]):12.4f}")
    if {"probit_f", "probit_g", "none"} <= set(methods):
        f, g, n = (np.array(mll[k]) for k in ("probit_f", "probit_g", "none"))
        print(f"probit_f MLL above probit_g and none in {int(np.sum((f > g) & (f > n)))}"
              f"/{args.trials} trials")


if __name__ == "__main__":
    main()
