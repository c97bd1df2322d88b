"""Fit the log-warped GP to 0.95 exp(-2 x^2) in f-space and in g-space.

Prints the fitted hyperparameters, the held-out predictive log density of f
under each fit and the resulting evidence estimate on [-3, 3].

    python scripts/toy_fit_spaces.py --n 15 --seed 0
"""

import argparse
import math

import numpy as np
from scipy.special import erf

from warpquad import FitConfig, UniformPrior, Warp, fit, functional_posterior_qmc


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    rng = np.random.default_rng(args.seed)
    x = rng.uniform(-5, 5, (args.n, 1))
    lf = math.log(0.95) - 2.0 * x[:, 0] ** 2
    xt = np.linspace(-5, 5, 401)[:, None]
    ft = 0.95 * np.exp(-2.0 * xt[:, 0] ** 2)
    z_true = 0.95 / 6.0 * math.sqrt(math.pi / 2.0) * erf(3.0 * math.sqrt(2.0))
    prior = UniformPrior((-3.0,), (3.0,))

    for space in ("f_space", "g_space"):
        res = fit(x, lf, Warp.log(), FitConfig(space=space))
        belief = res.belief(x, lf)
        mean, var = belief.mean(xt), np.maximum(belief.var(xt), 1e-300)
        lp = np.mean(-0.5 * (np.log(2 * np.pi * var) + (ft - mean) ** 2 / var))
        post = functional_posterior_qmc(belief, prior)
        print(f"{space}: mean {res.mean_constant:.3g}, output scale {res.kernel.output_scale:.3g}, "
              f"length scale {res.kernel.length_scales[0]:.3g}")
        print(f"  held-out mean log p(f) {lp:.3g}; log Z {post.log_mean:.5f} "
              f"(true {math.log(z_true):.5f}), Var/E^2 {post.variance_ratio:.3g}")


if __name__ == "__main__":
    main()
