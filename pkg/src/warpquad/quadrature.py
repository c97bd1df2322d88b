"""Posterior beliefs on Z = int f(x) pi(x) dx.

Closed forms cover the squared-exponential / Gaussian-prior case; every
other combination is estimated by QMC averages of the moment-matched mean
and covariance. Results are carried as log-scaled
:class:`IntegralPosterior` objects so that likelihood-scale integrands never
overflow.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp, ndtri

from .gp import GpModel, kernel_matrix, posterior_cov, predict_diag
from .special import LdsSpec, lds_points
from .transforms import MomentBelief, Warp, covariance

__all__ = [
    "GaussianPrior",
    "UniformPrior",
    "QuadratureProblem",
    "IntegralPosterior",
    "default_n_qmc",
    "prior_points",
    "bmc_posterior",
    "functional_posterior_qmc",
    "taylor_log_mean",
    "taylor_log_cov",
    "taylor_log_moments",
    "log_evidence_estimate",
    "log_density_of_true_Z",
    "MAX_TAYLOR_ORDER",
]

MAX_TAYLOR_ORDER = 4
DEFAULT_BLOCK = 1024
DEFAULT_N_VAR = 1024


@dataclass(frozen=True)
class GaussianPrior:
    """Axis-aligned Gaussian prior N(mean, diag(var))."""

    mean: tuple
    var: tuple

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(v) for v in np.atleast_1d(self.mean)))
        object.__setattr__(self, "var", tuple(float(v) for v in np.atleast_1d(self.var)))
        if len(self.mean) != len(self.var) or not all(v > 0 for v in self.var):
            raise ValueError("Gaussian prior needs matching mean/var with var > 0")

    @property
    def dim(self) -> int:
        return len(self.mean)

    def map_unit(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(self.mean) + np.sqrt(self.var) * ndtri(u)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        m, v = np.asarray(self.mean), np.asarray(self.var)
        z = (np.atleast_2d(x) - m) ** 2 / v
        return -0.5 * (z.sum(-1) + np.log(2 * np.pi * v).sum())


@dataclass(frozen=True)
class UniformPrior:
    """Uniform prior on the box [lower, upper]."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(v) for v in np.atleast_1d(self.lower)))
        object.__setattr__(self, "upper", tuple(float(v) for v in np.atleast_1d(self.upper)))
        if len(self.lower) != len(self.upper) or not all(
                a < b for a, b in zip(self.lower, self.upper)):
            raise ValueError("uniform prior needs lower < upper in every coordinate")

    @property
    def dim(self) -> int:
        return len(self.lower)

    def map_unit(self, u: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        return lo + (hi - lo) * u

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        x = np.atleast_2d(x)
        inside = np.all((x >= lo) & (x <= hi), axis=-1)
        return np.where(inside, -np.log(hi - lo).sum(), -np.inf)


@dataclass
class QuadratureProblem:
    """An integrand (given as log f) against a prior, inside a search box."""

    prior: object
    log_f: Callable[[np.ndarray], np.ndarray]
    lower: tuple
    upper: tuple
    log_z_true: float | None = None
    name: str = ""
    reference_grade: bool = False

    @property
    def dim(self) -> int:
        return self.prior.dim

    def evaluate(self, x) -> np.ndarray:
        out = np.asarray(self.log_f(np.atleast_2d(np.asarray(x, dtype=float))), dtype=float)
        return out.reshape(-1)


@dataclass(frozen=True)
class IntegralPosterior:
    """Gaussian belief on Z stored as ``log|E[Z]|``, ``Var[Z] / E[Z]^2`` and sign."""

    log_mean: float
    variance_ratio: float
    method: str = ""
    shift: float = 0.0
    sign: float = 1.0
    log_variance: float | None = None

    def __post_init__(self):
        if not self.variance_ratio >= 0:
            raise ValueError("variance_ratio must be nonnegative")
        if self.log_variance is None:
            with np.errstate(divide="ignore", invalid="ignore"):
                lv = float(np.log(self.variance_ratio) + 2.0 * self.log_mean)
            object.__setattr__(self, "log_variance", lv)


def default_n_qmc(dim: int) -> int:
    return 2 ** 14 if dim <= 2 else 2 ** 16


def prior_points(prior, n: int, seed: int = 0, family: str = "sobol_like") -> np.ndarray:
    """``n`` scrambled QMC points mapped onto the prior."""
    u = lds_points(LdsSpec(family, prior.dim, True, seed), n)
    return prior.map_unit(u)


def _make_posterior(mean_scaled, var_scaled, log_scale, method, shift):
    """Build a posterior from E[Z] and Var[Z] expressed in units of exp(log_scale)."""
    var_scaled = max(float(var_scaled), 0.0)
    sign = float(np.sign(mean_scaled)) if mean_scaled != 0 else 1.0
    with np.errstate(divide="ignore"):
        log_mean = float(np.log(abs(mean_scaled)) + log_scale)
        log_var = float(np.log(var_scaled) + 2.0 * log_scale)
        ratio = var_scaled / mean_scaled ** 2 if mean_scaled != 0 else np.inf
    return IntegralPosterior(log_mean, float(ratio), method, float(shift), sign, log_var)


# --------------------------------------------------------------------------
# closed form
# --------------------------------------------------------------------------

def bmc_posterior(model: GpModel, prior, log_scale: float = 0.0, n_qmc: int | None = None,
                  seed: int = 0, method: str = "bmc") -> IntegralPosterior:
    """Belief on Z for an unwarped GP on f.

    SE kernel with a Gaussian prior uses the kernel-mean closed forms; any
    other pair falls through to :func:`functional_posterior_qmc`.
    ``log_scale`` is added to the log mean (the model sees f / exp(log_scale)).
    """
    if model.kernel.family != "squared_exponential" or not isinstance(prior, GaussianPrior):
        return functional_posterior_qmc(MomentBelief(model, Warp.identity()), prior,
                                        n_qmc=n_qmc, seed=seed, log_scale=log_scale,
                                        method=method)
    ls2 = np.asarray(model.kernel.length_scales) ** 2
    b = np.asarray(prior.mean)
    bv = np.asarray(prior.var)
    sig = model.kernel.output_scale
    kk = sig * np.prod(np.sqrt(ls2 / (ls2 + 2.0 * bv)))
    mean = model.mean_constant
    var = kk
    if model.n:
        z = sig * np.prod(np.sqrt(ls2 / (ls2 + bv))) * np.exp(
            -0.5 * (((model.train_x - b) ** 2) / (ls2 + bv)).sum(-1))
        mean = mean + z @ model.weights
        v = solve_triangular(model.chol, z, lower=True)
        var = kk - v @ v
    return _make_posterior(mean, var, log_scale, method, log_scale)


# --------------------------------------------------------------------------
# QMC functionals
# --------------------------------------------------------------------------

def _block_pairs(n: int, block: int):
    starts = list(range(0, n, block))
    for i, a in enumerate(starts):
        for b in starts[i:]:
            yield slice(a, min(a + block, n)), slice(b, min(b + block, n)), a == b


def _log_expm1_signed(s):
    """(log|expm1(s)|, sign) without overflow for large s."""
    a = np.abs(s)
    with np.errstate(divide="ignore"):
        mag = np.where(s > 0, s + np.log(-np.expm1(-a)), np.log(-np.expm1(-a)))
    return mag, np.sign(s)


def _double_average(belief: MomentBelief, x, log_weight, block):
    """sum_ab of the f-space covariance over a node set, streamed in blocks.

    For the log warp the summand is exp(w_a + w_b) expm1(S_ab) with
    ``log_weight = w``; the sum is accumulated in log form and returned as
    its logarithm (-inf when the positive and negative parts cancel or the
    negative part dominates by rounding). For other warps ``log_weight`` is
    unused and the plain sum of covariances is returned.
    """
    model = belief.model
    mu, var = predict_diag(model, x)
    v = None
    if model.n:
        v = solve_triangular(model.chol, kernel_matrix(model.kernel, model.train_x, x),
                             lower=True, check_finite=False)
    total = 0.0
    log_pos, log_neg = [], []
    for sa, sb, diag in _block_pairs(x.shape[0], block):
        s = kernel_matrix(model.kernel, x[sa], x[sb])
        if v is not None:
            s = s - v[:, sa].T @ v[:, sb]
        if belief.is_log:
            mag, sign = _log_expm1_signed(s)
            terms = log_weight[sa, None] + log_weight[None, sb] + mag
            extra = 0.0 if diag else np.log(2.0)
            if (sign > 0).any():
                log_pos.append(logsumexp(terms[sign > 0]) + extra)
            if (sign < 0).any():
                log_neg.append(logsumexp(terms[sign < 0]) + extra)
        else:
            kab = covariance(belief.warp, mu[sa, None], var[sa, None], mu[None, sb],
                             var[None, sb], s)
            part = kab.sum()
            total += part if diag else 2.0 * part
    if not belief.is_log:
        return total
    lp = logsumexp(log_pos) if log_pos else -np.inf
    ln = logsumexp(log_neg) if log_neg else -np.inf
    if not lp > ln:
        return -np.inf
    return float(lp + np.log(-np.expm1(ln - lp))) if np.isfinite(ln) else float(lp)


def functional_posterior_qmc(belief: MomentBelief, prior, n_qmc: int | None = None,
                             n_var: int | None = None, seed: int = 0,
                             block: int = DEFAULT_BLOCK, log_scale: float = 0.0,
                             method: str = "qmc", points: np.ndarray | None = None
                             ) -> IntegralPosterior:
    """QMC estimate of N(L[m], L^2[K]) for a moment-matched belief.

    The mean uses ``n_qmc`` prior-mapped scrambled Sobol points; the double
    sum for the variance uses their first ``n_var`` points. The log warp's
    shift (if any) and ``log_scale`` are added to the log mean; the variance
    ratio is unaffected by either.
    """
    dim = prior.dim
    if n_qmc is None:
        n_qmc = default_n_qmc(dim)
    if n_qmc < 2:
        raise ValueError("n_qmc must be >= 2")
    if n_var is None:
        n_var = min(n_qmc, DEFAULT_N_VAR)
    n_var = min(n_var, n_qmc)
    x = prior_points(prior, n_qmc, seed) if points is None else np.asarray(points, float)
    shift = log_scale + (belief.warp.shift if belief.is_log else 0.0)

    if belief.is_log:
        logm = belief.log_mean(x)
        bad = ~np.isfinite(logm)
        if bad.any():
            raise FloatingPointError(f"non-finite moment at x = {x[np.argmax(bad)]}")
        log_mean = float(logsumexp(logm) - np.log(len(logm)))
        log_var = _double_average(belief, x[:n_var], logm[:n_var], block) - 2.0 * np.log(n_var)
        with np.errstate(over="ignore"):
            ratio = float(np.exp(log_var - 2.0 * log_mean))
        return IntegralPosterior(log_mean + log_scale, ratio, method, float(shift), 1.0,
                                 float(log_var + 2.0 * log_scale))

    m = belief.mean(x)
    bad = ~np.isfinite(m)
    if bad.any():
        raise FloatingPointError(f"non-finite moment at x = {x[np.argmax(bad)]}")
    mean = float(np.mean(m))
    var = _double_average(belief, x[:n_var], None, block) / n_var ** 2
    return _make_posterior(mean, var, log_scale, method, shift)


# --------------------------------------------------------------------------
# Taylor approximation of log-warp moments
# --------------------------------------------------------------------------

def _check_order(order: int):
    if not 1 <= order <= MAX_TAYLOR_ORDER:
        raise ValueError(f"Taylor order must be in 1..{MAX_TAYLOR_ORDER}")


def taylor_log_mean(mu, var, order: int):
    """Truncation of exp(mu + var/2) at total degree ``order`` in (mu, var)."""
    _check_order(order)
    u = np.asarray(mu, float) + 0.5 * np.asarray(var, float)
    return sum(u ** k / factorial(k) for k in range(order + 1))


def taylor_log_cov(mu_i, var_i, mu_j, var_j, cov, order: int):
    """Truncation of m_i m_j (exp(cov) - 1) at total degree ``order``.

    Every retained term carries at least one factor of ``cov``, so the
    approximation vanishes exactly when the g-values are uncorrelated.
    """
    _check_order(order)
    u = np.asarray(mu_i, float) + 0.5 * np.asarray(var_i, float)
    v = np.asarray(mu_j, float) + 0.5 * np.asarray(var_j, float)
    s = np.asarray(cov, float)
    total = 0.0
    for a in range(order + 1):
        for b in range(order + 1 - a):
            for c in range(1, order + 1 - a - b):
                total = total + (u ** a / factorial(a)) * (v ** b / factorial(b)) * (
                    s ** c / factorial(c))
    return total


class taylor_log_moments:
    """Approximate (m, K) evaluators for the log warp built from a GP on g."""

    def __init__(self, model: GpModel, order: int):
        _check_order(order)
        self.model = model
        self.order = order

    def mean(self, xs):
        mu, var = predict_diag(self.model, xs)
        return taylor_log_mean(mu, var, self.order)

    def cov(self, xa, xb):
        mu_a, var_a = predict_diag(self.model, xa)
        mu_b, var_b = predict_diag(self.model, xb)
        s = posterior_cov(self.model, xa, xb)
        return taylor_log_cov(mu_a[:, None], var_a[:, None], mu_b[None, :], var_b[None, :],
                              s, self.order)


# --------------------------------------------------------------------------
# evidence summaries
# --------------------------------------------------------------------------

def log_evidence_estimate(post: IntegralPosterior) -> tuple[float, float]:
    """(log E[Z], log Var[Z]); log E is -inf for a nonpositive mean."""
    log_z = post.log_mean if post.sign > 0 else -np.inf
    return log_z, post.log_variance


def log_density_of_true_Z(post: IntegralPosterior, log_z_true: float) -> float:
    """log N(Z* | E[Z], Var[Z]) evaluated without leaving log scale.

    A zero variance with Z* != E[Z] gives -inf.
    """
    r = post.variance_ratio
    if np.isfinite(r):
        diff_scaled = np.exp(log_z_true - post.log_mean) - post.sign
        if r == 0:
            return np.inf if diff_scaled == 0 else -np.inf
        return float(-0.5 * (np.log(2.0 * np.pi) + np.log(r) + 2.0 * post.log_mean)
                     - 0.5 * diff_scaled ** 2 / r)
    # E[Z] is zero or negligible: measure in units of the standard deviation
    log_sd = 0.5 * post.log_variance
    if not np.isfinite(log_sd):
        return -np.inf
    z = np.exp(log_z_true - log_sd) - post.sign * np.exp(post.log_mean - log_sd)
    return float(-0.5 * np.log(2.0 * np.pi) - log_sd - 0.5 * z * z)
