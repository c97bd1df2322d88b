"""Warps f = xi(g) and the moments they induce on f when g is Gaussian.

All pairwise moment routines broadcast over
``(mu_i, var_i, mu_j, var_j, cov_ij)``, so the same code serves a single
pair, a Gram-shaped matrix, or a block of quadrature nodes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np
from scipy.special import ndtri

from .gp import GpModel, posterior_cov, predict_diag, whitened_cross
from .special import bvn_cdf, bvn_cdf_cov_partials, norm_cdf, norm_pdf

__all__ = [
    "Warp",
    "WarpDomainError",
    "warp_forward",
    "warp_inverse",
    "first_moment",
    "second_moment",
    "induced_moments",
    "induced_moments_sqrt",
    "induced_moments_log",
    "log_moments_log",
    "induced_moments_probit",
    "induced_moments_polynomial",
    "MomentPartials",
    "moment_partials",
    "pair_partials",
    "MomentBelief",
    "variance",
    "probit_log_variance",
    "MAX_POLY_DEGREE",
]

WARP_KINDS = ("sqrt_wsabi", "log_exp", "probit", "polynomial")
MAX_POLY_DEGREE = 6


class WarpDomainError(ValueError):
    """Value outside the range on which the warp is invertible."""


@dataclass(frozen=True)
class Warp:
    """An invertible map from unconstrained g onto the constrained range of f.

    ``sqrt_wsabi``: f = alpha + g**2 (g >= 0 branch on inversion).
    ``log_exp``: f = exp(g + shift).
    ``probit``: f = lower + (upper - lower) * Phi(g).
    ``polynomial``: f = sum(coeffs[k] * g**k).
    """

    kind: str
    alpha: float = 0.0
    lower: float = 0.0
    upper: float = 1.0
    coeffs: tuple = (0.0, 1.0)
    shift: float = 0.0

    def __post_init__(self):
        if self.kind not in WARP_KINDS:
            raise ValueError(f"unknown warp kind {self.kind!r}")
        if self.alpha < 0:
            raise ValueError("sqrt offset alpha must be nonnegative")
        if not self.lower < self.upper:
            raise ValueError("probit interval needs lower < upper")
        coeffs = tuple(float(c) for c in self.coeffs)
        while len(coeffs) > 1 and coeffs[-1] == 0.0:
            coeffs = coeffs[:-1]
        object.__setattr__(self, "coeffs", coeffs)
        if self.kind == "polynomial":
            if len(coeffs) < 2:
                raise ValueError("polynomial warp needs degree >= 1")
            if len(coeffs) - 1 > MAX_POLY_DEGREE:
                raise ValueError(f"polynomial degree capped at {MAX_POLY_DEGREE}")

    @classmethod
    def sqrt(cls, alpha: float = 0.0) -> "Warp":
        return cls("sqrt_wsabi", alpha=float(alpha))

    @classmethod
    def log(cls, shift: float = 0.0) -> "Warp":
        return cls("log_exp", shift=float(shift))

    @classmethod
    def probit(cls, lower: float = 0.0, upper: float = 1.0) -> "Warp":
        return cls("probit", lower=float(lower), upper=float(upper))

    @classmethod
    def polynomial(cls, coeffs) -> "Warp":
        return cls("polynomial", coeffs=tuple(coeffs))

    @classmethod
    def identity(cls) -> "Warp":
        return cls("polynomial", coeffs=(0.0, 1.0))

    @property
    def is_identity(self) -> bool:
        return self.kind == "polynomial" and self.coeffs == (0.0, 1.0)

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def with_shift(self, shift: float) -> "Warp":
        return Warp(self.kind, self.alpha, self.lower, self.upper, self.coeffs, float(shift))


def warp_forward(w: Warp, g):
    g = np.asarray(g, dtype=float)
    if w.kind == "sqrt_wsabi":
        return w.alpha + g * g
    if w.kind == "log_exp":
        return np.exp(g + w.shift)
    if w.kind == "probit":
        return w.lower + w.width * norm_cdf(g)
    return np.polynomial.polynomial.polyval(g, w.coeffs)


def warp_inverse(w: Warp, f):
    f = np.asarray(f, dtype=float)
    if w.kind == "sqrt_wsabi":
        if np.any(f < w.alpha):
            raise WarpDomainError(f"sqrt warp requires f >= alpha = {w.alpha:g}")
        return np.sqrt(f - w.alpha)
    if w.kind == "log_exp":
        if np.any(f <= 0):
            raise WarpDomainError("log warp requires f > 0")
        return np.log(f) - w.shift
    if w.kind == "probit":
        if np.any((f <= w.lower) | (f >= w.upper)):
            raise WarpDomainError(f"probit warp requires {w.lower:g} < f < {w.upper:g}")
        return ndtri((f - w.lower) / w.width)
    return _poly_inverse(w.coeffs, f)


def _poly_inverse(coeffs, f):
    if len(coeffs) == 2:
        return (f - coeffs[0]) / coeffs[1]
    out = np.empty(f.shape)
    for idx, val in np.ndenumerate(f):
        c = np.array(coeffs)
        c[0] -= val
        roots = np.polynomial.polynomial.polyroots(c)
        real = roots[np.abs(roots.imag) <= 1e-9 * (1 + np.abs(roots.real))].real
        real = np.unique(np.round(real, 12))
        if real.size != 1:
            raise WarpDomainError(f"polynomial warp is not invertible at f = {val:g}")
        out[idx] = real[0]
    return out


# --------------------------------------------------------------------------
# Gaussian moments of polynomials (Isserlis pairings)
# --------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _pairing_counts(i: int, j: int) -> tuple:
    """Perfect matchings of i X-copies and j Y-copies, counted by # of XY pairs.

    Enumerated exhaustively; entry r is the number of matchings with r cross pairs.
    """
    counts = [0] * (min(i, j) + 1)
    if (i + j) % 2:
        return tuple(counts)
    labels = (0,) * i + (1,) * j

    def walk(rest, cross):
        if not rest:
            counts[cross] += 1
            return
        first, tail = rest[0], rest[1:]
        for pos in range(len(tail)):
            walk(tail[:pos] + tail[pos + 1:], cross + (first != tail[pos]))

    walk(labels, 0)
    return tuple(counts)


def _central_cross_moment(i, j, var_i, var_j, cov):
    """E[X^i Y^j] for zero-mean jointly Gaussian (X, Y)."""
    total = 0.0
    for r, n_pair in enumerate(_pairing_counts(i, j)):
        if n_pair:
            total = total + n_pair * var_i ** ((i - r) // 2) * var_j ** ((j - r) // 2) * cov ** r
    return total


def _raw_cross_moment(k, l, mu_i, var_i, mu_j, var_j, cov):
    """E[g_i^k g_j^l] for jointly Gaussian (g_i, g_j)."""
    total = 0.0
    for p in range(k + 1):
        for q in range(l + 1):
            if (p + q) % 2:
                continue
            central = _central_cross_moment(p, q, var_i, var_j, cov)
            total = total + comb(k, p) * comb(l, q) * mu_i ** (k - p) * mu_j ** (l - q) * central
    return total


def _raw_moment(k, mu, var):
    """E[g^k] for g ~ N(mu, var)."""
    total = 0.0
    for p in range(0, k + 1, 2):
        dfact = 1
        for t in range(p - 1, 0, -2):
            dfact *= t
        total = total + comb(k, p) * mu ** (k - p) * var ** (p // 2) * dfact
    return total


def _poly_expect(coeffs, mu, var):
    mu, var = np.broadcast_arrays(np.asarray(mu, float), np.asarray(var, float))
    out = np.zeros(mu.shape)
    for k, a in enumerate(coeffs):
        if a:
            out = out + a * _raw_moment(k, mu, var)
    return out


def _poly_pair_expect(p_coeffs, q_coeffs, mu_i, var_i, mu_j, var_j, cov):
    """E[p(g_i) q(g_j)] for polynomials given by coefficient tuples."""
    args = np.broadcast_arrays(*(np.asarray(v, float) for v in (mu_i, var_i, mu_j, var_j, cov)))
    out = np.zeros(args[0].shape)
    for k, a in enumerate(p_coeffs):
        if not a:
            continue
        for l, b in enumerate(q_coeffs):
            if b:
                out = out + a * b * _raw_cross_moment(k, l, *args)
    return out


def _dpoly(coeffs):
    der = tuple(np.polynomial.polynomial.polyder(np.array(coeffs, float)))
    return der if der else (0.0,)


# --------------------------------------------------------------------------
# Moments
# --------------------------------------------------------------------------

def first_moment(w: Warp, mu, var):
    """m = E[xi(g)] for g ~ N(mu, var)."""
    mu, var = np.asarray(mu, float), np.asarray(var, float)
    if w.kind == "sqrt_wsabi":
        return w.alpha + mu * mu + var
    if w.kind == "log_exp":
        return np.exp(mu + 0.5 * var + w.shift)
    if w.kind == "probit":
        return w.lower + w.width * norm_cdf(mu / np.sqrt(1.0 + var))
    return _poly_expect(w.coeffs, mu, var)


def second_moment(w: Warp, mu_i, var_i, mu_j, var_j, cov):
    """Raw second moment C = E[xi(g_i) xi(g_j)]."""
    mu_i, var_i, mu_j, var_j, cov = (np.asarray(v, float) for v in (mu_i, var_i, mu_j, var_j, cov))
    if w.kind == "sqrt_wsabi":
        mi = w.alpha + mu_i * mu_i + var_i
        mj = w.alpha + mu_j * mu_j + var_j
        return 2.0 * cov * cov + 4.0 * mu_i * cov * mu_j + mi * mj
    if w.kind == "log_exp":
        return np.exp(mu_i + mu_j + 0.5 * (var_i + var_j) + cov + 2.0 * w.shift)
    if w.kind == "probit":
        c0 = _probit_c0(mu_i, var_i, mu_j, var_j, cov)
        m0i = norm_cdf(mu_i / np.sqrt(1.0 + var_i))
        m0j = norm_cdf(mu_j / np.sqrt(1.0 + var_j))
        a, s = w.lower, w.width
        return a * a + a * s * (m0i + m0j) + s * s * c0
    return _poly_pair_expect(w.coeffs, w.coeffs, mu_i, var_i, mu_j, var_j, cov)


def _probit_c0(mu_i, var_i, mu_j, var_j, cov):
    s11, s22 = 1.0 + var_i, 1.0 + var_j
    return np.asarray(bvn_cdf(mu_i / np.sqrt(s11), mu_j / np.sqrt(s22), cov / np.sqrt(s11 * s22)))


def covariance(w: Warp, mu_i, var_i, mu_j, var_j, cov):
    """K = C - m_i m_j, using cancellation-free forms where they exist."""
    mu_i, var_i, mu_j, var_j, cov = (np.asarray(v, float) for v in (mu_i, var_i, mu_j, var_j, cov))
    if w.kind == "sqrt_wsabi":
        return 2.0 * cov * cov + 4.0 * mu_i * cov * mu_j
    if w.kind == "log_exp":
        return np.exp(mu_i + mu_j + 0.5 * (var_i + var_j) + 2.0 * w.shift) * np.expm1(cov)
    if w.kind == "probit":
        m0i = norm_cdf(mu_i / np.sqrt(1.0 + var_i))
        m0j = norm_cdf(mu_j / np.sqrt(1.0 + var_j))
        return w.width ** 2 * (_probit_c0(mu_i, var_i, mu_j, var_j, cov) - m0i * m0j)
    return (second_moment(w, mu_i, var_i, mu_j, var_j, cov)
            - first_moment(w, mu_i, var_i) * first_moment(w, mu_j, var_j))


def _graded_nodes(n=16, edges=(0.0, 0.5, 0.9, 0.99, 0.999, 0.9999, 1.0)):
    u, w = np.polynomial.legendre.leggauss(n)
    lo, hi = np.array(edges[:-1])[:, None], np.array(edges[1:])[:, None]
    return (lo + 0.5 * (hi - lo) * (u + 1.0)).ravel(), (0.5 * (hi - lo) * w).ravel()


# panels graded towards u = 1, where the mapped integrand varies like log(1 - u)
_PROBIT_U, _PROBIT_W = _graded_nodes()


def probit_log_variance(mu, var):
    """log Var[Phi(g)] for g ~ N(mu, var), accurate deep in the tails.

    Uses Var = (1/pi) int_a^1 exp(-h^2 (1 + x^2) / 2) / (1 + x^2) dx with
    h = mu / sqrt(1 + var) and a = 1 / sqrt(1 + 2 var), a difference of two
    Owen's T integrals written without cancellation. An exponential change of
    variables absorbs the fast decay away from ``a`` when |h| is large.
    """
    mu, var = np.broadcast_arrays(np.asarray(mu, float), np.asarray(var, float))
    h2 = mu * mu / (1.0 + var)
    root = np.sqrt(1.0 + 2.0 * var)
    a = 1.0 / root
    span = 2.0 * var / (root * (root + 1.0))
    lam = h2 * a
    small = lam * span < 1e-12
    lam_s = np.where(small, 1.0, lam)
    # y = -log(1 - u (1 - e^{-lam span})) / lam maps u in [0, 1] onto [0, span]
    frac = np.where(small, span, -np.expm1(-lam_s * span) / lam_s)
    u = _PROBIT_U.reshape((-1,) + (1,) * mu.ndim)
    y = np.where(small, u * span, -np.log1p(-u * np.where(small, 0.0, lam_s * frac)) / lam_s)
    # the Jacobian of the map cancels the e^{-lam y} factor
    rest = np.exp(-0.5 * h2 * y * y) / (1.0 + (a + y) ** 2)
    integral = frac * np.tensordot(_PROBIT_W, rest, axes=1)
    with np.errstate(divide="ignore"):
        return -0.5 * h2 * (1.0 + a * a) - np.log(np.pi) + np.log(integral)


def variance(w: Warp, mu, var):
    """Var[xi(g)] for g ~ N(mu, var), using the tail-accurate probit form."""
    if w.kind == "probit":
        return w.width ** 2 * np.exp(probit_log_variance(mu, var))
    return np.maximum(covariance(w, mu, var, mu, var, var), 0.0)


def _matrix_args(mu, cov):
    mu = np.asarray(mu, float)
    cov = np.asarray(cov, float)
    var = np.diag(cov)
    return mu[:, None], var[:, None], mu[None, :], var[None, :], cov


def induced_moments(w: Warp, mu, cov):
    """Mean vector m and raw second-moment matrix C of f = xi(g), g ~ N(mu, cov)."""
    args = _matrix_args(mu, cov)
    return first_moment(w, np.asarray(mu, float), np.diag(cov)), second_moment(w, *args)


def induced_moments_sqrt(mu, cov, alpha: float = 0.0):
    return induced_moments(Warp.sqrt(alpha), mu, cov)


def induced_moments_log(mu, cov):
    return induced_moments(Warp.log(), mu, cov)


def log_moments_log(mu, cov, shift: float = 0.0):
    """(log m, log C) of the log-normal pushforward; never overflows."""
    mu = np.asarray(mu, float)
    cov = np.asarray(cov, float)
    log_m = mu + 0.5 * np.diag(cov) + shift
    return log_m, log_m[:, None] + log_m[None, :] + cov


def induced_moments_probit(mu, cov, lower: float = 0.0, upper: float = 1.0):
    return induced_moments(Warp.probit(lower, upper), mu, cov)


def induced_moments_polynomial(coeffs, mu, cov):
    return induced_moments(Warp.polynomial(coeffs), mu, cov)


# --------------------------------------------------------------------------
# Partial derivatives
# --------------------------------------------------------------------------

def first_moment_partials(w: Warp, mu, var):
    """(m, dm/dmu, dm/dvar)."""
    mu, var = np.asarray(mu, float), np.asarray(var, float)
    m = first_moment(w, mu, var)
    if w.kind == "sqrt_wsabi":
        return m, 2.0 * mu, np.ones_like(var)
    if w.kind == "log_exp":
        return m, m, 0.5 * m
    if w.kind == "probit":
        s = np.sqrt(1.0 + var)
        dens = norm_pdf(mu / s)
        return m, w.width * dens / s, -w.width * dens * mu / (2.0 * s ** 3)
    d1 = _dpoly(w.coeffs)
    return m, _poly_expect(d1, mu, var), 0.5 * _poly_expect(_dpoly(d1), mu, var)


def pair_partials(w: Warp, mu_i, var_i, mu_j, var_j, cov):
    """(C, dC/dmu_i, dC/dvar_i, dC/dcov) treating the five arguments as independent.

    Partials w.r.t. the j-side follow by swapping i and j.
    """
    mu_i, var_i, mu_j, var_j, cov = np.broadcast_arrays(
        *(np.asarray(v, float) for v in (mu_i, var_i, mu_j, var_j, cov)))
    if w.kind == "sqrt_wsabi":
        mi = w.alpha + mu_i * mu_i + var_i
        mj = w.alpha + mu_j * mu_j + var_j
        c = 2.0 * cov * cov + 4.0 * mu_i * cov * mu_j + mi * mj
        return c, 4.0 * cov * mu_j + 2.0 * mu_i * mj, mj, 4.0 * cov + 4.0 * mu_i * mu_j
    if w.kind == "log_exp":
        c = second_moment(w, mu_i, var_i, mu_j, var_j, cov)
        return c, c, 0.5 * c, c
    if w.kind == "probit":
        s11, s22 = 1.0 + var_i, 1.0 + var_j
        c0, d11, _, d12 = bvn_cdf_cov_partials(mu_i, mu_j, s11, s22, cov)
        sd1 = np.sqrt(s11)
        cond_sd = np.sqrt(s22 - cov * cov / s11)
        dmu = norm_pdf(mu_i / sd1) / sd1 * norm_cdf((mu_j - cov / s11 * mu_i) / cond_sd)
        m0i = norm_cdf(mu_i / sd1)
        m0j = norm_cdf(mu_j / np.sqrt(s22))
        dm0_dmu = norm_pdf(mu_i / sd1) / sd1
        dm0_dvar = -norm_pdf(mu_i / sd1) * mu_i / (2.0 * sd1 ** 3)
        a, s = w.lower, w.width
        c = a * a + a * s * (m0i + m0j) + s * s * c0
        return (c, a * s * dm0_dmu + s * s * dmu, a * s * dm0_dvar + s * s * d11, s * s * d12)
    p = w.coeffs
    d1 = _dpoly(p)
    args = (mu_i, var_i, mu_j, var_j, cov)
    return (_poly_pair_expect(p, p, *args),
            _poly_pair_expect(d1, p, *args),
            0.5 * _poly_pair_expect(_dpoly(d1), p, *args),
            _poly_pair_expect(d1, d1, *args))


@dataclass(frozen=True)
class MomentPartials:
    """Induced moments and their partials for a finite set of g values.

    ``dC_dmu[i, j]`` is dC_ij/dmu_i, ``dC_dvar[i, j]`` is dC_ij/dSigma_ii and
    ``dC_dcov[i, j]`` is dC_ij/dSigma_ij, each with the other arguments held
    fixed. On the diagonal these are the pairwise-formula partials at i = j;
    see :meth:`chain` for assembling total derivatives.
    """

    m: np.ndarray
    dm_dmu: np.ndarray
    dm_dvar: np.ndarray
    C: np.ndarray
    dC_dmu: np.ndarray
    dC_dvar: np.ndarray
    dC_dcov: np.ndarray

    @property
    def K(self) -> np.ndarray:
        return self.C - np.outer(self.m, self.m)

    def chain(self, dmu: np.ndarray, dcov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Directional derivatives (dm, dC) for perturbations (dmu, dcov) of (mu, Sigma)."""
        dvar = np.diag(dcov)
        dm = self.dm_dmu * dmu + self.dm_dvar * dvar
        a, b = self.dC_dmu * dmu[:, None], self.dC_dvar * dvar[:, None]
        dC = a + a.T + b + b.T + self.dC_dcov * dcov
        return dm, dC


def moment_partials(w: Warp, mu, cov) -> MomentPartials:
    """Moments of f and their partials w.r.t. the Gaussian mean and covariance."""
    mu = np.asarray(mu, float)
    cov = np.asarray(cov, float)
    var = np.diag(cov)
    m, dm_dmu, dm_dvar = first_moment_partials(w, mu, var)
    c, dc_dmu, dc_dvar, dc_dcov = pair_partials(w, *_matrix_args(mu, cov))
    return MomentPartials(m, dm_dmu, dm_dvar, c, dc_dmu, dc_dvar, dc_dcov)


# --------------------------------------------------------------------------
# Moment-matched belief on f
# --------------------------------------------------------------------------

class MomentBelief:
    """GP on f matching the first two moments of xi(g), g ~ the model's posterior.

    For the log warp every quantity is also available in log form, with the
    warp's shift included.
    """

    def __init__(self, model: GpModel, warp: Warp):
        self.model = model
        self.warp = warp

    @property
    def is_log(self) -> bool:
        return self.warp.kind == "log_exp"

    def g_moments(self, xs):
        return predict_diag(self.model, xs)

    def mean(self, xs) -> np.ndarray:
        mu, var = predict_diag(self.model, xs)
        return first_moment(self.warp, mu, var)

    def log_mean(self, xs) -> np.ndarray:
        mu, var = predict_diag(self.model, xs)
        if self.is_log:
            return mu + 0.5 * var + self.warp.shift
        with np.errstate(divide="ignore"):
            return np.log(first_moment(self.warp, mu, var))

    def var(self, xs) -> np.ndarray:
        mu, var = predict_diag(self.model, xs)
        return variance(self.warp, mu, var)

    def log_var(self, xs) -> np.ndarray:
        mu, var = predict_diag(self.model, xs)
        with np.errstate(divide="ignore"):
            if self.is_log:
                # log expm1(v) = v + log(1 - e^-v), finite for large v
                return 2.0 * (mu + 0.5 * var + self.warp.shift) + var + np.log(-np.expm1(-var))
            if self.warp.kind == "probit":
                return 2.0 * np.log(self.warp.width) + probit_log_variance(mu, var)
            return np.log(variance(self.warp, mu, var))

    def cov(self, xa, xb) -> np.ndarray:
        mu_a, var_a = predict_diag(self.model, xa)
        mu_b, var_b = predict_diag(self.model, xb)
        s = posterior_cov(self.model, xa, xb)
        return covariance(self.warp, mu_a[:, None], var_a[:, None], mu_b[None, :], var_b[None, :], s)

    def second(self, xa, xb) -> np.ndarray:
        mu_a, var_a = predict_diag(self.model, xa)
        mu_b, var_b = predict_diag(self.model, xb)
        s = posterior_cov(self.model, xa, xb)
        return second_moment(self.warp, mu_a[:, None], var_a[:, None], mu_b[None, :], var_b[None, :], s)

    def node_cache(self, xs):
        """Quantities reused across covariance blocks of a fixed node set."""
        mu, var = predict_diag(self.model, xs)
        return {"x": np.asarray(xs, float), "mu": mu, "var": var,
                "v": whitened_cross(self.model, xs)}
