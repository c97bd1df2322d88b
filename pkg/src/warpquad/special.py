"""Scalar special functions and low-discrepancy point sets.

The bivariate normal CDF follows Genz's (2004) refinement of the
Drezner-Wesolowsky method, vectorised over numpy arrays; a 20-point
Gauss-Legendre rule is used in every correlation regime, which keeps the
absolute error near machine precision.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr
from scipy.stats import qmc

__all__ = [
    "Bvn",
    "LdsSpec",
    "norm_pdf",
    "norm_cdf",
    "bvn_pdf",
    "bvn_cdf",
    "orthant_second_moments",
    "trunc_bvn_raw_seconds",
    "bvn_cdf_cov_partials",
    "lds_points",
]

_TWO_PI = 2.0 * np.pi
_SQRT_TWO_PI = np.sqrt(_TWO_PI)
# |rho| above this is treated as perfectly (anti-)correlated
_RHO_SINGULAR = 1.0 - 1e-12
# Phi(40) == 1 and Phi(-40) == 0 in double precision
_CLIP = 40.0

_x, _w = np.polynomial.legendre.leggauss(20)
_GL_X = _x[_x > 0]
_GL_W = _w[_x > 0]


def norm_pdf(x):
    """Standard normal density."""
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / _SQRT_TWO_PI


def norm_cdf(x):
    """Standard normal distribution function."""
    return ndtr(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class Bvn:
    """Lower-orthant query for a standard bivariate normal."""

    h: float
    k: float
    rho: float

    def __post_init__(self):
        if not abs(self.rho) <= 1.0:
            raise ValueError(f"correlation must lie in [-1, 1], got {self.rho}")

    def cdf(self) -> float:
        return float(bvn_cdf(self.h, self.k, self.rho))


def bvn_pdf(h, k, rho):
    """Density of the standard bivariate normal with correlation ``rho``."""
    h, k, rho = (np.asarray(v, dtype=float) for v in (h, k, rho))
    one_m = (1.0 - rho) * (1.0 + rho)
    q = (h * h - 2.0 * rho * h * k + k * k) / one_m
    return np.exp(-0.5 * q) / (_TWO_PI * np.sqrt(one_m))


def _bvnu(h, k, r):
    """Upper-orthant probability P(X > h, Y > k); inputs are flat arrays."""
    out = np.empty_like(h)
    small = np.abs(r) < 0.925

    if small.any():
        hh, kk, rr = h[small], k[small], r[small]
        hk = (hh * kk)[:, None]
        hs = (0.5 * (hh * hh + kk * kk))[:, None]
        asr = np.arcsin(rr)[:, None]
        total = 0.0
        for sgn in (-1.0, 1.0):
            sn = np.sin(asr * (1.0 + sgn * _GL_X) / 2.0)
            total = total + _GL_W * np.exp((sn * hk - hs) / (1.0 - sn * sn))
        out[small] = total.sum(axis=1) * asr[:, 0] / (2.0 * _TWO_PI) + ndtr(-hh) * ndtr(-kk)

    big = ~small
    if big.any():
        hh, kk, rr = h[big], k[big], r[big]
        kk = np.where(rr < 0, -kk, kk)
        hk = hh * kk
        bvn = np.zeros_like(hh)
        interior = np.abs(rr) < 1.0
        with np.errstate(all="ignore"):
            as_ = (1.0 - rr) * (1.0 + rr)
            a = np.sqrt(as_)
            bs = (hh - kk) ** 2
            c = (4.0 - hk) / 8.0
            d = (12.0 - hk) / 16.0
            asr = -(bs / as_ + hk) / 2.0
            term = a * np.exp(asr) * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0
                                      + c * d * as_ * as_ / 5.0)
            bvn = np.where(interior & (asr > -100.0), term, 0.0)
            b = np.sqrt(bs)
            sp = _SQRT_TWO_PI * ndtr(-b / a)
            term = np.exp(-hk / 2.0) * sp * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0)
            bvn = bvn - np.where(interior & (hk > -100.0), term, 0.0)
            a2 = (a / 2.0)[:, None]
            bs2, hk2, c2, d2 = bs[:, None], hk[:, None], c[:, None], d[:, None]
            for sgn in (-1.0, 1.0):
                xs = (a2 * (sgn * _GL_X + 1.0)) ** 2
                rs = np.sqrt(1.0 - xs)
                asr = -(bs2 / xs + hk2) / 2.0
                sp = 1.0 + c2 * xs * (1.0 + d2 * xs)
                ep = np.exp(-hk2 * xs / (2.0 * (1.0 + rs) ** 2)) / rs
                contrib = np.where(asr > -100.0, a2 * _GL_W * np.exp(asr) * (ep - sp), 0.0)
                bvn = bvn + np.where(interior, contrib.sum(axis=1), 0.0)
        bvn = -bvn / _TWO_PI
        pos = rr > 0
        res = np.where(pos, bvn + ndtr(-np.maximum(hh, kk)), 0.0)
        lower = np.where(hh < 0, ndtr(kk) - ndtr(hh), ndtr(-hh) - ndtr(-kk))
        neg_val = np.where(hh >= kk, -bvn, lower - bvn)
        out[big] = np.where(pos, res, neg_val)

    return np.clip(out, 0.0, 1.0)


def bvn_cdf(h, k, rho):
    """P(X <= h, Y <= k) for a standard bivariate normal with correlation ``rho``.

    Broadcasts over its arguments. Absolute error is below 1e-12 in practice.
    For ``|rho| > 1 - 1e-12`` the perfectly correlated limit is returned.

    Raises
    ------
    ValueError
        If any ``|rho| > 1``.
    """
    h, k, rho = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (h, k, rho)))
    if np.any(np.abs(rho) > 1.0 + 1e-14):
        raise ValueError("bvn_cdf: correlation outside [-1, 1]")
    shape = h.shape
    hf = np.clip(h.ravel(), -_CLIP, _CLIP)
    kf = np.clip(k.ravel(), -_CLIP, _CLIP)
    rf = np.clip(rho.ravel(), -1.0, 1.0)

    out = np.empty_like(hf)
    sing = np.abs(rf) > _RHO_SINGULAR
    reg = ~sing
    if reg.any():
        out[reg] = _bvnu(-hf[reg], -kf[reg], rf[reg])
    if sing.any():
        ph, pk = ndtr(hf[sing]), ndtr(kf[sing])
        out[sing] = np.where(rf[sing] > 0, np.minimum(ph, pk), np.maximum(0.0, ph + pk - 1.0))
    out = out.reshape(shape)
    return out if shape else float(out)


def orthant_second_moments(h, k, s11, s22, s12):
    """Unnormalised moments of N(0, S) over the orthant (-inf, h] x (-inf, k].

    Returns ``(P, E[b1^2 1], E[b2^2 1], E[b1 b2 1])`` where ``P`` is the
    orthant probability and the expectations are taken against the
    untruncated density restricted to the orthant.
    """
    h, k, s11, s22, s12 = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (h, k, s11, s22, s12)))
    sd1, sd2 = np.sqrt(s11), np.sqrt(s22)
    a, b = h / sd1, k / sd2
    rho = s12 / (sd1 * sd2)
    if np.any(np.abs(rho) >= 1.0):
        raise ValueError("orthant_second_moments: covariance is singular")
    s = np.sqrt((1.0 - rho) * (1.0 + rho))
    p = np.asarray(bvn_cdf(a, b, rho))
    t1 = a * norm_pdf(a) * norm_cdf((b - rho * a) / s)
    t2 = b * norm_pdf(b) * norm_cdf((a - rho * b) / s)
    q = bvn_pdf(a, b, rho)
    exx = p - t1 - rho * rho * t2 + rho * s * s * q
    eyy = p - rho * rho * t1 - t2 + rho * s * s * q
    exy = rho * (p - t1 - t2) + s * s * q
    return p, s11 * exx, s22 * eyy, sd1 * sd2 * exy


def trunc_bvn_raw_seconds(mu_i, mu_j, var_i, var_j, cov_ij):
    """Raw second moments over (-inf, mu_i] x (-inf, mu_j] under N(0, Sigma + I).

    ``Sigma`` is the 2x2 covariance ``[[var_i, cov_ij], [cov_ij, var_j]]``.
    Returns ``(E[b1^2], E[b2^2], E[b1 b2])``, unnormalised.
    """
    _, e11, e22, e12 = orthant_second_moments(mu_i, mu_j, var_i + 1.0, var_j + 1.0, cov_ij)
    return e11, e22, e12


def bvn_cdf_cov_partials(h, k, s11, s22, s12):
    """Value and covariance partials of P(b1 <= h, b2 <= k), b ~ N(0, S).

    Returns ``(P, dP/ds11, dP/ds22, dP/ds12)`` with ``s12`` treated as a
    single symmetric parameter. Uses the Gaussian identity
    ``dP/dS = 1/2 E[(S^-1 b b^T S^-1 - S^-1) 1_orthant]``.
    """
    p, e11, e22, e12 = orthant_second_moments(h, k, s11, s22, s12)
    det = s11 * s22 - s12 * s12
    i11, i22, i12 = s22 / det, s11 / det, -s12 / det
    # G = S^-1 M S^-1 - P S^-1, symmetric 2x2
    a11 = i11 * e11 + i12 * e12
    a12 = i11 * e12 + i12 * e22
    a21 = i12 * e11 + i22 * e12
    a22 = i12 * e12 + i22 * e22
    g11 = a11 * i11 + a12 * i12 - p * i11
    g22 = a21 * i12 + a22 * i22 - p * i22
    g12 = a11 * i12 + a12 * i22 - p * i12
    return p, 0.5 * g11, 0.5 * g22, g12


@dataclass(frozen=True)
class LdsSpec:
    """Low-discrepancy sequence configuration."""

    family: str = "sobol_like"
    dimension: int = 1
    scrambled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("sobol_like", "halton_like"):
            raise ValueError(f"unknown sequence family {self.family!r}")
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")


_MAX_DIM = {"sobol_like": 21201, "halton_like": 1000}


def lds_points(spec: LdsSpec, n: int) -> np.ndarray:
    """First ``n`` points of the configured sequence, shape (n, d), in [0, 1)^d.

    Unscrambled sequences skip the origin, so the first point is the
    radical-inverse midpoint 0.5 in every coordinate.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if spec.dimension > _MAX_DIM[spec.family]:
        raise ValueError(f"dimension {spec.dimension} unsupported for {spec.family}")
    cls = qmc.Sobol if spec.family == "sobol_like" else qmc.Halton
    engine = cls(d=spec.dimension, scramble=spec.scrambled, seed=spec.seed)
    if not spec.scrambled:
        engine.fast_forward(1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return engine.random(n)
