"""Exact noiseless GP regression with constant mean.

Hyperparameters are packed as ``theta = [mean, log output_scale,
log length_scale_1, ..., log length_scale_d]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.spatial.distance import cdist

__all__ = [
    "KernelSpec",
    "GpModel",
    "NotPositiveDefiniteError",
    "kernel_eval",
    "kernel_matrix",
    "kernel_matrix_grads",
    "stable_cholesky",
    "prior_model",
    "condition",
    "predict",
    "predict_diag",
    "posterior_cov",
    "log_marginal_likelihood_g",
    "lml_grad_g",
    "pack_theta",
    "unpack_theta",
]

KERNEL_FAMILIES = ("matern32", "squared_exponential")
_SQRT3 = np.sqrt(3.0)
_LOG_2PI = np.log(2.0 * np.pi)

JITTER_START = 1e-10
JITTER_MAX = 1e-4


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Gram matrix failed to factorise even after jitter escalation."""


@dataclass(frozen=True)
class KernelSpec:
    family: str
    output_scale: float
    length_scales: tuple

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        ls = tuple(float(v) for v in np.atleast_1d(self.length_scales))
        object.__setattr__(self, "length_scales", ls)
        if not self.output_scale > 0:
            raise ValueError("output_scale must be positive")
        if not all(v > 0 for v in ls):
            raise ValueError("length scales must be positive")

    @property
    def dim(self) -> int:
        return len(self.length_scales)


def _as_points(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if dim == 1 else x[None, :]
    if x.ndim == 0:
        x = x.reshape(1, 1)
    if x.shape[-1] != dim:
        raise ValueError(f"points have dimension {x.shape[-1]}, kernel expects {dim}")
    return x


def kernel_matrix(spec: KernelSpec, x1, x2) -> np.ndarray:
    """Covariance matrix between two point sets."""
    ls = np.asarray(spec.length_scales)
    a = _as_points(x1, spec.dim) / ls
    b = _as_points(x2, spec.dim) / ls
    r2 = cdist(a, b, "sqeuclidean")
    if spec.family == "squared_exponential":
        return spec.output_scale * np.exp(-0.5 * r2)
    sr = _SQRT3 * np.sqrt(r2)
    return spec.output_scale * (1.0 + sr) * np.exp(-sr)


def kernel_eval(spec: KernelSpec, x, xp) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xp = np.atleast_1d(np.asarray(xp, dtype=float))
    if x.shape != (spec.dim,) or xp.shape != (spec.dim,):
        raise ValueError("point dimension does not match length_scales")
    return float(kernel_matrix(spec, x[None, :], xp[None, :])[0, 0])


def kernel_matrix_grads(spec: KernelSpec, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Gram matrix and its derivatives w.r.t. log output scale and log length scales."""
    x = _as_points(x, spec.dim)
    ls = np.asarray(spec.length_scales)
    diff2 = ((x[:, None, :] - x[None, :, :]) / ls) ** 2
    r2 = diff2.sum(axis=-1)
    if spec.family == "squared_exponential":
        k = spec.output_scale * np.exp(-0.5 * r2)
        grads = [k] + [k * diff2[..., i] for i in range(spec.dim)]
    else:
        sr = _SQRT3 * np.sqrt(r2)
        e = np.exp(-sr)
        k = spec.output_scale * (1.0 + sr) * e
        grads = [k] + [3.0 * spec.output_scale * e * diff2[..., i] for i in range(spec.dim)]
    return k, grads


def stable_cholesky(mat: np.ndarray, scale: float | None = None, what: str = "Gram matrix"):
    """Lower Cholesky factor of ``mat + jitter * I`` with escalating jitter.

    Jitter starts at ``1e-10 * scale`` and grows by 10x up to ``1e-4 * scale``.
    Returns ``(chol, jitter)``.
    """
    n = mat.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    if scale is None:
        scale = float(np.max(np.abs(np.diag(mat))))
    if not np.isfinite(scale) or not np.all(np.isfinite(mat)):
        raise NotPositiveDefiniteError(f"{what} has non-finite entries")
    scale = max(scale, np.finfo(float).tiny)
    jitter = JITTER_START * scale
    eye = np.eye(n)
    while jitter <= JITTER_MAX * scale * (1 + 1e-9):
        try:
            return cholesky(mat + jitter * eye, lower=True, check_finite=False), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NotPositiveDefiniteError(
        f"{what} ({n}x{n}) is not positive definite even with jitter {JITTER_MAX:g} x scale")


@dataclass(frozen=True)
class GpModel:
    """GP belief on g: prior hyperparameters plus (possibly empty) conditioning data."""

    mean_constant: float
    kernel: KernelSpec
    train_x: np.ndarray = field(default=None, repr=False)
    train_g: np.ndarray = field(default=None, repr=False)
    noise: float = 0.0
    jitter: float = 0.0
    chol: np.ndarray = field(default=None, repr=False)
    weights: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        d = self.kernel.dim
        if self.train_x is None:
            object.__setattr__(self, "train_x", np.zeros((0, d)))
            object.__setattr__(self, "train_g", np.zeros(0))
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")

    @property
    def n(self) -> int:
        return self.train_x.shape[0]

    @property
    def dim(self) -> int:
        return self.kernel.dim

    @property
    def theta(self) -> np.ndarray:
        return pack_theta(self.mean_constant, self.kernel)


def pack_theta(mean_constant: float, kernel: KernelSpec) -> np.ndarray:
    return np.concatenate([[mean_constant, np.log(kernel.output_scale)],
                           np.log(kernel.length_scales)])


def unpack_theta(theta, family: str = "matern32") -> tuple[float, KernelSpec]:
    theta = np.asarray(theta, dtype=float)
    return float(theta[0]), KernelSpec(family, float(np.exp(theta[1])), tuple(np.exp(theta[2:])))


def prior_model(mean_constant: float, kernel: KernelSpec, noise: float = 0.0) -> GpModel:
    return GpModel(float(mean_constant), kernel, noise=noise)


def condition(prior: GpModel, xs, gs) -> GpModel:
    """Condition on noiseless observations (appended to any existing data)."""
    xs = _as_points(xs, prior.dim)
    gs = np.asarray(gs, dtype=float).ravel()
    if xs.shape[0] != gs.shape[0]:
        raise ValueError(f"{xs.shape[0]} locations but {gs.shape[0]} observations")
    x = np.vstack([prior.train_x, xs])
    g = np.concatenate([prior.train_g, gs])
    gram = kernel_matrix(prior.kernel, x, x)
    if prior.noise:
        gram[np.diag_indices_from(gram)] += prior.noise
    chol, jitter = stable_cholesky(gram, prior.kernel.output_scale,
                                   what=f"Gram matrix conditioning on {len(g)} points")
    weights = cho_solve((chol, True), g - prior.mean_constant, check_finite=False)
    return replace(prior, train_x=x, train_g=g, chol=chol, jitter=jitter, weights=weights)


def _cross(model: GpModel, xs):
    xs = _as_points(xs, model.dim)
    if model.n == 0:
        return xs, None, None
    kx = kernel_matrix(model.kernel, xs, model.train_x)
    v = solve_triangular(model.chol, kx.T, lower=True, check_finite=False)
    return xs, kx, v


def predict(model: GpModel, xs) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean vector and full covariance matrix at ``xs``."""
    xs, kx, v = _cross(model, xs)
    cov = kernel_matrix(model.kernel, xs, xs)
    mean = np.full(xs.shape[0], model.mean_constant)
    if kx is not None:
        mean = mean + kx @ model.weights
        cov = cov - v.T @ v
    return mean, 0.5 * (cov + cov.T)


def predict_diag(model: GpModel, xs) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and marginal variance at ``xs``; variance clipped at zero."""
    xs, kx, v = _cross(model, xs)
    var = np.full(xs.shape[0], model.kernel.output_scale)
    mean = np.full(xs.shape[0], model.mean_constant)
    if kx is not None:
        mean = mean + kx @ model.weights
        var = var - np.einsum("ij,ij->j", v, v)
    return mean, np.maximum(var, 0.0)


def posterior_cov(model: GpModel, xa, xb, va=None, vb=None) -> np.ndarray:
    """Posterior cross-covariance between two point sets.

    ``va``/``vb`` may carry precomputed ``L^-1 k(X, x)`` blocks.
    """
    xa = _as_points(xa, model.dim)
    xb = _as_points(xb, model.dim)
    cov = kernel_matrix(model.kernel, xa, xb)
    if model.n:
        if va is None:
            va = _cross(model, xa)[2]
        if vb is None:
            vb = _cross(model, xb)[2]
        cov = cov - va.T @ vb
    return cov


def whitened_cross(model: GpModel, xs) -> np.ndarray | None:
    """``L^-1 k(X, xs)`` for reuse across posterior covariance blocks."""
    return _cross(model, xs)[2]


def log_marginal_likelihood_g(model: GpModel) -> float:
    """Gaussian log density of the training targets under the prior."""
    if model.n < 1:
        raise ValueError("marginal likelihood needs at least one observation")
    resid = model.train_g - model.mean_constant
    return float(-0.5 * resid @ model.weights - np.log(np.diag(model.chol)).sum()
                 - 0.5 * model.n * _LOG_2PI)


def lml_grad_g(model: GpModel) -> np.ndarray:
    """Gradient of :func:`log_marginal_likelihood_g` w.r.t. ``theta``."""
    if model.n < 1:
        raise ValueError("marginal likelihood needs at least one observation")
    _, grads = kernel_matrix_grads(model.kernel, model.train_x)
    # jitter is a fixed multiple of the output scale, so it moves with log sigma^2
    grads[0] = grads[0] + model.jitter * np.eye(model.n)
    alpha = model.weights
    kinv = cho_solve((model.chol, True), np.eye(model.n), check_finite=False)
    inner = np.outer(alpha, alpha) - kinv
    out = np.empty(len(grads) + 1)
    out[0] = alpha.sum()
    for i, dk in enumerate(grads):
        out[i + 1] = 0.5 * np.sum(inner * dk)
    return out
