"""Hyperparameter fitting in g-space (transformed data) or f-space (original data).

f-space fitting maximises the marginal likelihood of the f observations
under the moment-matched prior N(m(theta), K(theta)); its gradient runs
through :func:`warpquad.transforms.moment_partials`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve
from scipy.optimize import minimize

from .gp import (
    GpModel,
    NotPositiveDefiniteError,
    condition,
    kernel_matrix_grads,
    lml_grad_g,
    log_marginal_likelihood_g,
    stable_cholesky,
    unpack_theta,
)
from .transforms import MomentBelief, Warp, covariance, moment_partials, warp_forward

__all__ = [
    "FitConfig",
    "FitResult",
    "FitError",
    "PENALTY",
    "shift_normalize",
    "unshift",
    "nll_g_space",
    "grad_nll_g_space",
    "nll_f_space",
    "grad_nll_f_space",
    "f_space_objective",
    "g_space_objective",
    "fit",
]

log = logging.getLogger(__name__)

PENALTY = 1e10
_LOG_2PI = np.log(2.0 * np.pi)


class FitError(RuntimeError):
    """Every restart of the optimiser failed."""

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


def shift_normalize(g) -> tuple[np.ndarray, float]:
    """Shift so the maximum is exactly zero; returns ``(shifted, c)`` with c = max."""
    g = np.asarray(g, dtype=float)
    if g.size == 0:
        raise ValueError("shift_normalize needs at least one value")
    c = float(np.max(g))
    return g - c, c


def unshift(g, c: float) -> np.ndarray:
    return np.asarray(g, dtype=float) + c


# --------------------------------------------------------------------------
# objectives
# --------------------------------------------------------------------------

def g_space_objective(theta, x, g, family="matern32", noise=0.0):
    """Negative log marginal likelihood of g and its gradient; ``(value, grad, ok)``."""
    mean, kern = unpack_theta(theta, family)
    try:
        model = condition(GpModel(mean, kern, noise=noise), x, g)
    except (NotPositiveDefiniteError, ValueError):
        return PENALTY, np.zeros(len(theta)), False
    val = -log_marginal_likelihood_g(model)
    grad = -lml_grad_g(model)
    if not (np.isfinite(val) and np.all(np.isfinite(grad))):
        return PENALTY, np.zeros(len(theta)), False
    return val, grad, True


def nll_g_space(theta, x, g, family="matern32", noise=0.0) -> float:
    return g_space_objective(theta, x, g, family, noise)[0]


def grad_nll_g_space(theta, x, g, family="matern32", noise=0.0) -> np.ndarray:
    return g_space_objective(theta, x, g, family, noise)[1]


def _prior_blocks(theta, x, family):
    mean, kern = unpack_theta(theta, family)
    gram, kgrads = kernel_matrix_grads(kern, x)
    n = gram.shape[0]
    mu = np.full(n, mean)
    # (dmu, dSigma) per theta component
    dirs = [(np.ones(n), np.zeros((n, n)))] + [(np.zeros(n), dk) for dk in kgrads]
    return mu, gram, dirs


def _f_space_log(theta, warp, x, g, family):
    """Log warp in the diagonally rescaled form K = diag(m) (exp(Sigma) - 1) diag(m)."""
    mu, gram, dirs = _prior_blocks(theta, x, family)
    n = len(g)
    var = np.diag(gram)
    log_m = mu + 0.5 * var + warp.shift
    with np.errstate(over="ignore"):
        ratio = np.exp(g - mu - 0.5 * var)
    resid = ratio - 1.0
    emat = np.expm1(gram)
    if not np.all(np.isfinite(resid)):
        raise NotPositiveDefiniteError("log-warp residuals overflow")
    chol, _ = stable_cholesky(emat, what="scaled f-space covariance")
    beta = cho_solve((chol, True), resid, check_finite=False)
    val = (0.5 * resid @ beta + np.log(np.diag(chol)).sum() + log_m.sum()
           + 0.5 * n * _LOG_2PI)
    inner = cho_solve((chol, True), np.eye(n), check_finite=False) - np.outer(beta, beta)
    eg = emat + 1.0
    grad = np.empty(len(dirs))
    for k, (dmu, dsig) in enumerate(dirs):
        dlogm = dmu + 0.5 * np.diag(dsig)
        grad[k] = (-(beta * ratio) @ dlogm + 0.5 * np.sum(inner * eg * dsig) + dlogm.sum())
    return val, grad


def _f_space_general(theta, warp, x, g, family):
    mu, gram, dirs = _prior_blocks(theta, x, family)
    n = len(g)
    part = moment_partials(warp, mu, gram)
    var = np.diag(gram)
    kmat = covariance(warp, mu[:, None], var[:, None], mu[None, :], var[None, :], gram)
    resid = warp_forward(warp, g) - part.m
    chol, _ = stable_cholesky(kmat, what="moment-matched f-space covariance")
    alpha = cho_solve((chol, True), resid, check_finite=False)
    val = 0.5 * resid @ alpha + np.log(np.diag(chol)).sum() + 0.5 * n * _LOG_2PI
    inner = cho_solve((chol, True), np.eye(n), check_finite=False) - np.outer(alpha, alpha)
    grad = np.empty(len(dirs))
    for k, (dmu, dsig) in enumerate(dirs):
        dm, dc = part.chain(dmu, dsig)
        dk = dc - np.outer(dm, part.m) - np.outer(part.m, dm)
        grad[k] = -alpha @ dm + 0.5 * np.sum(inner * dk)
    return val, grad


def f_space_objective(theta, warp: Warp, x, g, family="matern32"):
    """Negative log likelihood of f = xi(g) under the moment-matched prior.

    ``g`` holds the observations mapped through the inverse warp (for the
    log warp, ``log f - warp.shift``). Returns ``(value, grad, ok)``; on a
    factorisation failure the value is :data:`PENALTY` with a zero gradient
    and ``ok`` is False.
    """
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    g = np.asarray(g, dtype=float)
    try:
        with np.errstate(invalid="ignore", over="ignore"):
            if warp.kind == "log_exp":
                val, grad = _f_space_log(theta, warp, x, g, family)
            else:
                val, grad = _f_space_general(theta, warp, x, g, family)
    except (NotPositiveDefiniteError, ValueError):
        return PENALTY, np.zeros(len(theta)), False
    if not (np.isfinite(val) and np.all(np.isfinite(grad))):
        return PENALTY, np.zeros(len(theta)), False
    return float(val), grad, True


def nll_f_space(theta, warp, x, g, family="matern32") -> float:
    return f_space_objective(theta, warp, x, g, family)[0]


def grad_nll_f_space(theta, warp, x, g, family="matern32") -> np.ndarray:
    return f_space_objective(theta, warp, x, g, family)[1]


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------

@dataclass
class FitConfig:
    """Options for :func:`fit`.

    ``scale_init_rule``: for the log warp in f-space each mean init ``c`` is
    paired with output scale ``c / -2``. ``shift_to_zero_max=None`` means
    "on for the log warp, off otherwise".
    """

    space: str = "f_space"
    mean_inits: tuple = (-1.0, -2.0, -5.0, -10.0)
    shift_to_zero_max: bool | None = None
    max_evals: int = 600
    ftol: float = 1e-13
    gtol: float = 1e-9
    restarts: int | None = None
    family: str = "matern32"
    noise: float = 0.0
    length_scale_init: tuple | None = None
    length_scale_span: float | None = None

    def __post_init__(self):
        if self.space not in ("f_space", "g_space"):
            raise ValueError("space must be 'f_space' or 'g_space'")
        if self.max_evals < 1:
            raise ValueError("max_evals must be >= 1")
        if not self.mean_inits:
            raise ValueError("mean_inits must be nonempty")


@dataclass
class FitResult:
    theta: np.ndarray
    objective: float
    space: str
    shift: float
    warp: Warp
    family: str = "matern32"
    noise: float = 0.0
    restart_scores: list = field(default_factory=list)

    @property
    def mean_constant(self) -> float:
        return float(self.theta[0])

    @property
    def kernel(self):
        return unpack_theta(self.theta, self.family)[1]

    def prior(self) -> GpModel:
        mean, kern = unpack_theta(self.theta, self.family)
        return GpModel(mean, kern, noise=self.noise)

    def model(self, x, g) -> GpModel:
        """GP on (shifted) g conditioned on the data with the fitted hyperparameters."""
        return condition(self.prior(), x, np.asarray(g, float) - self.shift)

    def belief(self, x, g) -> MomentBelief:
        return MomentBelief(self.model(x, g), self.warp)


def _median_distance(x: np.ndarray) -> float:
    if x.shape[0] < 2:
        return 1.0
    d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    d = d[np.triu_indices(x.shape[0], 1)]
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def _initial_thetas(x, g, warp: Warp, config: FitConfig) -> list[np.ndarray]:
    dim = x.shape[1]
    if config.length_scale_init is not None:
        log_ls = np.log(np.broadcast_to(np.asarray(config.length_scale_init, float), (dim,)))
    else:
        log_ls = np.full(dim, np.log(_median_distance(x)))
    if config.space == "f_space" and warp.kind == "log_exp":
        inits = [np.concatenate([[c, np.log(c / -2.0)], log_ls]) for c in config.mean_inits]
    else:
        center = float(np.mean(g))
        spread = float(np.var(g)) if len(g) > 1 else 1.0
        spread = max(spread, 1e-6)
        inits = [np.concatenate([[center, np.log(spread)], log_ls + np.log(s)])
                 for s in (1.0, 0.3, 3.0)]
    if config.restarts is not None:
        inits = inits[: max(1, config.restarts)]
    return inits


def _bounds(x, g, dim, config: FitConfig):
    span = float(np.ptp(g)) + 1.0 if len(g) else 1.0
    lo_g = float(np.min(g)) if len(g) else 0.0
    hi_g = float(np.max(g)) if len(g) else 0.0
    if config.length_scale_span is not None:
        scale = config.length_scale_span
    else:
        scale = max(float(np.max(np.ptp(x, axis=0))) if x.shape[0] > 1 else 1.0, 1e-3)
    # The log-warp f-space objective can keep falling as the mean drifts down
    # with a growing scale; a bound one span below the data keeps the optimum
    # finite so fits depend continuously on the data.
    mean_b = (lo_g - span, hi_g + 20.0 * span)
    sig_b = (np.log(1e-8), np.log(1e4 * span * span))
    ls_b = (np.log(1e-3 * scale), np.log(1e2 * scale))
    return [mean_b, sig_b] + [ls_b] * dim


def fit(x, g, warp: Warp, config: FitConfig | None = None, warm_start=None) -> FitResult:
    """Multi-start L-BFGS-B fit of (mean, output scale, length scales).

    ``g`` are observations in the warped space (``xi^-1(f)``). For the log
    warp with shifting enabled the data are moved so that max(g) = 0 and the
    shift constant is recorded on the result (and folded into its warp).
    ``warm_start`` replaces the init ladder with a single restart.
    """
    config = config or FitConfig()
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    g = np.asarray(g, dtype=float).ravel()
    if len(g) < 2:
        raise ValueError("fit needs at least two observations")
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(x))):
        raise ValueError("fit needs finite x and g")
    shift_on = config.shift_to_zero_max
    if shift_on is None:
        shift_on = warp.kind == "log_exp"
    shift = 0.0
    if shift_on:
        g, shift = shift_normalize(g)
    fit_warp = warp.with_shift(warp.shift + shift) if warp.kind == "log_exp" else warp

    # The log warp's shift only adds n * shift to the f-space NLL; optimise
    # without it so the stopping rule (relative to |objective|) is unchanged.
    opt_warp = warp
    offset = len(g) * shift if (warp.kind == "log_exp" and config.space == "f_space") else 0.0
    if config.space == "f_space":
        def objective(theta):
            return f_space_objective(theta, opt_warp, x, g, config.family)[:2]
    else:
        def objective(theta):
            return g_space_objective(theta, x, g, config.family, config.noise)[:2]

    bounds = _bounds(x, g, x.shape[1], config)
    if warm_start is not None:
        inits = [np.asarray(warm_start, dtype=float)]
    else:
        inits = _initial_thetas(x, g, warp, config)
    scores = []
    best = None
    for idx, theta0 in enumerate(inits):
        theta0 = np.clip(theta0, [b[0] for b in bounds], [b[1] for b in bounds])
        val0, _ = objective(theta0)
        try:
            res = minimize(objective, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                           options={"maxfun": config.max_evals, "maxiter": config.max_evals,
                                    "ftol": config.ftol, "gtol": config.gtol})
            theta, val = res.x, float(res.fun)
        except (ValueError, FloatingPointError) as err:  # pragma: no cover - defensive
            log.debug("restart %d raised %s", idx, err)
            theta, val = theta0, val0
        if val0 < val:
            theta, val = theta0, val0
        scores.append(val)
        if val < PENALTY and (best is None or val < best[1]):
            best = (theta, val)
    if best is None:
        raise FitError(f"all {len(inits)} restarts failed ({config.space}, {warp.kind})",
                       diagnostics=scores)
    return FitResult(theta=np.asarray(best[0]), objective=best[1] + offset, space=config.space,
                     shift=shift, warp=fit_warp, family=config.family, noise=config.noise,
                     restart_scores=[v + offset for v in scores])
