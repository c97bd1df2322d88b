"""Observation policies and the sequential active-quadrature loop.

Methods run by :func:`run_active`:

========  ===========  =====================================================
name      warp         hyperparameters fit on
========  ===========  =====================================================
bmc       identity     f (= g)
wsabi_f   sqrt         f, via moment matching
wsabi_g   sqrt         g = sqrt(f - alpha)
mmlt_f    log          f, via moment matching
mmlt_g    log          g = log f
========  ===========  =====================================================

BMC and WSABI model f / max(f) so likelihood-scale integrands stay in
range; the factor is folded back into every posterior snapshot.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .hyperfit import FitConfig, FitError, FitResult, fit
from .quadrature import (
    IntegralPosterior,
    QuadratureProblem,
    default_n_qmc,
    functional_posterior_qmc,
    prior_points,
)
from .special import LdsSpec, lds_points
from .transforms import MomentBelief, Warp

__all__ = [
    "METHODS",
    "Policy",
    "TraceStep",
    "RunTrace",
    "ModelState",
    "fit_state",
    "uncertainty_sample",
    "run_active",
    "mc_estimate",
    "qmc_estimate",
    "smc_estimate",
    "SmcDegeneracyError",
]

log = logging.getLogger(__name__)

METHODS = ("bmc", "wsabi_f", "wsabi_g", "mmlt_f", "mmlt_g")
POLICY_KINDS = ("uncertainty_fspace", "mc_prior", "qmc_prior", "smc")
WSABI_ALPHA_FRACTION = 0.8
LOG_F_RESOLUTION = 2.0 ** -26
_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class Policy:
    kind: str = "uncertainty_fspace"
    candidates: int = 512
    refit_period: int = 5
    refine_steps: int = 20

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy {self.kind!r}")
        if self.candidates < 1 or self.refit_period < 1:
            raise ValueError("candidate budget and refit period must be >= 1")


@dataclass
class TraceStep:
    step: int
    x: np.ndarray
    log_f: float
    seconds: float
    posterior: IntegralPosterior | None
    state: "ModelState | None" = field(default=None, repr=False)


@dataclass
class ModelState:
    """Fitted hyperparameters plus the moment-matched belief they induce."""

    method: str
    fit: FitResult
    belief: MomentBelief
    log_scale: float


@dataclass
class RunTrace:
    method: str
    seed: int
    init_x: np.ndarray
    init_log_f: np.ndarray
    steps: list = field(default_factory=list)
    error: str | None = None
    state: ModelState | None = None

    @property
    def n_evals(self) -> int:
        return len(self.init_log_f) + len(self.steps)

    @property
    def x(self) -> np.ndarray:
        rows = [self.init_x] + [s.x[None, :] for s in self.steps]
        return np.vstack(rows)

    @property
    def log_f(self) -> np.ndarray:
        return np.concatenate([self.init_log_f, [s.log_f for s in self.steps]])

    @property
    def final(self) -> IntegralPosterior | None:
        for s in reversed(self.steps):
            if s.posterior is not None:
                return s.posterior
        return None


# --------------------------------------------------------------------------
# model state per method
# --------------------------------------------------------------------------

def _method_parts(method: str):
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    space = "g_space" if method in ("bmc",) or method.endswith("_g") else "f_space"
    return method.split("_")[0], space


def snap_log_f(rel):
    """Round max-normalised log f onto a grid of spacing ``LOG_F_RESOLUTION``.

    Adding a constant to log f perturbs the normalised values by rounding
    noise (~1e-13); snapping makes the model inputs, and so the whole run,
    identical unless a value lies within that noise of a grid boundary.
    """
    return np.round(np.asarray(rel, float) / LOG_F_RESOLUTION) * LOG_F_RESOLUTION


def fit_state(method: str, x, log_f, config: FitConfig | None = None,
              warm_start=None) -> ModelState:
    """Fit ``method``'s model to observations of log f.

    Every model sees log f relative to its running maximum (snapped, see
    :func:`snap_log_f`); the maximum is carried separately as ``log_scale``.
    """
    family, space = _method_parts(method)
    x = np.asarray(x, float)
    log_f = np.asarray(log_f, float)
    cfg = replace(config or FitConfig(), space=space, shift_to_zero_max=False)
    top = float(np.max(log_f))
    rel = snap_log_f(log_f - top)
    if family == "mmlt":
        res = fit(x, rel, Warp.log(), cfg, warm_start=warm_start)
        return ModelState(method, res, res.belief(x, rel), top)
    f_scaled = np.exp(rel)
    if family == "wsabi":
        alpha = WSABI_ALPHA_FRACTION * float(np.min(f_scaled))
        warp = Warp.sqrt(alpha)
        g = np.sqrt(np.maximum(f_scaled - alpha, 0.0))
    else:
        warp = Warp.identity()
        g = f_scaled
    res = fit(x, g, warp, cfg, warm_start=warm_start)
    return ModelState(method, res, res.belief(x, g), top)


# --------------------------------------------------------------------------
# acquisition
# --------------------------------------------------------------------------

def _acquisition(belief: MomentBelief, x: np.ndarray) -> np.ndarray:
    vals = belief.log_var(np.atleast_2d(x))
    return np.where(np.isfinite(vals) | (vals == -np.inf), vals, np.nan)


def _golden_max(fun, lo, hi, steps):
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(steps):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fun(d)
    return (c, fc) if fc >= fd else (d, fd)


def uncertainty_sample(belief: MomentBelief, lower, upper, budget: int = 512,
                       candidates: np.ndarray | None = None, refine_steps: int = 20,
                       seed: int = 0) -> np.ndarray:
    """Point maximising the moment-matched variance K(x, x).

    Scores ``budget`` QMC candidates in the box (or the supplied
    ``candidates``), takes the first maximiser, then runs one coordinate-wise
    golden-section sweep within one candidate spacing of it.
    """
    lower = np.asarray(lower, float)
    upper = np.asarray(upper, float)
    dim = lower.size
    if candidates is None:
        u = lds_points(LdsSpec("sobol_like", dim, True, seed), budget)
        candidates = lower + (upper - lower) * u
    candidates = np.clip(np.atleast_2d(candidates), lower, upper)
    scores = _acquisition(belief, candidates)
    if np.all(np.isnan(scores)) or np.all(scores == -np.inf):
        raise FloatingPointError("acquisition is non-finite at every candidate")
    best_idx = int(np.nanargmax(scores))
    best = candidates[best_idx].copy()
    best_val = scores[best_idx]
    if refine_steps <= 0:
        return best
    radius = (upper - lower) / max(len(candidates), 1) ** (1.0 / dim)
    for axis in range(dim):
        lo = max(lower[axis], best[axis] - radius[axis])
        hi = min(upper[axis], best[axis] + radius[axis])
        if hi <= lo:
            continue

        def along(t, axis=axis):
            p = best.copy()
            p[axis] = t
            v = _acquisition(belief, p)[0]
            return -np.inf if np.isnan(v) else v

        t, val = _golden_max(along, lo, hi, refine_steps)
        if val > best_val:
            best[axis] = t
            best_val = val
    return best


# --------------------------------------------------------------------------
# active loop
# --------------------------------------------------------------------------

def _posterior(state: ModelState, prior, points, n_var) -> IntegralPosterior:
    return functional_posterior_qmc(state.belief, prior, n_var=n_var, points=points,
                                    log_scale=state.log_scale, method=state.method)


def run_active(problem: QuadratureProblem, method: str, policy: Policy | None = None,
               max_evals: int | None = 30, max_seconds: float | None = None, seed: int = 0,
               n_init: int = 3, n_qmc: int | None = None, n_var: int | None = None,
               fit_config: FitConfig | None = None, snapshots: bool = True,
               keep_states: bool = False) -> RunTrace:
    """Sequential Bayesian quadrature: select, evaluate, refit, summarise.

    ``max_evals`` counts evaluations after the ``n_init``-point QMC initial
    design, so the oracle is called at most ``n_init + max_evals`` times and
    the trace holds at most ``max_evals`` steps. Oracle failures truncate the
    trace and set ``trace.error``. ``keep_states`` stores the fitted model
    on every step (needed for per-step predictive metrics).
    """
    policy = policy or Policy()
    if max_evals is None and max_seconds is None:
        raise ValueError("need max_evals or max_seconds")
    _method_parts(method)
    lower = np.asarray(problem.lower, float)
    upper = np.asarray(problem.upper, float)
    if fit_config is None:
        fit_config = FitConfig(length_scale_init=tuple((upper - lower) / 4.0),
                               length_scale_span=float(np.max(upper - lower)))
    n_qmc = n_qmc or default_n_qmc(problem.dim)
    points = prior_points(problem.prior, n_qmc, seed)

    start = time.perf_counter()
    init_u = lds_points(LdsSpec("sobol_like", problem.dim, True, seed + 7919), n_init)
    init_x = np.clip(problem.prior.map_unit(init_u), lower, upper)
    try:
        init_y = problem.evaluate(init_x)
        if not np.all(np.isfinite(init_y)):
            raise FloatingPointError("oracle returned non-finite log f")
    except Exception as err:
        return RunTrace(method, seed, init_x, np.zeros(0), error=f"initial design: {err}")
    trace = RunTrace(method, seed, init_x, init_y)

    try:
        state = fit_state(method, init_x, init_y, fit_config)
    except FitError as err:
        trace.error = f"initial fit: {err}"
        return trace

    step = 0
    while max_evals is None or step < max_evals:
        if max_seconds is not None and time.perf_counter() - start >= max_seconds:
            break
        step += 1
        x_new = uncertainty_sample(state.belief, lower, upper, policy.candidates,
                                   refine_steps=policy.refine_steps, seed=seed * 100003 + step)
        try:
            y_new = float(problem.evaluate(x_new)[0])
            if not np.isfinite(y_new):
                raise FloatingPointError("oracle returned non-finite log f")
        except Exception as err:
            trace.error = f"step {step}: {err}"
            break
        xs = trace.x
        ys = trace.log_f
        xs = np.vstack([xs, x_new[None, :]])
        ys = np.concatenate([ys, [y_new]])
        full = step % policy.refit_period == 0
        warm = None if full else state.fit.theta
        try:
            state = fit_state(method, xs, ys, fit_config, warm_start=warm)
        except FitError as err:
            log.warning("refit failed at step %d (%s); keeping previous hyperparameters", step, err)
            state = fit_state(method, xs, ys, fit_config, warm_start=state.fit.theta)
        post = _posterior(state, problem.prior, points, n_var) if snapshots else None
        trace.steps.append(TraceStep(step, x_new, y_new, time.perf_counter() - start, post,
                                     state if keep_states else None))

    if not snapshots and trace.steps:
        trace.steps[-1].posterior = _posterior(state, problem.prior, points, n_var)
    trace.state = state
    return trace


# --------------------------------------------------------------------------
# Monte Carlo baselines
# --------------------------------------------------------------------------

class SmcDegeneracyError(RuntimeError):
    """Effective sample size collapsed below 2."""


def mc_estimate(problem: QuadratureProblem, n: int, seed: int = 0) -> float:
    """log of the plain Monte Carlo average of f over ``n`` prior draws."""
    if n < 2:
        raise ValueError("n must be >= 2")
    rng = np.random.default_rng(seed)
    x = problem.prior.map_unit(rng.random((n, problem.dim)))
    return float(logsumexp(problem.evaluate(x)) - np.log(n))


def qmc_estimate(problem: QuadratureProblem, n: int, seed: int = 0) -> float:
    """log of the randomised-QMC average of f over ``n`` prior-mapped Sobol points."""
    if n < 2:
        raise ValueError("n must be >= 2")
    x = prior_points(problem.prior, n, seed)
    return float(logsumexp(problem.evaluate(x)) - np.log(n))


def default_temperatures(n_temps: int = 64, start: float = 1e-4) -> np.ndarray:
    return np.geomspace(start, 1.0, n_temps)


def _residual_resample(rng, w: np.ndarray) -> np.ndarray:
    n = len(w)
    counts = np.floor(n * w).astype(int)
    rest = n - counts.sum()
    idx = np.repeat(np.arange(n), counts)
    if rest:
        resid = n * w - counts
        resid /= resid.sum()
        idx = np.concatenate([idx, rng.choice(n, size=rest, p=resid)])
    return np.sort(idx)


def smc_estimate(problem: QuadratureProblem, n: int, temperatures=None, seed: int = 0,
                 n_moves: int = 2, return_evals: bool = False):
    """Annealed SMC estimate of log Z from pi to pi * f.

    Residual resampling whenever ESS < n / 2 and ``n_moves`` random-walk
    Metropolis moves per temperature, with the proposal scaled to the
    current particle covariance.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    temps = default_temperatures() if temperatures is None else np.asarray(temperatures, float)
    if np.any(np.diff(temps) <= 0) or temps[0] <= 0 or temps[-1] != 1.0:
        raise ValueError("temperatures must increase strictly to 1")
    rng = np.random.default_rng(seed)
    prior = problem.prior
    dim = problem.dim
    x = prior.map_unit(rng.random((n, dim)))
    lf = problem.evaluate(x)
    evals = n
    logw = np.zeros(n)
    log_z = 0.0
    beta_prev = 0.0
    for t, beta in enumerate(temps):
        incr = (beta - beta_prev) * lf
        log_z += float(logsumexp(logw + incr) - logsumexp(logw))
        logw = logw + incr
        w = np.exp(logw - logsumexp(logw))
        ess = 1.0 / np.sum(w * w)
        if ess < 2.0:
            raise SmcDegeneracyError(
                f"ESS {ess:.3g} < 2 at temperature {t} (beta {beta_prev:.3g} -> {beta:.3g}); "
                "use a finer ladder")
        if ess < n / 2:
            idx = _residual_resample(rng, w)
            x, lf = x[idx], lf[idx]
            logw = np.zeros(n)
            w = np.full(n, 1.0 / n)
        cov = np.atleast_2d(np.cov(x.T, aweights=w)) + 1e-12 * np.eye(dim)
        chol = np.linalg.cholesky(cov * (2.38 ** 2 / dim))
        target = prior.logpdf(x) + beta * lf
        for _ in range(n_moves):
            prop = x + rng.standard_normal((n, dim)) @ chol.T
            lp = prior.logpdf(prop)
            lf_prop = np.full(n, -np.inf)
            ok = np.isfinite(lp)
            if ok.any():
                lf_prop[ok] = problem.evaluate(prop[ok])
                evals += int(ok.sum())
            new_target = lp + beta * lf_prop
            accept = np.log(rng.random(n)) < new_target - target
            x = np.where(accept[:, None], prop, x)
            lf = np.where(accept, lf_prop, lf)
            target = np.where(accept, new_target, target)
        beta_prev = beta
    if return_evals:
        return log_z, evals
    return log_z
