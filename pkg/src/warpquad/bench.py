"""Synthetic problems, metrics, result files and summaries for method comparisons."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.special import erf, logsumexp

from .gp import KernelSpec, kernel_matrix, stable_cholesky
from .hyperfit import FitConfig, fit
from .quadrature import (
    GaussianPrior,
    QuadratureProblem,
    UniformPrior,
    log_density_of_true_Z,
    log_evidence_estimate,
    prior_points,
)
from .sampling import METHODS, RunTrace, mc_estimate, qmc_estimate, run_active, smc_estimate
from .special import norm_cdf
from .transforms import MomentBelief, Warp, warp_inverse

__all__ = [
    "PROBLEMS",
    "BenchmarkSpec",
    "RegressionDataset",
    "ResultRow",
    "generate_problem",
    "regression_predict",
    "gaussian_mll",
    "compute_metrics",
    "run_cell",
    "run_benchmark",
    "write_results",
    "read_results",
    "Summary",
    "summarize",
    "format_summary",
    "load_spec",
    "thread_count",
]

log = logging.getLogger(__name__)

PROBLEMS = ("toy_bounded", "gauss_product", "gmm_loglik", "in_model_probit")
BASELINES = ("mc", "qmc", "smc")
REGRESSION_METHODS = ("probit_f", "probit_g", "sqrt_f", "sqrt_g", "log_f", "log_g", "none")
THREADS_ENV = "WARPQUAD_THREADS"
REFERENCE_LOG2_POINTS = 20
N_METRIC_POINTS = 1024
GMM_MEAN_BOX = (-2.0, 2.0)
GMM_SD_RANGE = (0.4, 0.8)
GMM_WEIGHT_CONCENTRATION = 5.0


def thread_count() -> int:
    """Worker count from ``WARPQUAD_THREADS``, defaulting to the machine's cores."""
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
        if n < 1:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
        return n
    return os.cpu_count() or 1


# --------------------------------------------------------------------------
# specs and problems
# --------------------------------------------------------------------------

@dataclass
class BenchmarkSpec:
    """One grid of (method, seed) runs on a problem family.

    ``budget`` counts active evaluations after the 3-point initial design
    (quadrature) or is ignored (regression, which uses ``train_fraction``).
    """

    problem: str = "gauss_product"
    dim: int = 1
    components: int = 6
    scale: float = 200.0
    output_scale: float = 8.0
    length_scales: tuple = (0.3,)
    n_points: int = 200
    train_fraction: float = 0.2
    methods: tuple = ("mmlt_f", "wsabi_f", "bmc")
    seeds: tuple = tuple(range(5))
    budget: int = 30
    max_seconds: float | None = None
    record_every: int = 5
    n_qmc: int | None = None
    metrics: tuple = ("abs_error", "log_p_true", "mll", "rmse")

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.metrics = tuple(self.metrics)
        self.length_scales = tuple(float(v) for v in np.atleast_1d(self.length_scales))
        self.scale = float(self.scale)
        self.output_scale = float(self.output_scale)
        if self.problem not in PROBLEMS:
            raise ValueError(f"unknown problem {self.problem!r}; expected one of {PROBLEMS}")
        if not 1 <= self.dim <= 6:
            raise ValueError("dim must be in 1..6")
        if self.components < 1:
            raise ValueError("components must be >= 1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if not self.methods:
            raise ValueError("methods must be nonempty")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.problem == "toy_bounded" and self.dim != 1:
            raise ValueError("toy_bounded is one-dimensional")
        known = REGRESSION_METHODS if self.is_regression else METHODS + BASELINES
        bad = [m for m in self.methods if m not in known]
        if bad:
            raise ValueError(f"methods {bad} not available for {self.problem}; choose from {known}")

    @property
    def is_regression(self) -> bool:
        return self.problem == "in_model_probit"

    @classmethod
    def from_dict(cls, raw: dict) -> "BenchmarkSpec":
        names = {f.name for f in fields(cls)}
        extra = set(raw) - names
        if extra:
            raise ValueError(f"unknown spec keys {sorted(extra)}")
        return cls(**raw)


def load_spec(path) -> BenchmarkSpec:
    """Read a YAML or JSON spec file."""
    import yaml

    text = Path(path).read_text(encoding="utf-8")
    raw = yaml.safe_load(text) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: spec must be a key-value mapping")
    return BenchmarkSpec.from_dict(raw)


@dataclass
class RegressionDataset:
    x_train: np.ndarray
    f_train: np.ndarray
    x_test: np.ndarray
    f_test: np.ndarray
    g_true: np.ndarray = field(repr=False, default=None)


def _toy_bounded() -> QuadratureProblem:
    def log_f(x):
        return np.log(0.95) - 2.0 * x[:, 0] ** 2

    z = 0.95 / 6.0 * math.sqrt(math.pi / 2.0) * erf(3.0 * math.sqrt(2.0))
    return QuadratureProblem(UniformPrior((-3.0,), (3.0,)), log_f, (-3.0,), (3.0,),
                             math.log(z), "toy_bounded")


def _gauss_product(dim: int) -> QuadratureProblem:
    def log_f(x):
        return -0.5 * np.sum(x * x, axis=1) - 0.5 * dim * np.log(2.0 * np.pi)

    return QuadratureProblem(GaussianPrior((0.0,) * dim, (1.0,) * dim), log_f,
                             (-6.0,) * dim, (6.0,) * dim,
                             -0.5 * dim * np.log(4.0 * np.pi), f"gauss_product_d{dim}")


class _GmmLogLik:
    """Picklable log f = s * (log p_gmm(x) - max) / (max - min) on [-3, 3]^d."""

    def __init__(self, means, sds, log_w, scale, lo, hi):
        self.means, self.sds, self.log_w = means, sds, log_w
        self.scale, self.lo, self.hi = scale, lo, hi

    def raw(self, x):
        z = (x[:, None, :] - self.means[None]) / self.sds[None]
        comp = -0.5 * np.sum(z * z, -1) - np.sum(np.log(self.sds), -1)[None] + self.log_w[None]
        return logsumexp(comp, axis=1)

    def __call__(self, x):
        return self.scale * (self.raw(x) - self.hi) / (self.hi - self.lo)


def _gmm_loglik(dim: int, k: int, scale: float, seed: int) -> QuadratureProblem:
    rng = np.random.default_rng([seed, 17, dim, k])
    means = rng.uniform(GMM_MEAN_BOX[0], GMM_MEAN_BOX[1], size=(k, dim))
    sds = rng.uniform(GMM_SD_RANGE[0], GMM_SD_RANGE[1], size=(k, dim))
    log_w = np.log(rng.dirichlet(np.full(k, GMM_WEIGHT_CONCENTRATION)))
    oracle = _GmmLogLik(means, sds, log_w, scale, 0.0, 1.0)
    if dim <= 2:
        axis = np.linspace(-3.0, 3.0, 201)
        grid = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), -1).reshape(-1, dim)
    else:
        grid = -3.0 + 6.0 * prior_points(UniformPrior((0.0,) * dim, (1.0,) * dim), 2 ** 16, seed)
    grid = np.vstack([grid, means])
    raw = oracle.raw(grid)
    oracle.lo, oracle.hi = float(raw.min()), float(raw.max())
    prior = UniformPrior((-3.0,) * dim, (3.0,) * dim)
    ref = prior_points(prior, 2 ** REFERENCE_LOG2_POINTS, seed=10007)
    log_z = float(logsumexp(oracle(ref)) - np.log(len(ref)))
    return QuadratureProblem(prior, oracle, (-3.0,) * dim, (3.0,) * dim, log_z,
                             f"gmm_loglik_d{dim}_k{k}_s{scale:g}", reference_grade=dim > 2)


def _in_model_probit(spec: BenchmarkSpec, seed: int) -> RegressionDataset:
    rng = np.random.default_rng([seed, 29, spec.dim])
    ls = np.broadcast_to(np.asarray(spec.length_scales, float), (spec.dim,))
    x = rng.random((spec.n_points, spec.dim))
    kern = KernelSpec("matern32", spec.output_scale, tuple(ls))
    chol, _ = stable_cholesky(kernel_matrix(kern, x, x), spec.output_scale, "probit draw")
    g = chol @ rng.standard_normal(spec.n_points)
    # Phi(g) rounds to 0 or 1 for |g| beyond ~8.3; keep samples strictly inside
    f = np.clip(norm_cdf(g), np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    n_train = max(2, int(round(spec.train_fraction * spec.n_points)))
    order = rng.permutation(spec.n_points)
    tr, te = order[:n_train], order[n_train:]
    return RegressionDataset(x[tr], f[tr], x[te], f[te], g)


def generate_problem(spec: BenchmarkSpec, seed: int):
    """Deterministic problem (or regression dataset) for ``seed``."""
    if spec.problem == "toy_bounded":
        return _toy_bounded()
    if spec.problem == "gauss_product":
        return _gauss_product(spec.dim)
    if spec.problem == "gmm_loglik":
        return _gmm_loglik(spec.dim, spec.components, spec.scale, seed)
    return _in_model_probit(spec, seed)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    method: str
    seed: int
    budget: int
    log_z: float
    log_z_true: float
    abs_error: float
    log_p_true: float
    mll: float
    rmse: float
    seconds: float


_FLOAT_FIELDS = ("log_z", "log_z_true", "abs_error", "log_p_true", "mll", "rmse", "seconds")


def gaussian_mll(y, mean, var) -> float:
    """Mean of log N(y | mean, var) over points."""
    y, mean, var = (np.asarray(a, float) for a in (y, mean, var))
    with np.errstate(divide="ignore"):
        lp = -0.5 * (np.log(2.0 * np.pi * var) + (y - mean) ** 2 / var)
    return float(np.mean(lp))


def _log_abs_diff(a, b):
    """log|e^a - e^b| elementwise."""
    hi = np.maximum(a, b)
    gap = -np.abs(a - b)
    with np.errstate(divide="ignore"):
        return hi + np.log(-np.expm1(gap))


def _predictive_scores(state, x, log_f_true, ref: float) -> tuple[float, float]:
    """MLL and RMSE of f / exp(ref) at ``x`` under a run's moment-matched belief."""
    belief = state.belief
    s = state.log_scale - ref
    if belief.is_log:
        lm = belief.log_mean(x) + s
        lv = belief.log_var(x) + 2.0 * s
        ly = log_f_true - ref
        with np.errstate(over="ignore"):
            z2 = np.exp(2.0 * _log_abs_diff(ly, lm) - lv)
            resid = np.exp(ly) - np.exp(lm)
    else:
        m = belief.mean(x) * np.exp(s)
        with np.errstate(divide="ignore"):
            lv = np.log(belief.var(x)) + 2.0 * s
        resid = np.exp(log_f_true - ref) - m
        with np.errstate(over="ignore", divide="ignore"):
            z2 = np.exp(2.0 * np.log(np.abs(resid)) - lv)
    lp = -0.5 * (np.log(2.0 * np.pi) + lv + z2)
    return float(np.mean(lp)), float(np.sqrt(np.mean(resid ** 2)))


def compute_metrics(trace: RunTrace, problem: QuadratureProblem, step: int | None = None,
                    metric_x: np.ndarray | None = None, ref: float | None = None) -> ResultRow:
    """Row for a quadrature run at ``step`` (default: last step).

    MLL and RMSE are over ``metric_x`` (π-mapped QMC points, unweighted) in
    units of exp(``ref``); ``ref`` defaults to the largest true log f there.
    They need the step's model state and are NaN when it was not kept.
    """
    if not trace.steps:
        raise ValueError(f"trace for {trace.method} seed {trace.seed} has no steps"
                         + (f" ({trace.error})" if trace.error else ""))
    st = trace.steps[-1] if step is None else trace.steps[step - 1]
    log_z, _ = log_evidence_estimate(st.posterior)
    truth = problem.log_z_true if problem.log_z_true is not None else np.nan
    abs_err = abs(log_z - truth) if np.isfinite(log_z) else np.inf
    lp = log_density_of_true_Z(st.posterior, truth) if np.isfinite(truth) else np.nan
    mll = rmse = np.nan
    state = st.state if st.state is not None else (trace.state if st is trace.steps[-1] else None)
    if state is not None and metric_x is not None:
        lf = problem.evaluate(metric_x)
        ref = float(np.max(lf)) if ref is None else ref
        mll, rmse = _predictive_scores(state, metric_x, lf, ref)
    return ResultRow(trace.method, trace.seed, st.step, float(log_z), float(truth),
                     float(abs_err), float(lp), mll, rmse, float(st.seconds))


_REGRESSION_WARPS = {"probit": Warp.probit, "log": Warp.log, "none": Warp.identity}


def regression_predict(method: str, data: RegressionDataset):
    """Fit ``method`` on the training split; moment-matched mean and variance at test points."""
    if method == "none":
        warp, space = Warp.identity(), "g_space"
    else:
        kind, sp = method.split("_")
        space = "f_space" if sp == "f" else "g_space"
        if kind == "sqrt":
            warp = Warp.sqrt(0.8 * float(np.min(data.f_train)))
        else:
            warp = _REGRESSION_WARPS[kind]()
    g = warp_inverse(warp, np.asarray(data.f_train, float))
    res = fit(data.x_train, g, warp, FitConfig(space=space))
    belief = MomentBelief(res.model(data.x_train, g), res.warp)
    return belief.mean(data.x_test), belief.var(data.x_test)


def regression_row(method: str, seed: int, data: RegressionDataset) -> ResultRow:
    t0 = time.perf_counter()
    mean, var = regression_predict(method, data)
    mll = gaussian_mll(data.f_test, mean, var)
    rmse = float(np.sqrt(np.mean((mean - data.f_test) ** 2)))
    nan = float("nan")
    return ResultRow(method, seed, len(data.f_train), nan, nan, nan, nan, mll, rmse,
                     time.perf_counter() - t0)


# --------------------------------------------------------------------------
# running
# --------------------------------------------------------------------------

def _baseline_rows(method, seed, problem, spec) -> list[ResultRow]:
    """One row for a prior-sampling baseline; ``budget`` is its oracle call count.

    MC and QMC spend exactly the active methods' total (budget + initial
    design). SMC needs at least one particle move per temperature, so it is
    given that many particles and reports its (larger) count.
    """
    n_total = max(spec.budget + 3, 2)
    t0 = time.perf_counter()
    if method == "smc":
        log_z, evals = smc_estimate(problem, n_total, seed=seed, return_evals=True)
    elif method == "mc":
        log_z, evals = mc_estimate(problem, n_total, seed=seed), n_total
    else:
        log_z, evals = qmc_estimate(problem, n_total, seed=seed), n_total
    truth = problem.log_z_true
    nan = float("nan")
    return [ResultRow(method, seed, int(evals), float(log_z), float(truth),
                      float(abs(log_z - truth)), nan, nan, nan, time.perf_counter() - t0)]


def run_cell(spec: BenchmarkSpec, method: str, seed: int) -> list[ResultRow]:
    """All rows for one (method, seed) cell of the grid."""
    problem = generate_problem(spec, seed)
    if spec.is_regression:
        return [regression_row(method, seed, problem)]
    if method in BASELINES:
        return _baseline_rows(method, seed, problem, spec)
    trace = run_active(problem, method, max_evals=spec.budget, max_seconds=spec.max_seconds,
                       seed=seed, n_qmc=spec.n_qmc, keep_states=True)
    if trace.error:
        log.warning("%s seed %d stopped early: %s", method, seed, trace.error)
    metric_x = prior_points(problem.prior, N_METRIC_POINTS, seed=20011)
    ref = float(np.max(problem.evaluate(metric_x)))
    steps = [s.step for s in trace.steps
             if s.step % spec.record_every == 0 or s is trace.steps[-1]]
    return [compute_metrics(trace, problem, k, metric_x, ref) for k in steps]


def _run_cell_args(args):
    return run_cell(*args)


def run_benchmark(spec: BenchmarkSpec, out=None, workers: int | None = None) -> list[ResultRow]:
    """Run the (method x seed) grid; rows sorted by (method, seed, budget).

    Cells go to a process pool when ``workers`` (default ``WARPQUAD_THREADS``)
    exceeds one. Results are written once, in sorted order, if ``out`` is given.
    """
    workers = thread_count() if workers is None else workers
    cells = [(spec, m, s) for m in spec.methods for s in spec.seeds]
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_cell_args, cells))
    else:
        parts = [run_cell(*c) for c in cells]
    rows = sorted((r for p in parts for r in p), key=lambda r: (r.method, r.seed, r.budget))
    if out is not None:
        write_results(rows, out)
    return rows


# --------------------------------------------------------------------------
# result files
# --------------------------------------------------------------------------

HEADER = tuple(f.name for f in fields(ResultRow))


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def dumps_results(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in rows:
        w.writerow([_fmt(getattr(r, k)) for k in HEADER])
    return buf.getvalue()


def loads_results(text: str) -> list[ResultRow]:
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader, ()))
    if header != HEADER:
        raise ValueError(f"unexpected header {header}; expected {HEADER}")
    rows = []
    for i, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(HEADER):
            raise ValueError(f"line {i}: expected {len(HEADER)} fields, got {len(rec)}")
        d = dict(zip(HEADER, rec))
        rows.append(ResultRow(d["method"], int(d["seed"]), int(d["budget"]),
                              *(float(d[k]) for k in _FLOAT_FIELDS)))
    return rows


def write_results(rows, path) -> None:
    Path(path).write_text(dumps_results(rows), encoding="utf-8")


def read_results(path) -> list[ResultRow]:
    return loads_results(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# summaries
# --------------------------------------------------------------------------

@dataclass
class Summary:
    median_error: dict          # method -> {budget: median abs error}
    termination: dict           # method -> {metric: mean at final budget}
    p_values: dict              # (a, b) -> p for "a has lower final abs error than b"
    seeds: tuple


def paired_one_sided_p(a, b) -> float:
    """p-value for mean(a - b) < 0 under a paired t-test; 1 when all differences vanish."""
    d = np.asarray(a, float) - np.asarray(b, float)
    if len(d) < 2:
        raise ValueError("paired test needs at least two seeds")
    if not np.all(np.isfinite(d)):
        finite = np.isfinite(d)
        if not finite.any():
            return 1.0
        d = d[finite]
        if len(d) < 2:
            return 1.0
    if np.all(d == d[0]):
        return 1.0 if d[0] >= 0 else 0.0
    return float(stats.ttest_rel(d, np.zeros_like(d), alternative="less").pvalue)


def _final_rows(rows):
    last = {}
    for r in rows:
        key = (r.method, r.seed)
        if key not in last or r.budget > last[key].budget:
            last[key] = r
    return last


def summarize(rows) -> Summary:
    """Median error curves, termination means and pairwise one-sided p-values."""
    rows = list(rows)
    if not rows:
        raise ValueError("no result rows")
    methods = sorted({r.method for r in rows})
    seed_sets = {m: frozenset(r.seed for r in rows if r.method == m) for m in methods}
    first = seed_sets[methods[0]]
    bad = [m for m in methods if seed_sets[m] != first]
    if bad:
        raise ValueError(f"methods {bad} were run on different seeds than {methods[0]}")
    seeds = tuple(sorted(first))
    median = {}
    for m in methods:
        by_budget = {}
        for r in rows:
            if r.method == m:
                by_budget.setdefault(r.budget, []).append(r.abs_error)
        median[m] = {b: float(np.median(v)) for b, v in sorted(by_budget.items())}
    last = _final_rows(rows)
    term = {}
    for m in methods:
        rs = [last[(m, s)] for s in seeds]
        term[m] = {k: float(np.mean([getattr(r, k) for r in rs]))
                   for k in ("abs_error", "log_p_true", "mll", "rmse", "seconds")}
    pvals = {}
    if len(seeds) >= 2:
        for a in methods:
            for b in methods:
                if a != b:
                    ea = [last[(a, s)].abs_error for s in seeds]
                    eb = [last[(b, s)].abs_error for s in seeds]
                    if all(np.isnan(ea)) or all(np.isnan(eb)):
                        ea = [-last[(a, s)].mll for s in seeds]
                        eb = [-last[(b, s)].mll for s in seeds]
                    pvals[(a, b)] = paired_one_sided_p(ea, eb)
    return Summary(median, term, pvals, seeds)


def format_summary(summary: Summary) -> str:
    out = ["median |log Z - log Z*| by budget"]
    for m, curve in summary.median_error.items():
        pts = "  ".join(f"{b}:{v:.4g}" for b, v in curve.items())
        out.append(f"  {m:10s} {pts}")
    out.append("means at termination")
    out.append(f"  {'method':10s} {'abs_error':>11s} {'log_p_true':>11s} {'mll':>11s} "
               f"{'rmse':>11s} {'seconds':>9s}")
    for m, t in summary.termination.items():
        out.append(f"  {m:10s} {t['abs_error']:11.4g} {t['log_p_true']:11.4g} {t['mll']:11.4g} "
                   f"{t['rmse']:11.4g} {t['seconds']:9.3g}")
    if summary.p_values:
        out.append("one-sided paired t-test, p(row better than column)")
        for (a, b), p in sorted(summary.p_values.items()):
            out.append(f"  {a} < {b}: p = {p:.3g}")
    return "\n".join(out)


def summary_json(summary: Summary) -> str:
    d = asdict(summary)
    d["p_values"] = {f"{a}<{b}": p for (a, b), p in summary.p_values.items()}
    return json.dumps(d, indent=2, default=float)


def log_z_reference(problem: QuadratureProblem, n_log2: int = REFERENCE_LOG2_POINTS,
                    seed: int = 10007) -> float:
    """QMC reference log Z at 2**n_log2 prior-mapped points."""
    x = prior_points(problem.prior, 2 ** n_log2, seed)
    return float(logsumexp(problem.evaluate(x)) - np.log(len(x)))
