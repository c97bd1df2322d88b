import math
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_difference, rel_err
from scipy import integrate

from warpquad.gp import KernelSpec, condition, predict, prior_model
from warpquad.special import norm_cdf, norm_pdf
from warpquad.transforms import (
    MomentBelief,
    Warp,
    WarpDomainError,
    covariance,
    first_moment,
    induced_moments,
    induced_moments_log,
    induced_moments_polynomial,
    induced_moments_probit,
    induced_moments_sqrt,
    log_moments_log,
    moment_partials,
    probit_log_variance,
    variance,
    warp_forward,
    warp_inverse,
)

WARPS = {
    "sqrt": Warp.sqrt(0.3),
    "log": Warp.log(),
    "probit": Warp.probit(),
    "probit_ab": Warp.probit(-2.0, 3.0),
    "poly2": Warp.polynomial((0.5, -1.0, 0.7)),
    "poly3": Warp.polynomial((0.1, 0.4, -0.3, 0.2)),
    "poly4": Warp.polynomial((0.0, 1.0, 0.5, -0.2, 0.1)),
}


def random_gaussian(rng, scale=1.0):
    mu = rng.normal(scale=0.7 * scale, size=2)
    sd = rng.uniform(0.1, scale, 2)
    r = rng.uniform(-0.95, 0.95)
    cov = np.array([[sd[0] ** 2, r * sd[0] * sd[1]], [r * sd[0] * sd[1], sd[1] ** 2]])
    return mu, cov


def mc_moments(w, mu, cov, n, rng):
    g = mu + rng.standard_normal((n, 2)) @ np.linalg.cholesky(cov).T
    f = warp_forward(w, g)
    samples = np.stack([f[:, 0], f[:, 1], f[:, 0] ** 2, f[:, 1] ** 2, f[:, 0] * f[:, 1]])
    return samples.mean(1), samples.std(1) / math.sqrt(n)


def flat(m, c):
    return np.array([m[0], m[1], c[0, 0], c[1, 1], c[0, 1]])


# ---------------------------------------------------------------- warps


def test_forward_examples():
    assert warp_forward(Warp.log(), 0.0) == 1.0
    assert warp_forward(Warp.sqrt(0.01), 2.0) == pytest.approx(4.01)
    assert warp_forward(Warp.probit(), 0.0) == 0.5


@pytest.mark.parametrize("name", ["sqrt", "log", "probit", "probit_ab", "poly3"])
def test_inverse_round_trip(name):
    w = WARPS[name]
    g = np.linspace(0.05, 1.5, 9) if name == "sqrt" else np.linspace(-1.5, 1.5, 9)
    back = warp_inverse(w, warp_forward(w, g))
    assert np.allclose(back, g, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("name", ["poly2", "poly4"])
def test_even_polynomials_are_not_invertible(name):
    w = WARPS[name]
    with pytest.raises(WarpDomainError):
        warp_inverse(w, warp_forward(w, np.array([2.0])))


def test_inverse_domain_errors():
    with pytest.raises(WarpDomainError, match="f > 0"):
        warp_inverse(Warp.log(), -1.0)
    with pytest.raises(WarpDomainError, match="alpha"):
        warp_inverse(Warp.sqrt(0.5), 0.2)
    with pytest.raises(WarpDomainError, match="<"):
        warp_inverse(Warp.probit(), 1.0)
    with pytest.raises(WarpDomainError, match="invertible"):
        warp_inverse(Warp.polynomial((0.0, 0.0, 1.0)), 4.0)


def test_warp_validation():
    with pytest.raises(ValueError):
        Warp.sqrt(-0.1)
    with pytest.raises(ValueError):
        Warp.probit(1.0, 1.0)
    with pytest.raises(ValueError, match="capped"):
        Warp.polynomial((0,) * 7 + (1,))
    with pytest.raises(ValueError):
        Warp.polynomial((3.0,))


# ---------------------------------------------------------------- moments


def test_sqrt_examples():
    m, _ = induced_moments_sqrt([0.0], [[1.0]], alpha=0.0)
    assert m[0] == 1.0
    m, c = induced_moments_sqrt([1.0, 1.0], [[2.0, 2.0], [2.0, 2.0]], alpha=0.8)
    assert c[0, 1] == pytest.approx(30.44)
    m, c = induced_moments_sqrt([0.4, -1.0], [[1.0, 0.0], [0.0, 2.0]], alpha=0.1)
    assert c[0, 1] - m[0] * m[1] == pytest.approx(0.0, abs=1e-14)


def test_log_examples():
    assert induced_moments_log([0.0], [[0.0]])[0][0] == 1.0
    assert induced_moments_log([0.0], [[2.0]])[0][0] == pytest.approx(math.e)
    _, c = induced_moments_log([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]])
    assert c[0, 1] == pytest.approx(math.e ** 2)


def test_probit_examples():
    for v in (0.0, 0.5, 4.0):
        assert induced_moments_probit([0.0], [[v]])[0][0] == 0.5
    assert induced_moments_probit([1.0], [[1.0]])[0][0] == pytest.approx(norm_cdf(1 / math.sqrt(2)))
    assert induced_moments_probit([1.0], [[1.0]])[0][0] == pytest.approx(0.76025, abs=1e-5)
    m, c = induced_moments_probit([0.3, -0.8], [[0.5, 0.0], [0.0, 1.2]])
    assert c[0, 1] == pytest.approx(m[0] * m[1], abs=1e-14)


def test_polynomial_examples():
    assert induced_moments_polynomial((0, 0, 1), [1.0], [[2.0]])[0][0] == pytest.approx(3.0)
    mu = np.array([0.3, -0.2])
    cov = np.array([[1.0, 0.4], [0.4, 0.5]])
    m, c = induced_moments_polynomial((0, 1), mu, cov)
    assert np.allclose(m, mu) and np.allclose(c, cov + np.outer(mu, mu))
    assert induced_moments_polynomial((0, 0, 0, 1), [0.0], [[1.0]])[0][0] == 0.0
    sq_m, sq_c = induced_moments_sqrt(mu, cov, 0.0)
    p_m, p_c = induced_moments_polynomial((0, 0, 1), mu, cov)
    assert np.allclose(sq_m, p_m) and np.allclose(sq_c, p_c)


@pytest.mark.parametrize("name", sorted(WARPS))
def test_moments_against_monte_carlo(name, rng):
    w = WARPS[name]
    misses = 0
    for _ in range(10):
        mu, cov = random_gaussian(rng, 0.8)
        m, c = induced_moments(w, mu, cov)
        mean, se = mc_moments(w, mu, cov, 200_000, rng)
        misses += int(np.any(np.abs(flat(m, c) - mean) > 4 * se))
    assert misses <= 1


@given(st.sampled_from(sorted(WARPS)), st.integers(0, 10_000))
def test_moment_inequalities(name, seed):
    w = WARPS[name]
    mu, cov = random_gaussian(np.random.default_rng(seed))
    m, c = induced_moments(w, mu, cov)
    k = c - np.outer(m, m)
    assert np.all(np.diag(k) >= -1e-10 * max(1.0, np.max(np.abs(c))))
    if w.kind == "probit" and w.lower == 0:
        assert np.all((m > 0) & (m < 1))
    if w.kind == "log_exp":
        assert np.all(m > 0)


@given(st.floats(-5, 5), st.floats(-50, 50), st.integers(0, 1000))
def test_log_shift_property(mu0, c, seed):
    _, cov = random_gaussian(np.random.default_rng(seed))
    mu = np.array([mu0, -mu0 / 2])
    lm, lc = log_moments_log(mu, cov)
    lm2, lc2 = log_moments_log(mu + c, cov)
    assert np.allclose(lm2 - lm, c, atol=1e-12)
    assert np.allclose(lc2 - lc, 2 * c, atol=1e-12)


def test_log_moments_survive_huge_range():
    lm, lc = log_moments_log(np.array([27000.0, -27000.0]), np.eye(2))
    assert np.all(np.isfinite(lm)) and np.all(np.isfinite(lc))


def test_identity_belief_reproduces_gp(rng):
    model = condition(prior_model(0.2, KernelSpec("matern32", 1.3, (0.6,))),
                      rng.uniform(-1, 1, (5, 1)), rng.normal(size=5))
    xs = np.linspace(-1.5, 1.5, 11)[:, None]
    belief = MomentBelief(model, Warp.identity())
    mean, cov = predict(model, xs)
    assert np.allclose(belief.mean(xs), mean)
    assert np.allclose(belief.cov(xs, xs), cov, atol=1e-12)


def test_log_belief_log_forms_agree(rng):
    model = condition(prior_model(-1.0, KernelSpec("matern32", 0.8, (0.6,))),
                      rng.uniform(-1, 1, (4, 1)), rng.normal(size=4))
    belief = MomentBelief(model, Warp.log(3.0))
    xs = np.linspace(-1.5, 1.5, 7)[:, None]
    assert np.allclose(np.exp(belief.log_mean(xs)), belief.mean(xs))
    assert np.allclose(np.exp(belief.log_var(xs)), belief.var(xs))


# ---------------------------------------------------------------- partials


def _moment_vector(w, mu, cov):
    m, c = induced_moments(w, mu, cov)
    return np.concatenate([m, c.ravel()])


def _params(mu, cov):
    return np.array([mu[0], mu[1], cov[0, 0], cov[1, 1], cov[0, 1]])


def _unpack(p):
    return p[:2], np.array([[p[2], p[4]], [p[4], p[3]]])


def analytic_jacobian(w, mu, cov):
    mp = moment_partials(w, mu, cov)
    cols = []
    for k in range(5):
        dmu = np.zeros(2)
        dcov = np.zeros((2, 2))
        if k < 2:
            dmu[k] = 1.0
        elif k < 4:
            dcov[k - 2, k - 2] = 1.0
        else:
            dcov[0, 1] = dcov[1, 0] = 1.0
        dm, dc = mp.chain(dmu, dcov)
        cols.append(np.concatenate([dm, dc.ravel()]))
    return np.stack(cols, 1)


def numeric_jacobian(w, mu, cov, step=1e-6):
    p0 = _params(mu, cov)
    cols = []
    for k in range(5):
        e = np.zeros(5)
        e[k] = step

        def f(p):
            return _moment_vector(w, *_unpack(p))

        cols.append((f(p0 + e) - f(p0 - e)) / (2 * step))
    return np.stack(cols, 1)


@pytest.mark.parametrize("name", sorted(WARPS))
def test_partials_match_differences(name):
    w = WARPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(50):
        mu, cov = random_gaussian(rng, 0.9)
        a = analytic_jacobian(w, mu, cov)
        n = numeric_jacobian(w, mu, cov)
        scale = max(1.0, np.max(np.abs(a)))
        worst = max(worst, np.max(np.abs(a - n)) / scale)
    assert worst <= 1e-5


def test_partial_examples():
    mp = moment_partials(Warp.log(), np.array([0.0]), np.array([[2.0]]))
    assert mp.dm_dmu[0] == pytest.approx(math.e)
    mp = moment_partials(Warp.probit(), np.array([0.0]), np.array([[0.0]]))
    assert mp.dm_dmu[0] == pytest.approx(norm_pdf(0.0))
    # d C / d Sigma_ij at Sigma_ij = 0 for probit: phi-product form
    mu = np.array([0.3, -0.5])
    cov = np.array([[0.4, 0.0], [0.0, 0.9]])
    mp = moment_partials(Warp.probit(), mu, cov)
    s1, s2 = math.sqrt(1.4), math.sqrt(1.9)
    want = norm_pdf(mu[0] / s1) * norm_pdf(mu[1] / s2) / (s1 * s2)
    assert mp.dC_dcov[0, 1] == pytest.approx(want, rel=1e-10)


def test_first_moment_broadcasts():
    out = first_moment(Warp.log(), np.zeros((3, 1)), np.ones((1, 4)))
    assert out.shape == (3, 4)


def _probit_var_oracle(mu, var):
    # Var[Phi(g)] as the integral of the bivariate normal density over the
    # correlation, in the arcsine parametrisation
    h2 = mu * mu / (1.0 + var)
    top = math.asin(var / (1.0 + var))
    val, _ = integrate.quad(lambda t: math.exp(-h2 / (1.0 + math.sin(t))) / (2 * math.pi),
                            0.0, top, epsabs=0.0, epsrel=1e-13, limit=500)
    return val


@pytest.mark.parametrize("mu,var", [(0.0, 1.0), (0.3, 0.01), (-3.0, 2.0), (6.0, 0.1),
                                    (8.0, 0.01), (10.0, 1e-6), (0.0, 1e-9), (1.0, 1e4),
                                    (-25.0, 3.0)])
def test_probit_variance_matches_quadrature(mu, var):
    got = math.exp(float(probit_log_variance(mu, var)))
    assert got == pytest.approx(_probit_var_oracle(mu, var), rel=1e-8)


def test_probit_variance_at_zero_mean():
    # Var[Phi(g)] at mu = 0 is asin(rho) / (2 pi)
    var = np.array([1e-12, 0.1, 1.0, 100.0])
    want = np.arcsin(var / (1.0 + var)) / (2 * np.pi)
    np.testing.assert_allclose(np.exp(probit_log_variance(np.zeros(4), var)), want, rtol=1e-12)


@given(st.floats(-4, 4), st.floats(0.01, 20))
def test_probit_variance_agrees_with_bvn_form(mu, var):
    w = Warp.probit(-1.0, 3.0)
    k = covariance(w, mu, var, mu, var, var)
    assert float(variance(w, mu, var)) == pytest.approx(float(k), rel=1e-9, abs=1e-14)


def test_probit_belief_variance_positive_when_saturated():
    kern = KernelSpec("matern32", 16.0, (0.3,))
    x = np.linspace(0, 1, 8)[:, None]
    model = condition(prior_model(0.0, kern), x, np.full(8, 7.5))
    b = MomentBelief(model, Warp.probit())
    xs = np.linspace(0, 1, 30)[:, None]
    v = b.var(xs)
    assert np.all(v > 0) and np.all(np.isfinite(b.log_var(xs)))
