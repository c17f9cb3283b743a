import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats as sps

from owra.stats import (
    BivariateGaussianParams,
    CalibrationStats,
    FitMethod,
    GaussianParams,
    TruncatedFitError,
    bivariate_kl,
    bivariate_kl_standard,
    fit_truncated_from_moments,
    fit_truncated_gaussian,
    gaussian_kl,
    pearson_correlation,
    sample_moments,
    truncated_moments,
)


def numeric_kl(p: GaussianParams, q: GaussianParams) -> float:
    """KL by quadrature of p * (log p - log q) over +-14 sd of p."""
    def integrand(x):
        lp = sps.norm.logpdf(x, p.mu, p.sigma)
        return math.exp(lp) * (lp - sps.norm.logpdf(x, q.mu, q.sigma))

    lo, hi = p.mu - 14 * p.sigma, p.mu + 14 * p.sigma
    val, _ = integrate.quad(integrand, lo, hi, points=[p.mu], limit=200, epsabs=1e-11, epsrel=1e-11)
    return val


@pytest.mark.parametrize(
    "values, mean, std",
    [([0.5, 0.5, 0.5], 0.5, 0.0), ([0, 1], 0.5, 0.5), ([0.2, 0.4, 0.6, 0.8], 0.5, math.sqrt(0.05))],
)
def test_sample_moments(values, mean, std):
    m, s = sample_moments(values)
    assert m == pytest.approx(mean, abs=1e-15)
    assert s == pytest.approx(std, abs=1e-15)


def test_sample_moments_needs_two():
    with pytest.raises(ValueError):
        sample_moments([0.3])


def test_gaussian_kl_examples():
    p = GaussianParams(0.9, 0.1)
    q = GaussianParams(0.8, 0.2)
    assert gaussian_kl(p, p) == 0.0
    assert gaussian_kl(p, q) == pytest.approx(0.443147, abs=1e-6)
    assert gaussian_kl(p, q) == pytest.approx(numeric_kl(p, q), abs=1e-9)
    same_sd = GaussianParams(0.3, 0.2)
    assert gaussian_kl(same_sd, q) == pytest.approx((0.3 - 0.8) ** 2 / (2 * 0.04), rel=1e-12)


_mu = st.floats(0, 1)
_sd = st.floats(0.01, 0.5)


@settings(max_examples=300, deadline=None)
@given(_mu, _sd, _mu, _sd)
def test_gaussian_kl_nonnegative(mu, sd, m, s):
    d = gaussian_kl(GaussianParams(mu, sd), GaussianParams(m, s))
    assert d >= -1e-15
    if (mu, sd) != (m, s):
        assert d > 0 or (abs(mu - m) < 1e-7 and abs(sd - s) < 1e-7)


def test_gaussian_params_invariant():
    with pytest.raises(ValueError):
        GaussianParams(0.5, 0.0)


def test_bivariate_published_example():
    p = BivariateGaussianParams(0.8, 0.7, 0.1, 0.2, 0.3)
    q = BivariateGaussianParams(0.9, 0.8, 0.1, 0.2, 0.3)
    assert bivariate_kl(p, q) == pytest.approx(0.52198, abs=5e-6)


def test_bivariate_independent_reduction():
    p = BivariateGaussianParams(0.8, 0.6, 0.1, 0.3, 0.0)
    q = BivariateGaussianParams(0.7, 0.9, 0.2, 0.25, 0.0)
    expected = sum(
        math.log(s / sd) + ((mu - m) ** 2 + (sd - s) ** 2) / (2 * s * s)
        for mu, sd, m, s in [(0.8, 0.1, 0.7, 0.2), (0.6, 0.3, 0.9, 0.25)]
    )
    assert bivariate_kl(p, q) == pytest.approx(expected, rel=1e-12)


_corr = st.floats(-0.95, 0.95)


@settings(max_examples=200, deadline=None)
@given(_mu, _mu, _sd, _sd, _corr)
def test_bivariate_self_divergence_zero(m1, m2, s1, s2, r):
    p = BivariateGaussianParams(m1, m2, s1, s2, r)
    assert bivariate_kl(p, p) == pytest.approx(0.0, abs=1e-12)
    assert bivariate_kl_standard(p, p) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(_mu, _mu, _sd, _sd, _corr, _mu, _mu, _sd, _sd, _corr)
def test_forms_differ_only_through_spread_terms(a1, a2, b1, b2, r1, c1, c2, d1, d2, r2):
    p = BivariateGaussianParams(a1, a2, b1, b2, r1)
    q = BivariateGaussianParams(c1, c2, d1, d2, r2)
    k1, k2 = b1 / d1, b2 / d2
    gap = (k1 + k2 - 2) / (1 - r2 * r2)
    assert bivariate_kl(p, q) == pytest.approx(bivariate_kl_standard(p, q) - gap, rel=1e-9, abs=1e-9)


def test_bivariate_standard_matches_monte_carlo():
    p = BivariateGaussianParams(0.8, 0.7, 0.1, 0.2, 0.3)
    q = BivariateGaussianParams(0.85, 0.75, 0.12, 0.15, -0.2)
    cov = lambda g: np.array(
        [[g.sigma1 ** 2, g.corr * g.sigma1 * g.sigma2], [g.corr * g.sigma1 * g.sigma2, g.sigma2 ** 2]]
    )
    rng = np.random.default_rng(5)
    x = rng.multivariate_normal([p.mu1, p.mu2], cov(p), 400_000)
    mc = np.mean(
        sps.multivariate_normal([p.mu1, p.mu2], cov(p)).logpdf(x)
        - sps.multivariate_normal([q.mu1, q.mu2], cov(q)).logpdf(x)
    )
    assert bivariate_kl_standard(p, q) == pytest.approx(mc, abs=0.01)
    # The published form departs from the Monte-Carlo value when spreads differ;
    # the gap is reported rather than asserted.
    print(f"published form {bivariate_kl(p, q):.5f} vs Monte Carlo {mc:.5f}")


def test_pearson_examples():
    a = [0.1, 0.5, 0.2, 0.9]
    assert pearson_correlation(a, a) == pytest.approx(1.0)
    assert pearson_correlation(a, [-v for v in a]) == pytest.approx(-1.0)
    assert pearson_correlation([0, 1, 2], [0, 1, 0]) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        pearson_correlation([1, 1, 1], [0, 1, 2])


def test_truncated_fit_negligible_truncation():
    rng = np.random.default_rng(2)
    x = rng.normal(0.3, 0.05, 5000)
    fit = fit_truncated_gaussian(x)
    m, s = sample_moments(x)
    assert fit.mu == pytest.approx(m, abs=1e-9)
    assert fit.sigma == pytest.approx(s, abs=1e-9)
    assert fit.mu == pytest.approx(0.3, abs=0.005)


def test_truncated_fit_far_bound_equals_raw_moments():
    # Six or more standard deviations below the bound the truncation changes the
    # moments by less than 1e-8 relative; at four it is still ~1e-4.
    for gap in (6.0, 8.0, 20.0):
        fit = fit_truncated_from_moments(1.0 - gap * 0.02, 0.02)
        assert fit.mu == pytest.approx(1.0 - gap * 0.02, abs=1e-6)
        assert fit.sigma == pytest.approx(0.02, abs=1e-6)


def test_truncated_fit_constant_rejected():
    with pytest.raises(ValueError):
        fit_truncated_gaussian([0.7] * 10)


def test_truncated_fit_infeasible():
    # Mass piled against the bound with sd larger than the gap to it.
    with pytest.raises(TruncatedFitError):
        fit_truncated_from_moments(0.95, 0.1)


def test_truncated_fit_simulation_oracle():
    rng = np.random.default_rng(11)
    x = rng.normal(1.05, 0.15, 60_000)
    x = x[x <= 1.0][:10_000]
    fit = fit_truncated_gaussian(x)
    assert fit.mu == pytest.approx(1.05, rel=0.05)
    assert fit.sigma == pytest.approx(0.15, rel=0.05)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 1.5), st.floats(0.02, 0.5))
def test_truncated_fit_consistency(mu, sigma):
    m, s = truncated_moments(mu, sigma, 1.0)
    if (1.0 - mu) / sigma < -3:
        return  # deep truncation; moments lose too many digits to invert
    fit = fit_truncated_from_moments(m, s)
    assert fit.mu == pytest.approx(mu, abs=1e-4)
    assert fit.sigma == pytest.approx(sigma, abs=1e-4)


def test_truncated_moments_match_scipy():
    for mu, sigma in [(0.9, 0.1), (1.05, 0.15), (0.2, 0.4)]:
        dist = sps.truncnorm(-np.inf, (1 - mu) / sigma, loc=mu, scale=sigma)
        m, s = truncated_moments(mu, sigma)
        assert m == pytest.approx(dist.mean(), rel=1e-10)
        assert s == pytest.approx(dist.std(), rel=1e-9)


def test_calibration_json_round_trip(tmp_path):
    cal = CalibrationStats(GaussianParams(0.91, 0.015), GaussianParams(0.88, 0.1), 0.2, "raw_moments")
    path = tmp_path / "cal.json"
    cal.save(path)
    assert CalibrationStats.load(path) == cal
    assert cal.fit_method is FitMethod.RAW
    assert set(cal.to_dict()) == {"softmax", "evm", "corr_r", "fit_method"}
