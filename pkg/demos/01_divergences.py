"""How far is a batch of scores from the reference distribution?

Walks through the closed-form divergences behind the KL policies and checks
them against brute-force integration.
Run: python demos/01_divergences.py
"""
import math

import numpy as np
from scipy import integrate, stats

from owra.stats import (
    BivariateGaussianParams,
    GaussianParams,
    bivariate_kl,
    bivariate_kl_standard,
    fit_truncated_gaussian,
    gaussian_kl,
    sample_moments,
)

# %% Univariate: closed form vs quadrature
batch = GaussianParams(0.9, 0.1)
reference = GaussianParams(0.8, 0.2)


def integrand(x):
    lp = stats.norm.logpdf(x, batch.mu, batch.sigma)
    return math.exp(lp) * (lp - stats.norm.logpdf(x, reference.mu, reference.sigma))


numeric, _ = integrate.quad(integrand, -1, 3, points=[0.9])
print(f"KL closed form {gaussian_kl(batch, reference):.6f}   quadrature {numeric:.6f}")

# %% Two scores at once
# The fusion policy compares the joint (SoftMax, EVM) distribution. Two
# closed forms are available; they coincide when the spreads agree...
p = BivariateGaussianParams(0.8, 0.7, 0.1, 0.2, 0.3)
q = BivariateGaussianParams(0.9, 0.8, 0.1, 0.2, 0.3)
print(f"equal spreads:    published {bivariate_kl(p, q):.5f}  standard {bivariate_kl_standard(p, q):.5f}")

# ...and part ways when they do not. Monte Carlo sides with the standard one.
q = BivariateGaussianParams(0.9, 0.8, 0.05, 0.3, 0.3)


def cov(g):
    c = g.corr * g.sigma1 * g.sigma2
    return [[g.sigma1 ** 2, c], [c, g.sigma2 ** 2]]


draws = np.random.default_rng(0).multivariate_normal([p.mu1, p.mu2], cov(p), 200_000)
mc = np.mean(
    stats.multivariate_normal([p.mu1, p.mu2], cov(p)).logpdf(draws)
    - stats.multivariate_normal([q.mu1, q.mu2], cov(q)).logpdf(draws)
)
print(f"unequal spreads:  published {bivariate_kl(p, q):.5f}  standard {bivariate_kl_standard(p, q):.5f}  Monte Carlo {mc:.5f}")

# %% Scores are capped at 1
# SoftMax maxima pile up against the bound, so raw moments understate the
# underlying spread. Moment matching against a Gaussian truncated at 1 undoes it.
rng = np.random.default_rng(1)
x = rng.normal(1.05, 0.15, 50_000)
x = x[x <= 1][:10_000]
print("raw moments       mean %.4f sd %.4f" % sample_moments(x))
fit = fit_truncated_gaussian(x)
print(f"truncated fit     mu   {fit.mu:.4f} sd {fit.sigma:.4f}   (generated with 1.05, 0.15)")
