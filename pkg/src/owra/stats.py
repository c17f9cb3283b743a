"""Moment fitting and closed-form divergences between Gaussian score models."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import log_ndtr

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class FitMethod(str, Enum):
    RAW = "raw_moments"
    TRUNCATED = "truncated_moment_match"

    @classmethod
    def parse(cls, value: "str | FitMethod") -> "FitMethod":
        if isinstance(value, cls):
            return value
        aliases = {"raw": cls.RAW, "truncated": cls.TRUNCATED}
        try:
            return aliases.get(value) or cls(value)
        except ValueError:
            raise ValueError(f"unknown fit method {value!r}") from None


@dataclass(frozen=True)
class GaussianParams:
    mu: float
    sigma: float

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)) or not math.isfinite(self.mu):
            raise ValueError(f"invalid Gaussian parameters mu={self.mu!r} sigma={self.sigma!r}")


@dataclass(frozen=True)
class BivariateGaussianParams:
    mu1: float
    mu2: float
    sigma1: float
    sigma2: float
    corr: float

    def __post_init__(self):
        if not (self.sigma1 > 0 and self.sigma2 > 0):
            raise ValueError("standard deviations must be positive")
        if not abs(self.corr) < 1:
            raise ValueError(f"correlation must lie strictly inside (-1, 1), got {self.corr!r}")


@dataclass(frozen=True)
class CalibrationStats:
    """Reference score distributions fitted on known-class validation data."""

    softmax: GaussianParams
    evm: GaussianParams
    corr_r: float
    fit_method: FitMethod = FitMethod.TRUNCATED

    def __post_init__(self):
        if not abs(self.corr_r) < 1:
            raise ValueError(f"corr_r must lie strictly inside (-1, 1), got {self.corr_r!r}")
        object.__setattr__(self, "fit_method", FitMethod.parse(self.fit_method))

    def column(self, which: str) -> GaussianParams:
        if which == "softmax":
            return self.softmax
        if which == "evm":
            return self.evm
        raise ValueError(f"unknown score column {which!r}")

    def bivariate(self) -> BivariateGaussianParams:
        return BivariateGaussianParams(
            self.softmax.mu, self.evm.mu, self.softmax.sigma, self.evm.sigma, self.corr_r
        )

    def to_dict(self) -> dict:
        return {
            "softmax": asdict(self.softmax),
            "evm": asdict(self.evm),
            "corr_r": self.corr_r,
            "fit_method": self.fit_method.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationStats":
        try:
            return cls(
                GaussianParams(float(d["softmax"]["mu"]), float(d["softmax"]["sigma"])),
                GaussianParams(float(d["evm"]["mu"]), float(d["evm"]["sigma"])),
                float(d["corr_r"]),
                FitMethod.parse(d["fit_method"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed calibration document: {exc}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CalibrationStats":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def sample_moments(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population (1/N) standard deviation."""
    x = np.asarray(values, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("need at least two values for a standard deviation")
    return float(x.mean()), float(x.std())


def gaussian_kl(p: GaussianParams, q: GaussianParams) -> float:
    """KL(p || q) for univariate normals; q is the reference."""
    return (
        math.log(q.sigma / p.sigma)
        + (p.sigma ** 2 + (p.mu - q.mu) ** 2) / (2.0 * q.sigma ** 2)
        - 0.5
    )


def bivariate_kl(p: BivariateGaussianParams, q: BivariateGaussianParams) -> float:
    """Bivariate divergence in the form published with the fusion policy.

    Unlike the textbook relative entropy it uses (sigma_i - s_i)^2 in the
    variance terms. The two agree whenever the marginal spreads match.
    See :func:`bivariate_kl_standard` for the textbook version.
    """
    r = q.corr
    d1, d2 = p.mu1 - q.mu1, p.mu2 - q.mu2
    log_term = math.log(
        q.sigma1 * q.sigma2 * math.sqrt(1 - r * r)
        / (p.sigma1 * p.sigma2 * math.sqrt(1 - p.corr ** 2))
    )
    bracket = (
        (d1 ** 2 + (p.sigma1 - q.sigma1) ** 2) / q.sigma1 ** 2
        + (d2 ** 2 + (p.sigma2 - q.sigma2) ** 2) / q.sigma2 ** 2
        - 2 * r * (d1 * d2 + p.corr * p.sigma1 * p.sigma2 - r * q.sigma1 * q.sigma2)
        / (q.sigma1 * q.sigma2)
    )
    return log_term + bracket / (2 * (1 - r * r))


def bivariate_kl_standard(p: BivariateGaussianParams, q: BivariateGaussianParams) -> float:
    """Textbook KL(p || q) between two bivariate normals."""
    r = q.corr
    d1, d2 = p.mu1 - q.mu1, p.mu2 - q.mu2
    s1, s2 = q.sigma1, q.sigma2
    log_term = math.log(s1 * s2 * math.sqrt(1 - r * r) / (p.sigma1 * p.sigma2 * math.sqrt(1 - p.corr ** 2)))
    quad = (
        (d1 ** 2 + p.sigma1 ** 2) / s1 ** 2
        + (d2 ** 2 + p.sigma2 ** 2) / s2 ** 2
        - 2 * r * (d1 * d2 + p.corr * p.sigma1 * p.sigma2) / (s1 * s2)
    )
    return log_term + quad / (2 * (1 - r * r)) - 1.0


def pearson_correlation(a: Sequence[float], b: Sequence[float]) -> float:
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("need two equal-length sequences of at least two values")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0 or syy == 0:
        raise ValueError("correlation undefined for zero-variance input")
    return float(np.clip((xc @ yc) / math.sqrt(sxx * syy), -1.0, 1.0))


# --- upper-truncated Gaussian ---------------------------------------------

class TruncatedFitError(ValueError):
    """Raised when no Gaussian truncated at the bound reproduces the moments."""

    def __init__(self, message: str, residual: float | None = None):
        self.residual = residual
        super().__init__(message if residual is None else f"{message} (residual {residual:.3g})")


def _mills(beta: float) -> float:
    # phi(beta) / Phi(beta), stable for very negative beta
    return math.exp(-0.5 * beta * beta - _LOG_SQRT_2PI - float(log_ndtr(beta)))


def truncated_moments(mu: float, sigma: float, upper: float = 1.0) -> tuple[float, float]:
    """Mean and std of N(mu, sigma^2) conditioned on X <= upper."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    beta = (upper - mu) / sigma
    lam = _mills(beta)
    var_factor = 1.0 - beta * lam - lam * lam
    return mu - sigma * lam, sigma * math.sqrt(max(var_factor, 0.0))


def _ratio_and_slope(beta: float) -> tuple[float, float]:
    """R(beta) = (upper - mean) / std of a standard normal truncated at beta, and dR/dbeta."""
    lam = _mills(beta)
    a = beta + lam
    b = 1.0 - beta * lam - lam * lam
    da = 1.0 - lam * a
    db = -lam + lam * a * (beta + 2.0 * lam)
    sb = math.sqrt(b)
    return a / sb, da / sb - a * db / (2.0 * b * sb)


# Below this standardized bound R(beta) is within ~1e-3 of its limit 1 and the
# variance factor loses too many digits to cancellation.
_BETA_MIN = -25.0
_BETA_MAX = 40.0


def fit_truncated_from_moments(
    mean: float, std: float, upper: float = 1.0, *, max_iter: int = 100, tol: float = 1e-10
) -> GaussianParams:
    """Untruncated (mu, sigma) whose truncation at ``upper`` has the given mean and std.

    Both moment equations collapse to one equation in the standardized bound
    beta = (upper - mu) / sigma, namely R(beta) = (upper - mean) / std, with R
    increasing from 1 to infinity. It is solved by Newton steps kept inside a
    shrinking bracket (bisection when a step leaves it).
    """
    if not std > 0:
        raise ValueError("zero variance: truncated fit undefined")
    if mean > upper:
        raise ValueError("mean lies above the truncation bound")
    target = (upper - mean) / std
    if target <= 1.0:
        raise TruncatedFitError("moments infeasible for a Gaussian truncated at the bound", target - 1.0)

    # R(beta) > beta for all beta, so target + 1 always brackets the root from above
    lo, hi = _BETA_MIN, max(_BETA_MAX, target + 1.0)
    if _ratio_and_slope(lo)[0] >= target:
        raise TruncatedFitError("moments too close to the feasibility boundary", _ratio_and_slope(lo)[0] - target)
    beta = min(max(target, lo), hi)
    resid = math.inf
    for _ in range(max_iter):
        val, slope = _ratio_and_slope(beta)
        resid = val - target
        if abs(resid) <= tol * max(1.0, target):
            break
        if resid > 0:
            hi = beta
        else:
            lo = beta
        step = beta - resid / slope if slope > 0 else math.nan
        beta = step if lo < step < hi else 0.5 * (lo + hi)
    else:
        raise TruncatedFitError("truncated fit did not converge", resid)

    sigma = (upper - mean) / (beta + _mills(beta))
    return GaussianParams(upper - beta * sigma, sigma)


def fit_truncated_gaussian(values: Sequence[float], upper_bound: float = 1.0) -> GaussianParams:
    x = np.asarray(values, dtype=float)
    mean, std = sample_moments(x)
    if np.any(x > upper_bound):
        raise ValueError("values exceed the truncation bound")
    if std == 0:
        raise ValueError("zero sample variance: truncated fit undefined")
    return fit_truncated_from_moments(mean, std, upper_bound)


def fit_gaussian(values: Sequence[float], method: FitMethod | str = FitMethod.RAW) -> GaussianParams:
    method = FitMethod.parse(method)
    if method is FitMethod.TRUNCATED:
        return fit_truncated_gaussian(values)
    mean, std = sample_moments(values)
    if std == 0:
        raise ValueError("zero sample variance")
    return GaussianParams(mean, std)
