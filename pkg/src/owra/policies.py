"""Batch-wise reliability policies with latched (monotone) state.

Every policy reduces a batch to one statistic, folds it into a running
minimum or maximum, and compares the running value with a tolerance. Because
the state only moves one way, a policy that has once said Unreliable keeps
saying so.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .scores import Batch, ScoreRecord
from .stats import (
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

SIGMA_FLOOR = 1e-6
CORR_LIMIT = 1.0 - 1e-9


class Verdict(str, Enum):
    RELIABLE = "Reliable"
    UNRELIABLE = "Unreliable"


class StateKind(str, Enum):
    MEAN_MU = "MeanMu"
    KL_D = "KlD"
    OND_EPS = "OndEps"


@dataclass(frozen=True)
class PolicyState:
    kind: StateKind
    value: float

    @classmethod
    def initial(cls, kind: StateKind) -> "PolicyState":
        return cls(kind, 1.0 if kind is StateKind.MEAN_MU else 0.0)


class Variant(str, Enum):
    MEAN_SOFTMAX = "mean-softmax"
    KL_SOFTMAX = "kl-softmax"
    KL_EVM = "kl-evm"
    BIVARIATE_KL = "bikl"
    OND = "ond"

    @property
    def state_kind(self) -> StateKind:
        if self is Variant.MEAN_SOFTMAX:
            return StateKind.MEAN_MU
        if self is Variant.OND:
            return StateKind.OND_EPS
        return StateKind.KL_D

    @property
    def alarm_when_low(self) -> bool:
        """True when small state values signal trouble (only the mean baseline)."""
        return self is Variant.MEAN_SOFTMAX

    @property
    def needs_calibration(self) -> bool:
        return self in (Variant.KL_SOFTMAX, Variant.KL_EVM, Variant.BIVARIATE_KL)


ALL_VARIANTS = tuple(Variant)


@dataclass(frozen=True)
class OndParams:
    delta: float = 0.5
    rho_hat: float = 0.0

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not 0 <= self.rho_hat <= 1:
            raise ValueError("rho_hat must lie in [0, 1]")
        if not 0.3 < self.delta < 0.7:
            warnings.warn(
                f"delta={self.delta} is outside (0.3, 0.7), the useful window for cover threshold 0.7",
                stacklevel=3,
            )


@dataclass(frozen=True)
class PolicyConfig:
    variant: Variant
    tolerance: float
    calibration: CalibrationStats | None = None
    ond: OndParams = field(default_factory=OndParams)
    # "standard" is the textbook bivariate KL; "published" reproduces the
    # alternative closed form kept in stats.bivariate_kl.
    bivariate_form: str = "standard"

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.variant.needs_calibration and self.calibration is None:
            raise ValueError(f"{self.variant.value} requires calibration statistics")
        if self.bivariate_form not in ("standard", "published"):
            raise ValueError(f"unknown bivariate form {self.bivariate_form!r}")
        if math.isnan(self.tolerance):
            raise ValueError("tolerance must not be NaN")

    def with_tolerance(self, tolerance: float) -> "PolicyConfig":
        return PolicyConfig(self.variant, tolerance, self.calibration, self.ond, self.bivariate_form)


# --- calibration ---------------------------------------------------------

def calibrate(records: Sequence[ScoreRecord], fit_method: FitMethod | str = FitMethod.TRUNCATED) -> CalibrationStats:
    """Fit reference Gaussians to both score columns and their correlation.

    If the truncated fit is infeasible for either column, both columns fall
    back to raw moments (with a warning) so the two stay comparable.
    """
    if len(records) < 2:
        raise ValueError("calibration needs at least two records")
    sm = np.fromiter((r.max_softmax for r in records), float, len(records))
    ev = np.fromiter((r.max_evm for r in records), float, len(records))
    for name, col in (("max_softmax", sm), ("max_evm", ev)):
        if col.std() == 0:
            raise ValueError(f"degenerate calibration data: {name} has zero variance")
    corr = pearson_correlation(sm, ev)
    if abs(corr) >= 1 - 1e-12:
        raise ValueError(f"calibration columns perfectly correlated (r={corr}); |r| < 1 required")

    method = FitMethod.parse(fit_method)
    if method is FitMethod.TRUNCATED:
        try:
            return CalibrationStats(fit_truncated_gaussian(sm), fit_truncated_gaussian(ev), corr, method)
        except TruncatedFitError as exc:
            warnings.warn(f"truncated fit infeasible ({exc}); using raw moments", stacklevel=2)
            method = FitMethod.RAW
    return CalibrationStats(
        GaussianParams(*sample_moments(sm)), GaussianParams(*sample_moments(ev)), corr, method
    )


# --- per-batch statistics ------------------------------------------------

def _raw_reference(ref: GaussianParams, method: FitMethod) -> GaussianParams:
    """Raw moments implied by a reference fitted with ``method``."""
    if method is FitMethod.TRUNCATED:
        return GaussianParams(*truncated_moments(ref.mu, ref.sigma))
    return ref


def _fit_batch_column(values: np.ndarray, method: FitMethod) -> tuple[GaussianParams, bool]:
    """Batch fit with the sigma floor. Second item says whether ``method`` was honoured."""
    if len(values) < 2:
        raise ValueError("KL policies need batches of at least two records")
    mean, std = sample_moments(values)
    std = max(std, SIGMA_FLOOR)
    if method is FitMethod.TRUNCATED:
        try:
            return fit_truncated_from_moments(mean, std), True
        except TruncatedFitError:
            return GaussianParams(mean, std), False
    return GaussianParams(mean, std), True


def kl_statistic(batch: Batch, which: str, cal: CalibrationStats) -> float:
    """Divergence of one batch column from its calibrated reference.

    A batch whose moments no truncated Gaussian can produce is compared on
    raw moments against the raw moments implied by the reference.
    """
    fitted, honoured = _fit_batch_column(batch.column(which), cal.fit_method)
    ref = cal.column(which)
    if not honoured:
        ref = _raw_reference(ref, cal.fit_method)
    return gaussian_kl(fitted, ref)


def _batch_corr(a: np.ndarray, b: np.ndarray) -> float:
    try:
        r = pearson_correlation(a, b)
    except ValueError:
        return 0.0  # a constant column carries no correlation information
    return min(max(r, -CORR_LIMIT), CORR_LIMIT)


def bivariate_statistic(batch: Batch, cal: CalibrationStats, form: str = "standard") -> float:
    if len(batch) < 3:
        raise ValueError("the bivariate policy needs batches of at least three records")
    g1, ok1 = _fit_batch_column(batch.softmax, cal.fit_method)
    g2, ok2 = _fit_batch_column(batch.evm, cal.fit_method)
    ref1, ref2 = cal.softmax, cal.evm
    if not (ok1 and ok2):
        g1, _ = _fit_batch_column(batch.softmax, FitMethod.RAW)
        g2, _ = _fit_batch_column(batch.evm, FitMethod.RAW)
        ref1 = _raw_reference(ref1, cal.fit_method)
        ref2 = _raw_reference(ref2, cal.fit_method)
    p = BivariateGaussianParams(g1.mu, g2.mu, g1.sigma, g2.sigma, _batch_corr(batch.softmax, batch.evm))
    q = BivariateGaussianParams(ref1.mu, ref2.mu, ref1.sigma, ref2.sigma, cal.corr_r)
    kl = bivariate_kl_standard if form == "standard" else bivariate_kl
    return kl(p, q)


def ond_statistic(batch: Batch, delta: float, rho_hat: float) -> float:
    """Excess of low-EVM-score mass over what the expected unknown ratio explains."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    shortfall = np.maximum(0.0, 1.0 - delta - batch.evm)
    return max(0.0, float(shortfall.mean()) - rho_hat * (1.0 - delta))


# --- steps ---------------------------------------------------------------

def _expect(state: PolicyState, kind: StateKind) -> None:
    if state.kind is not kind:
        raise ValueError(f"expected {kind.value} state, got {state.kind.value}")


def _rising(state: PolicyState, value: float, tolerance: float) -> tuple[Verdict, PolicyState]:
    new = PolicyState(state.kind, max(state.value, value))
    return (Verdict.RELIABLE if new.value < tolerance else Verdict.UNRELIABLE), new


def mean_softmax_step(state: PolicyState, batch: Batch, M: float) -> tuple[Verdict, PolicyState]:
    _expect(state, StateKind.MEAN_MU)
    if len(batch) == 0:
        raise ValueError("empty batch")
    new = PolicyState(state.kind, min(state.value, float(batch.softmax.mean())))
    return (Verdict.RELIABLE if new.value > M else Verdict.UNRELIABLE), new


def kl_step(state: PolicyState, batch: Batch, which: str, cal: CalibrationStats, kappa: float):
    _expect(state, StateKind.KL_D)
    return _rising(state, kl_statistic(batch, which, cal), kappa)


def bivariate_kl_step(state: PolicyState, batch: Batch, cal: CalibrationStats, kappa: float, form: str = "standard"):
    _expect(state, StateKind.KL_D)
    return _rising(state, bivariate_statistic(batch, cal, form), kappa)


def ond_step(state: PolicyState, batch: Batch, delta: float, rho_hat: float, Xi: float):
    _expect(state, StateKind.OND_EPS)
    return _rising(state, ond_statistic(batch, delta, rho_hat), Xi)


def policy_step(config: PolicyConfig, state: PolicyState, batch: Batch) -> tuple[Verdict, PolicyState]:
    v = config.variant
    if v is Variant.MEAN_SOFTMAX:
        return mean_softmax_step(state, batch, config.tolerance)
    if v is Variant.KL_SOFTMAX:
        return kl_step(state, batch, "softmax", config.calibration, config.tolerance)
    if v is Variant.KL_EVM:
        return kl_step(state, batch, "evm", config.calibration, config.tolerance)
    if v is Variant.BIVARIATE_KL:
        return bivariate_kl_step(state, batch, config.calibration, config.tolerance, config.bivariate_form)
    return ond_step(state, batch, config.ond.delta, config.ond.rho_hat, config.tolerance)


@dataclass(frozen=True)
class PolicyRun:
    verdicts: list[Verdict]
    state_trace: list[float]
    detection_index: int | None  # batch index (1-based) of the first Unreliable

    def to_dict(self, config: PolicyConfig) -> dict:
        return {
            "variant": config.variant.value,
            "tolerance": config.tolerance,
            "detection_batch": self.detection_index,
            "verdicts": [v.value for v in self.verdicts],
            "state_trace": self.state_trace,
        }


def run_policy(config: PolicyConfig, batches: Sequence[Batch]) -> PolicyRun:
    if not batches:
        raise ValueError("no batches to assess")
    state = PolicyState.initial(config.variant.state_kind)
    verdicts, trace = [], []
    detection = None
    for batch in batches:
        verdict, state = policy_step(config, state, batch)
        verdicts.append(verdict)
        trace.append(state.value)
        if detection is None and verdict is Verdict.UNRELIABLE:
            detection = batch.index
    return PolicyRun(verdicts, trace, detection)


def verdicts_from_trace(trace: Sequence[float], variant: Variant, tolerance: float) -> list[Verdict]:
    """Verdicts a run at ``tolerance`` would have produced from its state trace.

    The trace itself never depends on the tolerance, which is what makes
    threshold sweeps cheap.
    """
    t = np.asarray(trace)
    bad = t <= tolerance if variant.alarm_when_low else t >= tolerance
    return [Verdict.UNRELIABLE if b else Verdict.RELIABLE for b in bad]
