import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_batch
from owra.policies import (
    OndParams,
    PolicyConfig,
    PolicyState,
    StateKind,
    Variant,
    Verdict,
    bivariate_kl_step,
    bivariate_statistic,
    calibrate,
    kl_statistic,
    kl_step,
    mean_softmax_step,
    ond_step,
    run_policy,
    verdicts_from_trace,
)
from owra.scores import Batch, ScoreRecord
from owra.stats import CalibrationStats, FitMethod, GaussianParams, gaussian_kl, truncated_moments

R, U = Verdict.RELIABLE, Verdict.UNRELIABLE
CAL = CalibrationStats(GaussianParams(0.8, 0.2), GaussianParams(0.8, 0.2), 0.3, FitMethod.RAW)


def batch_with_moments(mean, sd, n=2):
    # Two points at mean +- sd have exactly these population moments.
    return make_batch([mean - sd, mean + sd] * (n // 2), [mean - sd, mean + sd] * (n // 2))


def test_mean_softmax_hand_trace():
    s = PolicyState.initial(StateKind.MEAN_MU)
    assert s.value == 1.0
    v, s = mean_softmax_step(s, make_batch([0.8, 0.6, 0.7, 0.9]), 0.7)
    assert v is R and s.value == pytest.approx(0.75, abs=1e-15)
    v, s = mean_softmax_step(s, make_batch([0.6, 0.7, 0.65, 0.65]), 0.7)
    assert v is U and s.value == pytest.approx(0.65, abs=1e-15)
    v, s = mean_softmax_step(s, make_batch([0.9, 0.9]), 0.7)
    assert v is U and s.value == pytest.approx(0.65, abs=1e-15)


def test_mean_softmax_empty_batch():
    with pytest.raises(ValueError):
        mean_softmax_step(PolicyState.initial(StateKind.MEAN_MU), Batch(1, ()), 0.5)


def test_kl_identity_and_example():
    s0 = PolicyState.initial(StateKind.KL_D)
    v, s = kl_step(s0, batch_with_moments(0.8, 0.2), "softmax", CAL, 1e-9)
    assert s.value == pytest.approx(0.0, abs=1e-12) and v is R
    v, s = kl_step(s0, batch_with_moments(0.9, 0.1), "softmax", CAL, 0.443147)
    assert s.value == pytest.approx(0.4431471805599453, abs=1e-12)
    assert v is U
    v, _ = kl_step(s0, batch_with_moments(0.9, 0.1), "softmax", CAL, 0.4432)
    assert v is R


def test_kl_latches():
    s = PolicyState.initial(StateKind.KL_D)
    _, s = kl_step(s, batch_with_moments(0.5, 0.05), "softmax", CAL, 0.5)
    high = s.value
    v, s = kl_step(s, batch_with_moments(0.8, 0.2), "softmax", CAL, 0.5)
    assert s.value == high and v is U


def test_kl_columns_share_computation():
    b = make_batch([0.7, 0.9, 0.95, 0.6], [0.2, 0.4, 0.1, 0.3])
    swapped = make_batch([0.2, 0.4, 0.1, 0.3], [0.7, 0.9, 0.95, 0.6])
    cal = CalibrationStats(GaussianParams(0.8, 0.1), GaussianParams(0.3, 0.2), 0.1, FitMethod.RAW)
    cal_swapped = CalibrationStats(cal.evm, cal.softmax, 0.1, FitMethod.RAW)
    assert kl_statistic(b, "softmax", cal) == kl_statistic(swapped, "evm", cal_swapped)
    assert kl_statistic(b, "evm", cal) == kl_statistic(swapped, "softmax", cal_swapped)


def test_kl_zero_variance_floor():
    d = kl_statistic(make_batch([0.8, 0.8, 0.8]), "softmax", CAL)
    assert d == pytest.approx(gaussian_kl(GaussianParams(0.8, 1e-6), CAL.softmax))


def test_kl_truncated_falls_back_to_raw_reference():
    cal = CalibrationStats(GaussianParams(0.95, 0.05), GaussianParams(0.9, 0.1), 0.0, FitMethod.TRUNCATED)
    b = make_batch([0.99, 0.999, 0.9, 1.0])  # infeasible for a truncated fit
    mean, sd = truncated_moments(0.95, 0.05)
    want = gaussian_kl(GaussianParams(*np.array([b.softmax.mean(), b.softmax.std()])), GaussianParams(mean, sd))
    assert kl_statistic(b, "softmax", cal) == pytest.approx(want, rel=1e-12)


def test_bivariate_identity_and_example():
    s0 = PolicyState.initial(StateKind.KL_D)
    # Four points with identity population covariance, mapped through a Cholesky
    # factor: exact means (0.8, 0.7), sds (0.1, 0.2) and correlation 0.3.
    z = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], float)
    u = z @ np.linalg.cholesky([[1.0, 0.3], [0.3, 1.0]]).T
    sm = 0.8 + 0.1 * u[:, 0]
    ev = 0.7 + 0.2 * u[:, 1]
    batch = make_batch(sm, ev)
    assert np.corrcoef(sm, ev)[0, 1] == pytest.approx(0.3)
    same = CalibrationStats(GaussianParams(0.8, 0.1), GaussianParams(0.7, 0.2), 0.3, FitMethod.RAW)
    v, s = bivariate_kl_step(s0, batch, same, 0.01)
    assert s.value == pytest.approx(0.0, abs=1e-12) and v is R
    ref = CalibrationStats(GaussianParams(0.9, 0.1), GaussianParams(0.8, 0.2), 0.3, FitMethod.RAW)
    for form in ("standard", "published"):
        assert bivariate_statistic(batch, ref, form) == pytest.approx(0.5219780219780219, abs=1e-9)


def test_bivariate_needs_three_records():
    with pytest.raises(ValueError):
        bivariate_statistic(make_batch([0.5, 0.6], [0.5, 0.6]), CAL)


def test_bivariate_perfect_correlation_clamped():
    b = make_batch([0.5, 0.6, 0.7], [0.1, 0.2, 0.3])
    assert np.isfinite(bivariate_statistic(b, CAL))


def test_ond_hand_trace():
    b = make_batch([0.5] * 4, [0.9, 0.2, 0.1, 0.95])
    v, s = ond_step(PolicyState.initial(StateKind.OND_EPS), b, 0.5, 0.05, 0.1)
    assert s.value == pytest.approx(0.15, abs=1e-15)
    assert v is U


def test_ond_extremes():
    s0 = PolicyState.initial(StateKind.OND_EPS)
    v, s = ond_step(s0, make_batch([0.5] * 3, [0.6, 0.9, 1.0]), 0.5, 0.0, 0.1)
    assert s.value == 0.0 and v is R
    _, s = ond_step(s0, make_batch([0.5] * 3, [0.0] * 3), 0.5, 0.0, 1.0)
    assert s.value == 0.5


def test_wrong_state_kind_rejected():
    with pytest.raises(ValueError):
        ond_step(PolicyState.initial(StateKind.KL_D), make_batch([0.5]), 0.5, 0.0, 0.1)


def test_config_validation():
    with pytest.raises(ValueError):
        PolicyConfig(Variant.KL_SOFTMAX, 0.1)
    with pytest.warns(UserWarning):
        OndParams(delta=0.8)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        OndParams(delta=0.5)


def _stream(values_sm, values_ev, n):
    recs = [ScoreRecord(str(i), a, b) for i, (a, b) in enumerate(zip(values_sm, values_ev))]
    return [Batch(i + 1, tuple(recs[i * n:(i + 1) * n])) for i in range(len(recs) // n)]


def test_run_policy_detects_evm_collapse():
    sm = [0.9] * 400
    ev = [0.95, 0.85] * 100 + [0.0] * 200
    run = run_policy(PolicyConfig(Variant.OND, 0.1, ond=OndParams(0.5, 0.0)), _stream(sm, ev, 20))
    assert run.detection_index == 11
    assert run.verdicts == [R] * 10 + [U] * 10


def test_run_policy_quiet_on_matched_stream():
    rng = np.random.default_rng(0)
    sm = np.clip(rng.normal(0.8, 0.05, 2000), 0.01, 1)
    ev = np.clip(rng.normal(0.7, 0.05, 2000), 0, 1)
    cal = calibrate([ScoreRecord(str(i), a, b) for i, (a, b) in enumerate(zip(sm, ev))], FitMethod.RAW)
    batches = _stream(sm, ev, 100)
    for variant in (Variant.KL_SOFTMAX, Variant.KL_EVM, Variant.BIVARIATE_KL):
        assert run_policy(PolicyConfig(variant, 0.5, cal), batches).detection_index is None
    assert run_policy(PolicyConfig(Variant.MEAN_SOFTMAX, 0.6), batches).detection_index is None


def test_run_policy_needs_batches():
    with pytest.raises(ValueError):
        run_policy(PolicyConfig(Variant.MEAN_SOFTMAX, 0.5), [])


def test_calibrate():
    rng = np.random.default_rng(1)
    sm = np.clip(rng.normal(0.6, 0.05, 20_000), 0.01, 1)
    ev = np.clip(rng.normal(0.4, 0.08, 20_000), 0, 1)
    recs = [ScoreRecord(str(i), a, b) for i, (a, b) in enumerate(zip(sm, ev))]
    for method in FitMethod:
        cal = calibrate(recs, method)
        assert cal.softmax.mu == pytest.approx(0.6, abs=0.002)
        assert cal.softmax.sigma == pytest.approx(0.05, rel=0.02)
        assert cal.evm.mu == pytest.approx(0.4, abs=0.003)
        assert cal.fit_method is method
    with pytest.raises(ValueError):
        calibrate([ScoreRecord("a", 0.5, 0.5)] * 10)
    with pytest.raises(ValueError):
        calibrate([ScoreRecord(str(i), 0.1 + 0.01 * i, 0.01 * i) for i in range(10)])


def test_calibrate_truncated_falls_back_with_warning():
    recs = [ScoreRecord(str(i), v, 0.5 + 0.01 * (i % 7)) for i, v in enumerate([1.0, 0.999, 0.5] * 20)]
    with pytest.warns(UserWarning, match="raw moments"):
        cal = calibrate(recs, FitMethod.TRUNCATED)
    assert cal.fit_method is FitMethod.RAW


def test_verdicts_from_trace_match_run():
    rng = np.random.default_rng(2)
    sm = rng.uniform(0.3, 1.0, 600)
    ev = rng.uniform(0.0, 1.0, 600)
    batches = _stream(sm, ev, 30)
    cal = CalibrationStats(GaussianParams(0.7, 0.2), GaussianParams(0.5, 0.3), 0.0, FitMethod.RAW)
    for variant, tol in [(Variant.MEAN_SOFTMAX, 0.62), (Variant.KL_EVM, 0.02), (Variant.OND, 0.1)]:
        run = run_policy(PolicyConfig(variant, tol, cal), batches)
        assert verdicts_from_trace(run.state_trace, variant, tol) == run.verdicts


# --- properties ----------------------------------------------------------

scores = st.floats(0.01, 1.0)
evms = st.floats(0.0, 1.0)


@st.composite
def batches(draw, n_batches=6, size=5):
    out = []
    for i in range(n_batches):
        sm = draw(st.lists(scores, min_size=size, max_size=size))
        ev = draw(st.lists(evms, min_size=size, max_size=size))
        out.append(make_batch(sm, ev, index=i + 1))
    return out


def _configs(tol):
    cal = CalibrationStats(GaussianParams(0.8, 0.1), GaussianParams(0.7, 0.2), 0.2, FitMethod.TRUNCATED)
    return [
        PolicyConfig(Variant.MEAN_SOFTMAX, tol),
        PolicyConfig(Variant.KL_SOFTMAX, tol, cal),
        PolicyConfig(Variant.KL_EVM, tol, cal),
        PolicyConfig(Variant.BIVARIATE_KL, tol, cal),
        PolicyConfig(Variant.OND, tol, ond=OndParams(0.5, 0.01)),
    ]


@settings(max_examples=60, deadline=None)
@given(batches(), st.floats(0.0, 1.0))
def test_state_and_verdict_monotone(stream, tol):
    for cfg in _configs(tol):
        run = run_policy(cfg, stream)
        diffs = np.diff(run.state_trace)
        if cfg.variant is Variant.MEAN_SOFTMAX:
            assert np.all(diffs <= 0)
        else:
            assert np.all(diffs >= 0)
        flags = [v is U for v in run.verdicts]
        assert flags == sorted(flags)


@settings(max_examples=60, deadline=None)
@given(batches(n_batches=1, size=7), st.randoms(use_true_random=False))
def test_permutation_invariance(stream, rnd):
    (b,) = stream
    recs = list(b.records)
    rnd.shuffle(recs)
    shuffled = Batch(1, tuple(recs))
    cal = _configs(0.1)[1].calibration
    assert kl_statistic(shuffled, "softmax", cal) == pytest.approx(kl_statistic(b, "softmax", cal), rel=1e-9, abs=1e-12)
    assert kl_statistic(shuffled, "evm", cal) == pytest.approx(kl_statistic(b, "evm", cal), rel=1e-9, abs=1e-12)
    s0 = PolicyState.initial(StateKind.OND_EPS)
    a1 = ond_step(s0, b, 0.5, 0.02, 0.1)[1].value
    a2 = ond_step(s0, shuffled, 0.5, 0.02, 0.1)[1].value
    assert a1 == pytest.approx(a2, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(batches(n_batches=1, size=8), st.floats(0, 1), st.floats(0, 1), st.floats(0.3, 0.7), st.floats(0, 0.5))
def test_larger_rho_hat_never_turns_reliable_unreliable(stream, r1, r2, delta, xi):
    lo, hi = sorted((r1, r2))
    s0 = PolicyState.initial(StateKind.OND_EPS)
    v_lo, _ = ond_step(s0, stream[0], delta, lo, xi)
    v_hi, _ = ond_step(s0, stream[0], delta, hi, xi)
    assert not (v_lo is R and v_hi is U)
