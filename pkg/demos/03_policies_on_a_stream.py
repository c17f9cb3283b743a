"""Watch the five policies react to a stream whose unknown share jumps.

Run: python demos/03_policies_on_a_stream.py
"""
from owra.policies import OndParams, PolicyConfig, Variant, calibrate, run_policy
from owra.scores import batch_stream
from owra.stats import FitMethod
from owra.testbed import TestConfig, generate_test, synth_calibration_records, synth_pools

pools = synth_pools(seed=0)
cal = calibrate(synth_calibration_records(seed=1), FitMethod.RAW)
print("calibration:", cal.to_dict())

# %% One 4000-image test: 1% unknown, then 15% from image 2001 on
config = TestConfig(phase2_unknown_pct=15, seed=3)
batches = batch_stream(generate_test(config, pools, trial_index=0), config.batch_size)
print(f"{len(batches)} batches; the change starts in batch {config.ground_truth_batch}")

# Hand-picked tolerances, in the range threshold selection usually lands.
tolerances = {
    Variant.MEAN_SOFTMAX: 0.911,
    Variant.KL_SOFTMAX: 0.12,
    Variant.KL_EVM: 0.55,
    Variant.BIVARIATE_KL: 0.75,
    Variant.OND: 0.009,
}

# %% Verdict strips: '.' Reliable, '#' Unreliable
for variant, tol in tolerances.items():
    run = run_policy(PolicyConfig(variant, tol, cal, OndParams(0.5, 0.01)), batches)
    strip = "".join("." if v.value == "Reliable" else "#" for v in run.verdicts)
    print(f"{variant.value:>13} {strip}  detected at {run.detection_index}")
print(" " * 14 + " " * (config.ground_truth_batch - 1) + "^ change")
