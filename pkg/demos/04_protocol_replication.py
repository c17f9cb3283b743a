"""A reduced version of the full evaluation: select thresholds, then sweep.

The full desk-scale run is `owra run --trials 200 --out results/`; this
script uses fewer trials so it finishes in a few seconds.
Run: python demos/04_protocol_replication.py
"""
from owra.testbed import ExperimentConfig, reliability_score, run_experiment

config = ExperimentConfig(trials=60, validation_trials=300, unknown_pcts=(2, 5, 10, 15, 25), seed=0)
result = run_experiment(config, log=print)

# %% Total detection (on-time + late) per unknown percentage
print("\npolicy          " + "".join(f"{q:>7}%" for q in config.unknown_pcts))
for outcome in result.policies:
    cells = "".join(f"{outcome.metrics[q].total_detection_pct:8.1f}" for q in config.unknown_pcts)
    print(f"{outcome.variant.value:<16}{cells}")

# %% How often each policy flags the change in exactly the right batch
print("\non-time %      " + "".join(f"{q:>7}%" for q in config.unknown_pcts))
for outcome in result.policies:
    cells = "".join(f"{outcome.metrics[q].on_time_pct:8.1f}" for q in config.unknown_pcts)
    print(f"{outcome.variant.value:<16}{cells}")

# %% Reliability score: best on-time x detection product over the threshold grid
print()
for outcome in result.policies:
    scores = [reliability_score(outcome.sweeps[q]) for q in config.unknown_pcts]
    print(f"{outcome.variant.value:<16} mean reliability score {sum(scores) / len(scores):.3f}")
