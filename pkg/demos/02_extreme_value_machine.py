"""Train a small Extreme Value Machine and let it reject a novel cluster.

Run: python demos/02_extreme_value_machine.py
"""
import numpy as np

from owra.evm import EvmHyper, class_probs, classify, evm_score_stream, evm_train

rng = np.random.default_rng(7)

# %% Two known classes, 10 units apart
cat = rng.normal([0, 0], 0.5, (50, 2))
dog = rng.normal([10, 0], 0.5, (50, 2))
x = np.vstack([cat, dog])
y = np.r_[np.ones(50, int), np.full(50, 2)]

# Tail size is clamped to the 50 available negatives.
model = evm_train(x, y, EvmHyper(tail_size=50, distance_multiplier=0.45, cover_threshold=0.7))
print("extreme vectors kept per class:", model.n_extreme_vectors())
for label, evs in model.classes.items():
    for ev in evs:
        print(f"  class {label} at {np.round(ev.location, 2)}  scale {ev.weibull.scale:.2f} shape {ev.weibull.shape:.1f}")

# %% Every training point stays covered by its own class
own = [class_probs(model, p)[int(lab)] for p, lab in zip(x, y)]
print(f"lowest own-class probability on training data: {min(own):.3f}")

# %% Something never seen before
novel = rng.normal([5, 19.4], 0.5, (50, 2))
labels = [classify(model, p, tau=0.5).label for p in novel]
print(f"novel cluster labelled unknown: {labels.count(0)}/50")

# The per-sample maximum probability is exactly the max_evm score the
# reliability policies consume.
print("max_evm of three known and three novel points:",
      np.round(evm_score_stream(model, np.vstack([cat[:3], novel[:3]])), 3))
