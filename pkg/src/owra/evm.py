"""A compact Extreme Value Machine.

Each training point gets a Weibull model of its distances to the nearest
points of other classes; a greedy set cover keeps only the points needed to
cover the class. The inclusion probability of a query at distance ``d`` from a
kept point is ``exp(-(d / scale) ** shape)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist


@dataclass(frozen=True)
class WeibullParams:
    scale: float
    shape: float

    def __post_init__(self):
        if not (self.scale > 0 and self.shape > 0 and math.isfinite(self.scale) and math.isfinite(self.shape)):
            raise ValueError(f"invalid Weibull parameters scale={self.scale!r} shape={self.shape!r}")

    def inclusion(self, distance):
        """Probability of inclusion at the given distance(s); 1 at d = 0, decays to 0."""
        d = np.asarray(distance, dtype=float)
        return np.exp(-np.power(d / self.scale, self.shape))


def weibull_fit(tail_distances: Sequence[float], *, max_iter: int = 100, tol: float = 1e-12) -> WeibullParams:
    """Two-parameter Weibull maximum likelihood.

    Newton's method on the shape's profile score equation, with the scale in
    closed form. Distances are rescaled by their maximum first so powers never
    overflow; the fit is scale-equivariant so this changes nothing else.
    """
    d = np.asarray(tail_distances, dtype=float)
    if d.ndim != 1 or d.size < 2:
        raise ValueError("need at least two distances")
    if np.any(~np.isfinite(d)) or np.any(d <= 0):
        raise ValueError("distances must be finite and strictly positive")
    top = d.max()
    logx = np.log(d / top)
    spread = logx.std()
    if spread == 0:
        raise ValueError("all distances equal: Weibull shape diverges")
    mean_log = logx.mean()

    def score(k):
        w = np.exp(k * logx)
        s0 = w.sum()
        s1 = w @ logx
        s2 = w @ (logx * logx)
        mean_w = s1 / s0
        return 1.0 / k + mean_log - mean_w, -1.0 / k ** 2 - (s2 / s0 - mean_w ** 2)

    # Score is decreasing in k, positive near 0 and negative for large k.
    k = 1.2825 / spread  # moment estimate from the log-Gumbel spread
    lo, hi = 0.0, math.inf
    for _ in range(max_iter):
        f, fp = score(k)
        if f > 0:
            lo = k
        else:
            hi = k
        step = k - f / fp
        if abs(step - k) <= tol * k:
            k = step
            break
        if lo < step < hi:
            k = step
        else:
            k = 0.5 * (lo + hi) if math.isfinite(hi) else 2.0 * k
    else:
        raise ValueError(f"Weibull shape iteration did not converge (score {f:.3g})")
    scale = float(top) * float(np.mean(np.exp(k * logx))) ** (1.0 / k)
    return WeibullParams(scale, float(k))


@dataclass(frozen=True)
class EvmHyper:
    tail_size: int = 33998
    distance_multiplier: float = 0.45
    cover_threshold: float = 0.7

    def __post_init__(self):
        if self.tail_size < 2:
            raise ValueError("tail_size must be at least 2")
        if not self.distance_multiplier > 0:
            raise ValueError("distance_multiplier must be positive")
        if not 0 < self.cover_threshold < 1:
            raise ValueError("cover_threshold must lie in (0, 1)")


@dataclass(frozen=True)
class ExtremeVector:
    location: np.ndarray
    weibull: WeibullParams


@dataclass(frozen=True)
class EvmDecision:
    prob: float
    argmax_label: int
    label: int  # 0 means unknown


@dataclass(frozen=True, eq=False)
class EvmModel:
    classes: Mapping[int, tuple[ExtremeVector, ...]]
    hyper: EvmHyper
    feature_dim: int

    def __post_init__(self):
        if not self.classes:
            raise ValueError("model has no classes")
        for label, evs in self.classes.items():
            if label < 1:
                raise ValueError("class labels must be >= 1")
            if not evs:
                raise ValueError(f"class {label} has no extreme vectors")
            for ev in evs:
                if ev.location.shape != (self.feature_dim,):
                    raise ValueError(f"class {label}: extreme vector has wrong dimension")

    @cached_property
    def labels(self) -> np.ndarray:
        return np.array(sorted(self.classes), dtype=int)

    @cached_property
    def _packed(self):
        locs, scales, shapes, owner = [], [], [], []
        for j, label in enumerate(self.labels):
            for ev in self.classes[int(label)]:
                locs.append(ev.location)
                scales.append(ev.weibull.scale)
                shapes.append(ev.weibull.shape)
                owner.append(j)
        return np.array(locs), np.array(scales), np.array(shapes), np.array(owner)

    def n_extreme_vectors(self) -> dict[int, int]:
        return {int(k): len(v) for k, v in self.classes.items()}

    # serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "hyper": {
                "tail_size": self.hyper.tail_size,
                "distance_multiplier": self.hyper.distance_multiplier,
                "cover_threshold": self.hyper.cover_threshold,
            },
            "classes": {
                str(label): [
                    {"location": [float(v) for v in ev.location], "scale": ev.weibull.scale, "shape": ev.weibull.shape}
                    for ev in self.classes[int(label)]
                ]
                for label in self.labels
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvmModel":
        try:
            classes = {
                int(label): tuple(
                    ExtremeVector(np.array(ev["location"], dtype=float), WeibullParams(float(ev["scale"]), float(ev["shape"])))
                    for ev in evs
                )
                for label, evs in d["classes"].items()
            }
            return cls(classes, EvmHyper(**d["hyper"]), int(d["feature_dim"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed EVM model document: {exc}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EvmModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _smallest_distances(points: np.ndarray, others: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    """Sorted k smallest Euclidean distances from each point to ``others``."""
    out = np.empty((len(points), k))
    for start in range(0, len(points), chunk):
        dist = cdist(points[start:start + chunk], others)
        if k < dist.shape[1]:
            dist = np.partition(dist, k - 1, axis=1)[:, :k]
        out[start:start + chunk] = np.sort(dist, axis=1)
    return out


def greedy_cover(covers: np.ndarray) -> list[int]:
    """Indices of candidates chosen by greedy set cover.

    ``covers[i, j]`` says candidate i covers point j. Every point must be
    coverable (the diagonal guarantees this here). Ties go to the lowest index.
    """
    n = covers.shape[1]
    uncovered = np.ones(n, dtype=bool)
    chosen = []
    while uncovered.any():
        gain = covers[:, uncovered].sum(axis=1)
        best = int(np.argmax(gain))  # argmax returns the first maximum
        if gain[best] == 0:
            raise RuntimeError("set cover stalled with uncovered points")
        chosen.append(best)
        uncovered &= ~covers[best]
    return chosen


def evm_train(features, labels, hyper: EvmHyper = EvmHyper()) -> EvmModel:
    """Fit per-point Weibull margins and reduce each class by set cover."""
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("features must be an (n, M) array with one label per row")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    if np.any(y < 1):
        raise ValueError("training labels must be >= 1 (0 is reserved for unknown)")
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("need at least two classes so every class has negatives")

    model = {}
    for label in classes:
        pos = x[y == label]
        neg = x[y != label]
        k = min(hyper.tail_size, len(neg))
        tails = _smallest_distances(pos, neg, k) * hyper.distance_multiplier
        fits = [weibull_fit(t) for t in tails]
        within = cdist(pos, pos)
        scales = np.array([f.scale for f in fits])[:, None]
        shapes = np.array([f.shape for f in fits])[:, None]
        psi = np.exp(-np.power(within / scales, shapes))
        covers = psi >= hyper.cover_threshold
        np.fill_diagonal(covers, True)
        keep = greedy_cover(covers)
        model[int(label)] = tuple(ExtremeVector(pos[i].copy(), fits[i]) for i in keep)
    return EvmModel(model, hyper, x.shape[1])


def class_probs_matrix(model: EvmModel, features) -> np.ndarray:
    """(n, L) matrix of per-class inclusion probabilities; columns follow ``model.labels``."""
    x = np.atleast_2d(np.asarray(features, dtype=float))
    if x.shape[1] != model.feature_dim:
        raise ValueError(f"feature dimension {x.shape[1]} does not match model dimension {model.feature_dim}")
    locs, scales, shapes, owner = model._packed
    out = np.zeros((len(x), len(model.labels)))
    for start in range(0, len(x), 1024):
        psi = np.exp(-np.power(cdist(x[start:start + 1024], locs) / scales, shapes))
        for j in range(len(model.labels)):
            out[start:start + 1024, j] = psi[:, owner == j].max(axis=1)
    return out


def class_probs(model: EvmModel, x) -> dict[int, float]:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.feature_dim,):
        raise ValueError(f"expected a feature vector of length {model.feature_dim}, got shape {x.shape}")
    row = class_probs_matrix(model, x[None, :])[0]
    return {int(label): float(p) for label, p in zip(model.labels, row)}


def classify(model: EvmModel, x, tau: float) -> EvmDecision:
    """Known label if the best class probability reaches ``tau``, else 0."""
    probs = class_probs(model, x)
    best_label = min(probs, key=lambda lab: (-probs[lab], lab))
    prob = probs[best_label]
    return EvmDecision(prob, best_label, best_label if prob >= tau else 0)


def evm_score_stream(model: EvmModel, features) -> np.ndarray:
    """Maximum class probability per row, in input order."""
    x = np.asarray(features, dtype=float)
    if x.size == 0:
        return np.zeros(0)
    return class_probs_matrix(model, x).max(axis=1)
