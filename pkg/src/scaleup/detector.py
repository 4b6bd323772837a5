"""Scaled prediction consistency detectors (data-free and data-limited).

All detectors talk to the model through hard labels only.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import add_gaussian_noise

DEFAULT_SCALES = (3, 5, 7, 9, 11)
DEFAULT_NOISE_MAGNITUDES = (0.1, 0.2, 0.3, 0.4, 0.5)
SIGMA_FLOOR = 1e-8


def scaling_set(scales) -> tuple[float, ...]:
    """Validate a scaling set and return it sorted."""
    s = [float(n) for n in scales]
    if not s:
        raise ValueError("scaling set must be non-empty")
    if any(n < 1 for n in s):
        raise ValueError("scaling factors must be >= 1")
    if len(set(s)) != len(s):
        raise ValueError("scaling set contains duplicates")
    return tuple(sorted(s))


def scale_image(x, n: float) -> np.ndarray:
    """Amplify pixel values by ``n`` and clip at 1."""
    if np.any(np.asarray(n) < 1):
        raise ValueError(f"scale factor must be >= 1, got {n}")
    return np.minimum(np.asarray(x, dtype=np.float64) * n, 1.0)


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 3 else (x, False)


def scaled_labels(model, x, scales, batched=True):
    """Reference labels ``C(x)`` and labels of every scaled copy.

    Returns ``(ref, labels)`` with ``labels[i, j]`` the label of sample ``i``
    at ``scales[j]``. Issues exactly ``len(x) * (len(scales) + 1)`` queries.
    """
    x, _ = _batch(x)
    if batched:
        # originals and their scaled copies go to the model as one batch
        copies = np.stack([x] + [scale_image(x, n) for n in scales], axis=1)
        labels = np.asarray(model.predict_labels(copies.reshape((-1,) + x.shape[1:])))
        labels = labels.reshape(len(x), len(scales) + 1)
        return labels[:, 0], labels[:, 1:]
    ref = np.asarray(model.predict_labels(x))
    out = np.empty((len(x), len(scales)), dtype=np.int64)
    for j, n in enumerate(scales):
        try:
            out[:, j] = model.predict_labels(scale_image(x, n))
        except Exception as exc:
            raise RuntimeError(f"model query failed at scale {n}") from exc
    return ref, out


def spc_from_labels(ref, labels) -> np.ndarray:
    return np.mean(np.asarray(labels) == np.asarray(ref)[:, None], axis=1)


def spc(model, x, scales=DEFAULT_SCALES):
    """Scaled prediction consistency of one image (float) or a batch (array)."""
    scales = scaling_set(scales)
    x, single = _batch(x)
    ref, labels = scaled_labels(model, x, scales)
    out = spc_from_labels(ref, labels)
    return float(out[0]) if single else out


@dataclass(frozen=True)
class DetectionReport:
    scores: np.ndarray
    verdicts: np.ndarray  # True means malicious
    threshold: float
    mode: str
    scale_count: int
    predicted: np.ndarray | None = None

    def write_csv(self, path, is_poisoned=None, sample_ids=None):
        n = len(self.scores)
        ids = range(n) if sample_ids is None else sample_ids
        truth = [""] * n if is_poisoned is None else [int(bool(t)) for t in is_poisoned]
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["sample_id", "true_is_poisoned", "score", "verdict", "mode", "|S|", "T"])
            for i, t, s, v in zip(ids, truth, self.scores, self.verdicts):
                w.writerow([i, t, repr(float(s)), "malicious" if v else "benign", self.mode,
                            self.scale_count, repr(float(self.threshold))])


def threshold_rule(scores, threshold: float) -> np.ndarray:
    return np.asarray(scores) > threshold


def detect_data_free(model, x, scales=DEFAULT_SCALES, threshold: float = 0.5) -> DetectionReport:
    """Flag inputs whose SPC strictly exceeds ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    scales = scaling_set(scales)
    x, _ = _batch(x)
    ref, labels = scaled_labels(model, x, scales)
    scores = spc_from_labels(ref, labels)
    return DetectionReport(scores, threshold_rule(scores, threshold), threshold, "data-free",
                           len(scales), ref)


@dataclass(frozen=True)
class ClassStats:
    """Per-class mean and (floored, population) std of benign SPC values."""

    mean: dict
    std: dict
    count: dict

    def ratio(self, k) -> float:
        return self.mean[k] / self.std[k]

    @property
    def balance(self) -> float:
        """``1 / max_i(mu_i / sigma_i)``, the weight on the subtracted term."""
        r = max(self.ratio(k) for k in self.mean)
        return 1.0 / r if r > 0 else 1.0

    def require(self, k):
        if k not in self.mean:
            raise KeyError(f"no benign statistics for class {k}")

    def to_dict(self):
        return {"classes": [{"class": int(k), "mean": self.mean[k], "std": self.std[k],
                             "count": self.count[k]} for k in sorted(self.mean)]}

    @classmethod
    def from_dict(cls, d):
        rows = d["classes"]
        return cls({r["class"]: r["mean"] for r in rows}, {r["class"]: r["std"] for r in rows},
                   {r["class"]: r["count"] for r in rows})


def class_stats_from_values(values, labels) -> ClassStats:
    values, labels = np.asarray(values, dtype=np.float64), np.asarray(labels)
    mean, std, count = {}, {}, {}
    for k in np.unique(labels):
        v = values[labels == k]
        mean[int(k)] = float(v.mean())
        std[int(k)] = max(float(v.std()), SIGMA_FLOOR)
        count[int(k)] = int(len(v))
    return ClassStats(mean, std, count)


def fit_class_stats(model, benign, scales=DEFAULT_SCALES) -> ClassStats:
    """SPC statistics grouped by the benign samples' class labels."""
    return class_stats_from_values(spc(model, benign.images, scales), benign.labels)


def normalize(spc_values, predicted, stats: ClassStats, mode: str = "as-printed") -> np.ndarray:
    spc_values = np.asarray(spc_values, dtype=np.float64)
    predicted = np.asarray(predicted)
    for k in np.unique(predicted):
        stats.require(int(k))
    mu = np.array([stats.mean[int(k)] for k in predicted])
    sd = np.array([stats.std[int(k)] for k in predicted])
    if mode == "as-printed":
        return spc_values - stats.balance * (mu / sd)
    if mode == "z-score":
        return (spc_values - mu) / sd
    raise ValueError(f"unknown normalisation mode {mode!r}")


def nspc(model, x, scales, stats: ClassStats, mode: str = "as-printed"):
    """SPC shifted by the statistics of the input's predicted class."""
    scales = scaling_set(scales)
    x, single = _batch(x)
    ref, labels = scaled_labels(model, x, scales)
    out = normalize(spc_from_labels(ref, labels), ref, stats, mode)
    return float(out[0]) if single else out


def detect_data_limited(model, x, scales, stats, threshold, mode="as-printed") -> DetectionReport:
    scales = scaling_set(scales)
    x, _ = _batch(x)
    ref, labels = scaled_labels(model, x, scales)
    scores = normalize(spc_from_labels(ref, labels), ref, stats, mode)
    return DetectionReport(scores, threshold_rule(scores, threshold), threshold, "data-limited",
                           len(scales), ref)


def noise_variant_score(model, x, magnitudes=DEFAULT_NOISE_MAGNITUDES, seed=0):
    """Like SPC but with Gaussian-noised copies instead of amplified ones."""
    magnitudes = [float(m) for m in magnitudes]
    if not magnitudes:
        raise ValueError("magnitudes must be non-empty")
    x, single = _batch(x)
    rng = np.random.default_rng(seed)
    ref = np.asarray(model.predict_labels(x))
    copies = np.stack([add_gaussian_noise(x, m, rng) for m in magnitudes], axis=1)
    labels = np.asarray(model.predict_labels(copies.reshape((-1,) + x.shape[1:])))
    out = spc_from_labels(ref, labels.reshape(len(x), len(magnitudes)))
    return float(out[0]) if single else out
