"""RBF (Nadaraya-Watson) kernel-regression classifier and the scaled-trigger limit check.

With one-hot targets the regression output for class ``t`` is

    phi_t(x) = sum_i K(x, x_i) y_{i,t} / sum_i K(x, x_i),   K(x, x') = exp(-2 gamma ||x - x'||^2)

so the outputs form a probability vector for any query.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .attacks import apply_trigger
from .data import LabeledDataset, concat
from .detector import scale_image
from .models import Classifier


class KernelWeightsVanished(ArithmeticError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    gamma: float = 1.0
    class_count: int = 2

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")


class KernelClassifier(Classifier):
    """Stores flattened training images with one-hot labels (and optional weights)."""

    has_probs = True

    def __init__(self, data: LabeledDataset, gamma: float = 1.0, weights=None):
        self.config = KernelConfig(float(gamma), int(data.class_count))
        self.class_count = data.class_count
        self.shape = data.shape
        self.points = data.images.reshape(len(data), -1)
        if len(self.points) == 0:
            raise ValueError("kernel classifier needs at least one training point")
        self.onehot = np.eye(self.class_count)[data.labels]
        self.weights = np.ones(len(self.points)) if weights is None else np.asarray(weights, float)
        self._sq = np.einsum("ij,ij->i", self.points, self.points)

    @property
    def gamma(self):
        return self.config.gamma

    def sq_distances(self, queries):
        q = np.asarray(queries, dtype=np.float64).reshape(len(queries), -1)
        if q.shape[1] != self.points.shape[1]:
            raise ValueError("query shape does not match training images")
        d = np.einsum("ij,ij->i", q, q)[:, None] + self._sq[None, :] - 2.0 * q @ self.points.T
        return np.maximum(d, 0.0)

    def predict_probs(self, images, chunk=256):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        out = np.empty((len(images), self.class_count))
        for s in range(0, len(images), chunk):
            d = self.sq_distances(images[s:s + chunk])
            if not np.all(np.isfinite(d)):
                raise KernelWeightsVanished("kernel weights vanished: query distance is not finite")
            # common factor exp(-2 gamma d_min) cancels in the ratio
            logw = -2.0 * self.gamma * (d - d.min(axis=1, keepdims=True))
            w = np.exp(logw) * self.weights
            z = w.sum(axis=1, keepdims=True)
            if np.any(z <= 0):
                raise KernelWeightsVanished("all kernel weights are numerically zero")
            out[s:s + chunk] = (w @ self.onehot) / z
        return out


def kernel_predict_probs(kc: KernelClassifier, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    probs = kc.predict_probs(x)
    return probs[0] if x.ndim == 3 else probs


@dataclass(frozen=True)
class Theorem1Row:
    fraction: float
    n: float
    gamma: float
    target_rate: float


def poison_mix(clean: LabeledDataset, spec, target: int, fraction: float, order) -> LabeledDataset:
    """Benign images plus triggered, relabeled copies making up ``fraction`` of the mix.

    ``order`` is a permutation of ``clean``; its first ``N_p`` entries supply
    the triggered copies and the rest stay benign.
    """
    if not 0.0 <= fraction <= 0.5:
        raise ValueError("poison fractions must lie in [0, 0.5]")
    n_p = int(round(fraction * len(clean)))
    benign = clean.subset(np.sort(order[n_p:]))
    if not n_p:
        return benign
    src = clean.images[np.sort(order[:n_p])]
    return concat(benign, LabeledDataset(apply_trigger(src, spec), np.full(n_p, target), clean.class_count))


def scaled_trigger_check(clean: LabeledDataset, held_out: LabeledDataset, spec, target: int,
                         poison_fractions, scales, gamma: float = 1.0, seed: int = 0) -> list[Theorem1Row]:
    """Target-label rate of amplified triggered images under a kernel classifier.

    For each poison fraction ``f`` the training mix holds ``N_b`` benign images
    and ``N_p`` triggered copies relabeled to ``target`` with
    ``N_p / (N_b + N_p) = f``. ``N_b + N_p`` equals ``len(clean)``; triggered
    copies are made from images disjoint from the benign part. Held-out images
    are triggered, amplified per ``scales`` (clipped to ``[0, 1]``) and
    classified.
    """
    if len(held_out) == 0:
        raise ValueError("held-out set is empty")
    order = np.random.default_rng(seed).permutation(len(clean))
    queries = apply_trigger(held_out.images, spec)
    rows = []
    for f in poison_fractions:
        f = float(f)
        kc = KernelClassifier(poison_mix(clean, spec, target, f, order), gamma)
        for n in scales:
            pred = kc.predict_labels(scale_image(queries, n))
            rows.append(Theorem1Row(f, float(n), float(gamma), float(np.mean(pred == target))))
    return rows


def theorem1_check(clean, held_out, spec, target, poison_fractions=(0.02, 0.1, 0.25, 0.5),
                   scales=tuple(range(1, 12)), gammas=(0.1, 1.0, 10.0), seed=0) -> list[Theorem1Row]:
    rows = []
    for g in gammas:
        rows += scaled_trigger_check(clean, held_out, spec, target, poison_fractions, scales, g, seed)
    return rows


def monotonicity_report(rows) -> dict:
    """Per (gamma, n): whether the target rate is non-decreasing in the poison fraction."""
    out = {}
    for g in sorted({r.gamma for r in rows}):
        for n in sorted({r.n for r in rows}):
            series = sorted((r.fraction, r.target_rate) for r in rows if r.gamma == g and r.n == n)
            rates = [t for _, t in series]
            out[(g, n)] = all(b >= a for a, b in zip(rates, rates[1:]))
    return out


def write_theorem1_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["fraction", "n", "gamma", "target_rate"])
        for r in rows:
            w.writerow([repr(r.fraction), repr(r.n), repr(r.gamma), repr(r.target_rate)])
