"""Evaluation sets, ROC/AUROC, confidence curves and detector timing."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import add_gaussian_noise
from .detector import scale_image, scaled_labels

MEMBERSHIP_MODES = ("all-poisoned", "successful-only")


@dataclass(frozen=True)
class EvalSets:
    """Positive (triggered) and negative (benign) images, each with a noisy copy appended.

    ``positive_source`` / ``negative_source`` index the original sample each
    row came from; the second half of each set is the noisy copy.
    """

    positive: np.ndarray
    negative: np.ndarray
    magnitude: float
    mode: str
    positive_source: np.ndarray
    negative_source: np.ndarray


def build_eval_sets(benign_test, poisoned_test, model=None, magnitude: float = 0.05,
                    mode: str = "all-poisoned", seed: int = 0) -> EvalSets:
    """Double both sets with Gaussian-noised copies (independent noise streams).

    ``successful-only`` keeps only triggered images the model maps to the
    target before augmentation.
    """
    if mode not in MEMBERSHIP_MODES:
        raise ValueError(f"mode must be one of {MEMBERSHIP_MODES}")
    if len(benign_test) == 0 or len(poisoned_test) == 0:
        raise ValueError("evaluation sets must be non-empty")
    pos = np.asarray(poisoned_test.images)
    pos_idx = np.arange(len(pos))
    if mode == "successful-only":
        if model is None:
            raise ValueError("successful-only membership needs the deployed model")
        hit = np.asarray(model.predict_labels(pos)) == poisoned_test.target
        pos, pos_idx = pos[hit], pos_idx[hit]
        if len(pos) == 0:
            raise ValueError("no triggered test image reaches the target label")
    neg = np.asarray(benign_test.images)
    neg_idx = np.arange(len(neg))
    pos_rng = np.random.default_rng([int(seed), 1])
    neg_rng = np.random.default_rng([int(seed), 2])
    return EvalSets(
        np.concatenate([pos, add_gaussian_noise(pos, magnitude, pos_rng)]),
        np.concatenate([neg, add_gaussian_noise(neg, magnitude, neg_rng)]),
        float(magnitude), mode,
        np.concatenate([pos_idx, pos_idx]), np.concatenate([neg_idx, neg_idx]),
    )


def auroc(pos_scores, neg_scores) -> float:
    """Mann-Whitney AUROC with half credit for ties, from average ranks."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("both score sets must be non-empty")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auroc: float

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["threshold", "fpr", "tpr"])
            for t, x, y in zip(self.thresholds, self.fpr, self.tpr):
                w.writerow([repr(float(t)), repr(float(x)), repr(float(y))])

    def write_svg(self, path, size=320, title="ROC"):
        pad = 40
        span = size - 2 * pad

        def xy(fx, ty):
            return pad + fx * span, size - pad - ty * span

        pts = " ".join("%.2f,%.2f" % xy(x, y) for x, y in zip(self.fpr, self.tpr))
        x0, y0 = xy(0, 0)
        x1, y1 = xy(1, 1)
        svg = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
            f'viewBox="0 0 {size} {size}">',
            f'<rect x="{x0}" y="{y1}" width="{span}" height="{span}" fill="none" stroke="black"/>',
            f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" stroke="#999" stroke-dasharray="4 3"/>',
            f'<polyline points="{pts}" fill="none" stroke="#c0392b" stroke-width="2"/>',
            f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">FPR</text>',
            f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 12 {size / 2})">TPR</text>',
            f'<text x="{size / 2}" y="20" text-anchor="middle" font-size="13">'
            f'{title} (AUROC {self.auroc:.3f})</text>',
            "</svg>",
        ]
        with open(path, "w") as f:
            f.write("\n".join(svg) + "\n")


def roc_curve(pos_scores, neg_scores) -> RocCurve:
    """ROC points sweeping the threshold down through every distinct score.

    A sample counts as positive when its score is ``>=`` the threshold, so
    tied scores move both rates together (the diagonal segment that gives
    ties half credit).
    """
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    tp = len(pos) - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = len(neg) - np.searchsorted(neg_sorted, thresholds, side="left")
    tpr = np.concatenate([[0.0], tp / len(pos)])
    fpr = np.concatenate([[0.0], fp / len(neg)])
    thresholds = np.concatenate([[np.inf], thresholds])
    return RocCurve(fpr, tpr, thresholds, auroc(pos, neg))


def confidence_curve(model, images, scales) -> np.ndarray:
    """Mean probability of the scale-1 predicted label at each scale."""
    if not getattr(model, "has_probs", False):
        raise ValueError("confidence curves need a model that reports probabilities")
    images = np.asarray(images, dtype=np.float64)
    ref = np.argmax(model.predict_probs(images), axis=1)
    rows = np.arange(len(images))
    return np.array([model.predict_probs(scale_image(images, n))[rows, ref].mean() for n in scales])


@dataclass(frozen=True)
class Overhead:
    inference_seconds: float
    detection_seconds: float

    @property
    def ratio(self) -> float:
        return self.detection_seconds / self.inference_seconds


def _median_time(fn, repeats, warmup):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return float(np.median(times))


def bench_overhead(model, scales, images, repeats: int = 100, warmup: int = 5,
                   batched: bool = True) -> Overhead:
    """Median wall-clock of plain inference vs inference plus scaled queries.

    An empty ``scales`` measures inference twice (the degenerate detector).
    """
    images = np.asarray(images, dtype=np.float64)
    scales = tuple(scales)

    def plain():
        model.predict_labels(images)

    def detect():
        if scales:
            scaled_labels(model, images, scales, batched=batched)
        else:
            model.predict_labels(images)

    return Overhead(_median_time(plain, repeats, warmup), _median_time(detect, repeats, warmup))
