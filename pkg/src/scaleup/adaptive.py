"""Defense-aware adaptive attack and the Gaussian-noise probe that exposes it."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .attacks import PoisonPlan, build_poisoned_dataset
from .data import add_gaussian_noise
from .detector import DEFAULT_SCALES, scale_image
from .models import ConvNet, TrainConfig, TrainResult, attack_success_rate, cross_entropy, sgd_loop


@dataclass(frozen=True)
class AdaptivePlan:
    base: PoisonPlan
    scales: tuple = DEFAULT_SCALES
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(n) for n in self.scales))
        if not self.scales or any(n < 1 for n in self.scales):
            raise ValueError("regularizer scales must be >= 1")
        if self.weight < 0:
            raise ValueError("regularizer weight must be >= 0")


def train_adaptive(model: ConvNet, clean, plan: AdaptivePlan, cfg: TrainConfig) -> TrainResult:
    """Train on the poisoned mix plus amplified poisoned copies carrying their true labels.

    Per step the loss is ``(sum CE(batch) + weight * sum CE(n * x'_j, y_j)) / len(batch)``,
    where ``j`` runs over the poisoned samples in the batch and ``n`` is drawn
    from ``plan.scales`` independently for every one of them. With
    ``weight == 0`` this reduces to :func:`scaleup.models.train` exactly.
    """
    poisoned, flags = build_poisoned_dataset(clean, plan.base)
    model = model.copy()
    images, labels = poisoned.images, poisoned.labels
    true_labels = clean.labels
    scale_rng = np.random.default_rng([int(cfg.seed), 0x5CA1E])
    scales = np.asarray(plan.scales)

    def step_loss(idx, step):
        if plan.weight == 0:
            loss, _ = model.loss_and_grads(images[idx], labels[idx])
            return loss
        hit = idx[flags[idx]]
        if len(hit) == 0:
            loss, _ = model.loss_and_grads(images[idx], labels[idx])
            return loss
        n = scales[scale_rng.integers(len(scales), size=len(hit))]
        x = np.concatenate([images[idx], scale_image(images[hit], n[:, None, None, None])])
        y = np.concatenate([labels[idx], true_labels[hit]])
        w = np.concatenate([np.ones(len(idx)), np.full(len(hit), plan.weight)]) / len(idx)
        logits = model.forward(x)
        loss, dlogits = cross_entropy(logits, y, w)
        model.backward(dlogits)
        return loss

    history = sgd_loop(model, len(poisoned), cfg, step_loss)
    acc = float(np.mean(model.predict_labels(images) == labels))
    return TrainResult(model, history, acc)


def noise_robustness_probe(model, poisoned_test, magnitudes, seed=0, target=None) -> list[tuple[float, float]]:
    """Attack success rate of triggered images after Gaussian noise of each magnitude."""
    magnitudes = [float(m) for m in magnitudes]
    if not magnitudes or magnitudes[0] != 0 or any(b < a for a, b in zip(magnitudes, magnitudes[1:])):
        raise ValueError("magnitudes must be ascending and start at 0")
    base = poisoned_test
    curve = []
    for i, m in enumerate(magnitudes):
        noisy = add_gaussian_noise(base.images, m, np.random.default_rng([int(seed), i]))
        probe = type(base)(noisy, base.true_labels, base.target, base.class_count, base.spec)
        curve.append((m, attack_success_rate(model, probe, target)))
    return curve


def write_probe_csv(curves: dict, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["magnitude", "asr", "model_tag"])
        for tag, curve in curves.items():
            for m, asr in curve:
                w.writerow([repr(m), repr(asr), tag])
