"""Trigger specifications and poisoned dataset construction."""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset

MODES = ("dirty-label", "clean-label", "source-specific")


@dataclass(frozen=True)
class TriggerSpec:
    """Poison generator ``x' = (1 - alpha*m) * x + alpha*m * t``.

    ``mask`` and ``pattern`` have the full image shape. Patch triggers keep
    their ``placement`` (top-left row, col) and ``size`` for reporting and
    serialization.
    """

    mask: np.ndarray
    pattern: np.ndarray
    alpha: float = 1.0
    placement: tuple[int, int] | None = None
    size: int | None = None
    name: str = "custom"

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.float64)
        pattern = np.asarray(self.pattern, dtype=np.float64)
        if mask.shape != pattern.shape:
            raise ValueError(f"mask shape {mask.shape} != pattern shape {pattern.shape}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if mask.min() < 0 or mask.max() > 1 or pattern.min() < 0 or pattern.max() > 1:
            raise ValueError("mask and pattern must lie in [0, 1]")
        mask.setflags(write=False)
        pattern.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "pattern", pattern)

    @property
    def shape(self):
        return self.mask.shape

    @property
    def blend(self) -> np.ndarray:
        return self.alpha * self.mask

    def to_dict(self) -> dict:
        d = {"builtin": self.name, "alpha": self.alpha}
        if self.placement is not None:
            d["placement"] = list(self.placement)
        if self.size is not None:
            d["size"] = self.size
        if self.name == "custom":
            d["mask"] = self.mask.tolist()
            d["pattern"] = self.pattern.tolist()
        return d


def apply_trigger(x: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Stamp the trigger onto one image ``(C,H,W)`` or a batch ``(N,C,H,W)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-3:] != spec.shape:
        raise ValueError(f"image shape {x.shape[-3:]} does not match trigger shape {spec.shape}")
    b = spec.blend
    return np.clip((1.0 - b) * x + b * spec.pattern, 0.0, 1.0)


def _patch_mask(shape, size: int, placement) -> np.ndarray:
    c, h, w = shape
    if placement is None:
        placement = (h - size - 1, w - size - 1)
    r, col = placement
    if size < 1 or r < 0 or col < 0 or r + size > h or col + size > w:
        raise ValueError(f"patch of size {size} at {placement} does not fit in {h}x{w}")
    m = np.zeros(shape)
    m[:, r:r + size, col:col + size] = 1.0
    return m, (int(r), int(col))


def white_square(shape, size: int = 4, placement=None, alpha: float = 1.0) -> TriggerSpec:
    m, placement = _patch_mask(shape, size, placement)
    return TriggerSpec(m, np.ones(shape), alpha, placement, size, "white-square")


def random_pixels(shape, size: int = 4, placement=None, seed: int = 0, alpha: float = 1.0) -> TriggerSpec:
    """Patch of seeded random black/white pixels (BadNets style)."""
    m, placement = _patch_mask(shape, size, placement)
    rng = np.random.default_rng(seed)
    t = rng.integers(0, 2, size=shape).astype(np.float64)
    # keep the patch from degenerating to a single colour
    r, c = placement
    patch = t[:, r:r + size, c:c + size]
    if size > 1 and (patch.min() == patch.max()):
        patch[:, 0, 0] = 1.0 - patch[:, 0, 0]
    return TriggerSpec(m, t, alpha, placement, size, f"random-pixels({seed})")


def full_image(shape, seed: int = 0, alpha: float = 0.1) -> TriggerSpec:
    """Fixed seeded full-image additive pattern with small transparency."""
    rng = np.random.default_rng(seed)
    t = rng.integers(0, 2, size=shape).astype(np.float64)
    return TriggerSpec(np.ones(shape), t, alpha, None, None, f"full-image({seed})")


_BUILTIN = re.compile(r"^(white-square|random-pixels|full-image)(?:\((\d+)\))?$")


def trigger_from_dict(d: dict, shape) -> TriggerSpec:
    """Inverse of :meth:`TriggerSpec.to_dict` for builtin or inline triggers."""
    shape = tuple(shape)
    name = d.get("builtin", "custom")
    alpha = float(d.get("alpha", 1.0))
    if name == "custom":
        return TriggerSpec(np.asarray(d["mask"]), np.asarray(d["pattern"]), alpha,
                           tuple(d["placement"]) if "placement" in d else None, d.get("size"))
    m = _BUILTIN.match(name)
    if not m:
        raise ValueError(f"unknown builtin trigger {name!r}")
    kind, seed = m.group(1), int(m.group(2) or 0)
    placement = tuple(d["placement"]) if d.get("placement") is not None else None
    size = int(d.get("size", 4))
    if kind == "white-square":
        return white_square(shape, size, placement, alpha)
    if kind == "random-pixels":
        return random_pixels(shape, size, placement, seed, alpha)
    return full_image(shape, seed, alpha)


@dataclass(frozen=True)
class PoisonPlan:
    triggers: tuple  # of (TriggerSpec, target_label)
    poison_rate: float
    mode: str = "dirty-label"
    seed: int = 0
    source_classes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "triggers", tuple(tuple(t) for t in self.triggers))
        object.__setattr__(self, "source_classes", tuple(self.source_classes))
        if not self.triggers:
            raise ValueError("a poison plan needs at least one trigger")
        if not 0.0 < self.poison_rate <= 0.5:
            raise ValueError("poison_rate must lie in (0, 0.5]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "source-specific" and len(self.source_classes) != len(self.triggers):
            raise ValueError("source-specific mode needs one source class per trigger")


@dataclass(frozen=True)
class PoisonedTestSet:
    """Triggered test images with their original labels kept for ASR."""

    images: np.ndarray
    true_labels: np.ndarray
    target: int
    class_count: int
    spec: TriggerSpec = field(repr=False, default=None)

    def __len__(self):
        return len(self.true_labels)

    def as_dataset(self) -> LabeledDataset:
        return LabeledDataset(self.images, self.true_labels, self.class_count)

    def non_target(self) -> "PoisonedTestSet":
        keep = self.true_labels != self.target
        return PoisonedTestSet(self.images[keep], self.true_labels[keep], self.target,
                               self.class_count, self.spec)


def build_poisoned_dataset(clean: LabeledDataset, plan: PoisonPlan) -> tuple[LabeledDataset, np.ndarray]:
    """Poison ``clean`` according to ``plan``.

    Returns the poisoned dataset (same order and length as ``clean``) and a
    boolean array flagging replaced entries. Each trigger takes
    ``floor(rate * N)`` victims, drawn without replacement from images not
    already used by an earlier trigger. In source-specific mode half the
    victims come from the source class and are relabeled; the other half are
    triggered non-source images that keep their labels.
    """
    n = len(clean)
    per_trigger = int(np.floor(plan.poison_rate * n))
    if per_trigger < 1:
        raise ValueError(f"poison_rate {plan.poison_rate} selects no victims out of {n}")
    rng = np.random.default_rng(np.uint64(plan.seed))
    images = np.array(clean.images)
    labels = np.array(clean.labels)
    flags = np.zeros(n, dtype=bool)
    groups = np.full(n, -1, dtype=np.int64)
    available = np.ones(n, dtype=bool)

    def draw(pool, k, what):
        pool = pool[available[pool]]
        if len(pool) < k:
            raise ValueError(f"{what}: need {k} victims but only {len(pool)} eligible images")
        chosen = np.sort(rng.choice(pool, size=k, replace=False))
        available[chosen] = False
        return chosen

    for i, (spec, target) in enumerate(plan.triggers):
        if not 0 <= target < clean.class_count:
            raise ValueError(f"target label {target} out of range")
        everyone = np.arange(n)
        if plan.mode == "dirty-label":
            victims = draw(everyone, per_trigger, f"trigger {i}")
            relabel = victims
        elif plan.mode == "clean-label":
            victims = draw(np.flatnonzero(clean.labels == target), per_trigger,
                           f"clean-label trigger {i} (class {target})")
            relabel = victims
        else:
            source = plan.source_classes[i]
            n_src = per_trigger - per_trigger // 2
            relabel = draw(np.flatnonzero(clean.labels == source), n_src,
                           f"source-specific trigger {i} (class {source})")
            others = np.flatnonzero((clean.labels != source) & (clean.labels != target))
            keep = draw(others, per_trigger - n_src, f"source-specific trigger {i} (non-source)")
            victims = np.sort(np.concatenate([relabel, keep]))
        images[victims] = apply_trigger(clean.images[victims], spec)
        labels[relabel] = target
        flags[victims] = True
        groups[victims] = i

    out = LabeledDataset(images, labels, clean.class_count, meta={"trigger_group": groups})
    return out, flags


def build_poisoned_testset(clean_test: LabeledDataset, spec: TriggerSpec, target: int) -> PoisonedTestSet:
    if len(clean_test) == 0:
        raise ValueError("clean test set is empty")
    return PoisonedTestSet(apply_trigger(clean_test.images, spec), np.array(clean_test.labels),
                           int(target), clean_test.class_count, spec)
