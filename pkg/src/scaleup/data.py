"""Image tensors, labeled datasets, synthetic generation and IDX ingestion.

Images are float64 numpy arrays of shape ``(C, H, W)`` with values in
``[0, 1]``; a dataset stacks them into ``(N, C, H, W)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = b"\x00\x00\x08\x03"
IDX_LABELS_MAGIC = b"\x00\x00\x08\x01"


class IdxFormatError(ValueError):
    """Raised for malformed IDX files; ``offset`` is the byte where decoding failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def as_image(pixels, shape=None) -> np.ndarray:
    """Validate and return ``pixels`` as a ``(C, H, W)`` float image."""
    x = np.asarray(pixels, dtype=np.float64)
    if shape is not None:
        x = x.reshape(shape)
    if x.ndim != 3:
        raise ValueError(f"image must be (channels, height, width), got shape {x.shape}")
    if not np.all((x >= 0.0) & (x <= 1.0)):
        raise ValueError("pixel values must lie in [0, 1]")
    return x


@dataclass(frozen=True)
class LabeledDataset:
    """A stack of equally-shaped images with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {images.shape}")
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.intp)
        return LabeledDataset(self.images[index], self.labels[index], self.class_count)

    def of_class(self, k: int) -> "LabeledDataset":
        return self.subset(np.flatnonzero(self.labels == k))

    def split(self, fraction: float, seed: int) -> tuple["LabeledDataset", "LabeledDataset"]:
        """Stratified split; the first part holds ``fraction`` of every class."""
        rng = np.random.default_rng(seed)
        first, second = [], []
        for k in range(self.class_count):
            idx = np.flatnonzero(self.labels == k)
            idx = idx[rng.permutation(len(idx))]
            cut = int(round(fraction * len(idx)))
            first.append(idx[:cut])
            second.append(idx[cut:])
        return self.subset(np.sort(np.concatenate(first))), self.subset(np.sort(np.concatenate(second)))


def concat(*parts: LabeledDataset) -> LabeledDataset:
    k = max(p.class_count for p in parts)
    return LabeledDataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        k,
    )


# -- IDX ---------------------------------------------------------------------

def _read_header(buf: bytes, magic: bytes, rank: int, what: str) -> tuple[int, ...]:
    if len(buf) < 4:
        raise IdxFormatError(f"truncated {what} file: missing magic number", len(buf))
    if buf[:4] != magic:
        raise IdxFormatError(
            f"expected rank-{rank} magic {magic.hex()} in {what} file, got {buf[:4].hex()}", 0
        )
    need = 4 + 4 * rank
    if len(buf) < need:
        raise IdxFormatError(f"truncated {what} header", len(buf))
    return struct.unpack(f">{rank}I", buf[4:need])


def parse_idx_images(buf: bytes) -> np.ndarray:
    """Decode an IDX rank-3 ubyte buffer into an ``(N, 1, rows, cols)`` float array."""
    count, rows, cols = _read_header(buf, IDX_IMAGES_MAGIC, 3, "images")
    start = 16
    n_bytes = count * rows * cols
    if len(buf) < start + n_bytes:
        raise IdxFormatError(
            f"truncated images payload: need {n_bytes} bytes, have {len(buf) - start}", len(buf)
        )
    if len(buf) > start + n_bytes:
        raise IdxFormatError(
            f"images payload length mismatch: {len(buf) - start} bytes for dims "
            f"({count}, {rows}, {cols})",
            start + n_bytes,
        )
    raw = np.frombuffer(buf, dtype=np.uint8, count=n_bytes, offset=start)
    return raw.reshape(count, 1, rows, cols).astype(np.float64) / 255.0


def parse_idx_labels(buf: bytes) -> np.ndarray:
    (count,) = _read_header(buf, IDX_LABELS_MAGIC, 1, "labels")
    start = 8
    if len(buf) < start + count:
        raise IdxFormatError(
            f"truncated labels payload: need {count} bytes, have {len(buf) - start}", len(buf)
        )
    if len(buf) > start + count:
        raise IdxFormatError(
            f"labels payload length mismatch: {len(buf) - start} bytes for count {count}",
            start + count,
        )
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=start).astype(np.int64)


def load_idx(images_path, labels_path, class_count: int | None = None) -> LabeledDataset:
    """Load an IDX image/label file pair; bytes are mapped to ``[0, 1]`` by ``/255``."""
    images = parse_idx_images(Path(images_path).read_bytes())
    labels = parse_idx_labels(Path(labels_path).read_bytes())
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels", 4)
    if class_count is None:
        class_count = int(labels.max()) + 1 if len(labels) else 1
    return LabeledDataset(images, labels, class_count)


def save_idx(data: LabeledDataset, images_path, labels_path) -> None:
    """Write a single-channel dataset as an IDX pair (pixels rounded to bytes)."""
    n, c, h, w = data.images.shape
    if c != 1:
        raise ValueError("IDX images are single-channel; got %d channels" % c)
    if data.class_count > 256:
        raise ValueError("IDX labels are single bytes")
    pixels = np.rint(data.images * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(IDX_IMAGES_MAGIC + struct.pack(">3I", n, h, w) + pixels.tobytes())
    Path(labels_path).write_bytes(
        IDX_LABELS_MAGIC + struct.pack(">I", n) + data.labels.astype(np.uint8).tobytes()
    )


# -- synthetic data ----------------------------------------------------------

def class_template(k: int, shape: tuple[int, int, int]) -> np.ndarray:
    """Deterministic geometric template for class ``k``.

    Three families cycle with ``k``: oriented bars, disks and checkerboards,
    each varied by ``k // 3``. Foreground and background intensities differ
    by 0.4 in every channel.
    """
    c, h, w = shape
    if h < 8 or w < 8:
        raise ValueError(f"templates need height and width >= 8, got {h}x{w}")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    family, variant = k % 3, k // 3
    if family == 0:
        angle = np.pi * ((variant * 0.381966) % 1.0)
        dist = np.abs((xx - cx) * np.sin(angle) - (yy - cy) * np.cos(angle))
        fg = dist <= max(1.0, min(h, w) / 10.0)
    elif family == 1:
        radius = min(h, w) * (0.18 + 0.07 * (variant % 3))
        oy = (variant % 2) * h / 6.0 - h / 12.0
        ox = ((variant // 2) % 2) * w / 6.0 - w / 12.0
        fg = (yy - cy - oy) ** 2 + (xx - cx - ox) ** 2 <= radius ** 2
    else:
        period = 2 + variant % 3
        fg = ((yy // period + xx // period) % 2).astype(bool)
        if variant >= 3:
            fg = ~fg
    # per-channel levels span dark and bright so triggers are seen in both contexts
    t = np.empty((c, h, w))
    for ch in range(c):
        phase = (k * 0.618034 + ch * 0.37) % 1.0
        fg_level = 0.1 + 0.8 * phase
        bg_level = 0.1 + 0.8 * ((phase + 0.5) % 1.0)
        t[ch] = np.where(fg, fg_level, bg_level)
    if k >= 12:
        # the families repeat past twelve classes; shift contrast to stay distinct
        t = np.clip(t + 0.03 * (k // 12), 0.0, 1.0)
    return t


def class_templates(class_count: int, shape) -> np.ndarray:
    return np.stack([class_template(k, tuple(shape)) for k in range(class_count)])


def synth_dataset(class_count: int, per_class: int, shape, noise_sigma: float, seed: int,
                  gain_jitter: float = 0.0, shift_jitter: int = 0) -> LabeledDataset:
    """Generate ``per_class`` noisy copies of each class template.

    Samples are ordered class by class. ``gain_jitter`` multiplies each image
    by a factor drawn from ``U(1 - g, 1 + g)`` and ``shift_jitter`` rolls it by
    up to that many pixels along each axis; both default to off. The result
    depends only on the arguments, so regenerating is byte-identical.
    """
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    shape = tuple(int(s) for s in shape)
    templates = class_templates(class_count, shape)
    if len({t.tobytes() for t in templates}) != class_count:
        raise ValueError(f"shape {shape} too small to render {class_count} distinct templates")
    rng = np.random.default_rng(np.uint64(seed))
    labels = np.repeat(np.arange(class_count), per_class)
    images = templates[labels]
    if shift_jitter:
        shifts = rng.integers(-shift_jitter, shift_jitter + 1, size=(len(images), 2))
        images = np.stack([np.roll(im, tuple(s), axis=(1, 2)) for im, s in zip(images, shifts)])
    if gain_jitter:
        images = images * rng.uniform(1 - gain_jitter, 1 + gain_jitter, size=(len(images), 1, 1, 1))
    if noise_sigma > 0:
        images = images + rng.normal(0.0, noise_sigma, images.shape)
    images = np.clip(images, 0.0, 1.0)
    meta = {"seed": seed, "noise_sigma": noise_sigma, "gain_jitter": gain_jitter,
            "shift_jitter": shift_jitter}
    return LabeledDataset(images, labels, class_count, meta=meta)


def add_gaussian_noise(x: np.ndarray, sigma: float, seed) -> np.ndarray:
    """Return ``clamp(x + N(0, sigma^2), 0, 1)``; works on single images or batches.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return np.clip(x + rng.normal(0.0, sigma, x.shape), 0.0, 1.0)
