"""Black-box classifier contract and a small numpy conv net trained with SGD."""
from __future__ import annotations

import base64
import copy
import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_VERSION = 1


class Classifier:
    """Hard-label black box. Subclasses implement :meth:`predict_labels`.

    Models that can also report class probabilities set ``has_probs`` and
    implement :meth:`predict_probs`; labels are then the argmax with ties
    going to the lowest class index (``np.argmax`` semantics).
    """

    has_probs = False
    class_count: int

    def predict_labels(self, images: np.ndarray) -> np.ndarray:
        if self.has_probs:
            return np.argmax(self.predict_probs(images), axis=1)
        raise NotImplementedError

    def predict_label(self, image: np.ndarray) -> int:
        return int(self.predict_labels(np.asarray(image)[None])[0])

    def predict_probs(self, images: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} exposes hard labels only")


class ConstantClassifier(Classifier):
    """Always answers ``label``; handy as a degenerate reference."""

    has_probs = True

    def __init__(self, label: int, class_count: int):
        self.label = label
        self.class_count = class_count

    def predict_probs(self, images):
        p = np.zeros((len(images), self.class_count))
        p[:, self.label] = 1.0
        return p


class CountingClassifier(Classifier):
    """Wraps a classifier and counts how many images were submitted for labels."""

    def __init__(self, inner: Classifier):
        self.inner = inner
        self.class_count = inner.class_count
        self.has_probs = inner.has_probs
        self.queries = 0
        self.calls = 0

    def predict_labels(self, images):
        images = np.asarray(images)
        self.queries += len(images)
        self.calls += 1
        return self.inner.predict_labels(images)

    def predict_probs(self, images):
        return self.inner.predict_probs(images)


class HardLabelOnly(Classifier):
    """Hides the probability interface of a wrapped model."""

    def __init__(self, inner: Classifier):
        self.inner = inner
        self.class_count = inner.class_count

    def predict_labels(self, images):
        return self.inner.predict_labels(images)


# -- layers --------------------------------------------------------------------
# Each layer keeps what it needs from forward() for the following backward().

class Layer:
    kind = ""
    params: list

    def __init__(self):
        self.params = []
        self.grads = []

    def spec(self) -> dict:
        return {"kind": self.kind}

    def output_shape(self, shape):
        return shape


class Conv2D(Layer):
    """Stride-1 'same' convolution with odd square kernels, via im2col."""

    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel=3, rng=None):
        super().__init__()
        self.in_channels, self.out_channels, self.kernel = in_channels, out_channels, kernel
        fan_in = in_channels * kernel * kernel
        limit = np.sqrt(6.0 / fan_in)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = [rng.uniform(-limit, limit, (out_channels, fan_in)), np.zeros(out_channels)]

    def spec(self):
        return {"kind": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel": self.kernel}

    def output_shape(self, shape):
        return (self.out_channels,) + tuple(shape[1:])

    def _cols(self, x):
        p = self.kernel // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (self.kernel, self.kernel), axis=(2, 3))  # N,C,H,W,k,k
        n, c, h, w = x.shape
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * self.kernel * self.kernel)

    def forward(self, x):
        n, _, h, w = x.shape
        cols = self._cols(x)
        self._cache = (x.shape, cols)
        out = cols @ self.params[0].T + self.params[1]
        return out.reshape(n, h, w, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, dout):
        shape, cols = self._cache
        n, c, h, w = shape
        k, p = self.kernel, self.kernel // 2
        d2 = dout.transpose(0, 2, 3, 1).reshape(n * h * w, self.out_channels)
        self.grads = [d2.T @ cols, d2.sum(axis=0)]
        dcols = (d2 @ self.params[0]).reshape(n, h, w, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + w]


class MaxPool2(Layer):
    kind = "pool"

    def output_shape(self, shape):
        c, h, w = shape
        return (c, h // 2, w // 2)

    def forward(self, x):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        x = x[:, :, :2 * h2, :2 * w2]
        blocks = x.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
        arg = np.argmax(blocks, axis=-1)
        self._cache = ((n, c, h, w), arg)
        return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        (n, c, h, w), arg = self._cache
        h2, w2 = h // 2, w // 2
        blocks = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
        dx = np.zeros((n, c, h, w))
        dx[:, :, :2 * h2, :2 * w2] = (
            blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        )
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(len(x), -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        limit = np.sqrt(6.0 / in_features)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = [rng.uniform(-limit, limit, (out_features, in_features)), np.zeros(out_features)]

    def spec(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_features": self.out_features}

    def output_shape(self, shape):
        return (self.out_features,)

    def forward(self, x):
        self._x = x
        return x @ self.params[0].T + self.params[1]

    def backward(self, dout):
        self.grads = [dout.T @ self._x, dout.sum(axis=0)]
        return dout @ self.params[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels, weights=None):
    """Weighted-sum cross entropy and its gradient w.r.t. the logits.

    ``weights`` defaults to ``1/len(labels)`` per sample (the batch mean).
    """
    n = len(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    if weights is None:
        weights = np.full(n, 1.0 / n)
    loss = -np.sum(weights * logp[np.arange(n), labels])
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad * weights[:, None]


# -- network -------------------------------------------------------------------

DEFAULT_ARCH = {"conv": [8, 16], "dense": [64]}


class ConvNet(Classifier):
    """Conv(3x3)-ReLU-pool blocks followed by dense ReLU layers and a K-way head.

    ``arch`` is ``{"conv": [filters, ...], "dense": [units, ...]}``; an empty
    conv list gives a plain MLP.
    """

    has_probs = True

    def __init__(self, input_shape, class_count, arch=None, seed=0):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.class_count = int(class_count)
        self.arch = copy.deepcopy(arch if arch is not None else DEFAULT_ARCH)
        self.seed = int(seed)
        rng = np.random.default_rng(np.uint64(seed))
        layers = []
        shape = self.input_shape
        for filters in self.arch.get("conv", []):
            layers += [Conv2D(shape[0], filters, 3, rng), ReLU(), MaxPool2()]
            shape = layers[-1].output_shape(layers[-3].output_shape(shape))
        layers.append(Flatten())
        width = int(np.prod(shape))
        for units in self.arch.get("dense", []):
            layers += [Dense(width, units, rng), ReLU()]
            width = units
        layers.append(Dense(width, self.class_count, rng))
        self.layers = layers

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params))

    def copy(self) -> "ConvNet":
        return copy.deepcopy(self)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dlogits):
        for layer in reversed(self.layers):
            dlogits = layer.backward(dlogits)
        return dlogits

    def gradients(self):
        return [g for layer in self.layers for g in layer.grads]

    def logits(self, images, batch_size=512):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        return np.concatenate([self.forward(images[i:i + batch_size])
                               for i in range(0, len(images), batch_size)]) if len(images) else \
            np.zeros((0, self.class_count))

    def predict_probs(self, images):
        return softmax(self.logits(images))

    def predict_labels(self, images):
        return np.argmax(self.logits(images), axis=1)

    def loss_and_grads(self, images, labels, weights=None):
        logits = self.forward(np.asarray(images, dtype=np.float64))
        loss, dlogits = cross_entropy(logits, np.asarray(labels), weights)
        self.backward(dlogits)
        return loss, self.gradients()

    # -- checkpoints -----------------------------------------------------------

    def to_checkpoint(self, training_seed=None) -> dict:
        layers = []
        for layer in self.layers:
            entry = layer.spec()
            if layer.params:
                entry["params"] = [
                    {"shape": list(p.shape), "dtype": "<f8",
                     "base64": base64.b64encode(p.astype("<f8").tobytes()).decode("ascii")}
                    for p in layer.params
                ]
            layers.append(entry)
        return {
            "format_version": CHECKPOINT_VERSION,
            "input_shape": list(self.input_shape),
            "K": self.class_count,
            "arch": self.arch,
            "init_seed": self.seed,
            "training_seed": training_seed,
            "layers": layers,
        }

    @classmethod
    def from_checkpoint(cls, doc: dict) -> "ConvNet":
        if doc.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('format_version')}")
        net = cls(doc["input_shape"], doc["K"], doc["arch"], doc.get("init_seed", 0))
        if len(doc["layers"]) != len(net.layers):
            raise ValueError("checkpoint layer count does not match its architecture")
        for layer, entry in zip(net.layers, doc["layers"]):
            if entry["kind"] != layer.kind:
                raise ValueError(f"layer kind mismatch: {entry['kind']} vs {layer.kind}")
            for i, p in enumerate(entry.get("params", [])):
                if "base64" in p:
                    arr = np.frombuffer(base64.b64decode(p["base64"]), dtype=p.get("dtype", "<f4"))
                else:
                    arr = np.asarray(p["values"])
                arr = arr.astype(np.float64).reshape(p["shape"])
                if arr.shape != layer.params[i].shape:
                    raise ValueError(f"parameter shape mismatch in {layer.kind} layer")
                layer.params[i] = arr
        return net

    def save(self, path, training_seed=None):
        with open(path, "w") as f:
            json.dump(self.to_checkpoint(training_seed), f, indent=1)

    @classmethod
    def load(cls, path) -> "ConvNet":
        with open(path) as f:
            return cls.from_checkpoint(json.load(f))


# -- training ------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"non-finite loss in epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    shuffle: bool = True
    warmup_epochs: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainResult:
    model: ConvNet
    loss_history: list = field(default_factory=list)
    train_accuracy: float = float("nan")


def sgd_loop(model: ConvNet, n: int, cfg: TrainConfig, step_loss) -> list:
    """Shared mini-batch SGD-with-momentum loop with optional linear warm-up.

    ``step_loss(batch_index, step)`` computes the loss for a batch and leaves
    gradients in the layers. Returns the per-epoch mean loss.
    """
    rng = np.random.default_rng(np.uint64(cfg.seed))
    velocity = [np.zeros_like(p) for p in model.params]
    history = []
    step = 0
    steps_per_epoch = -(-n // cfg.batch_size)
    warmup = cfg.warmup_epochs * steps_per_epoch
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = step_loss(idx, step)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            lr = cfg.learning_rate * min(1.0, (step + 1) / warmup) if warmup else cfg.learning_rate
            for p, v, g in zip(model.params, velocity, model.gradients()):
                v *= cfg.momentum
                v -= lr * g
                p += v
            total += loss * len(idx)
            count += len(idx)
            step += 1
        history.append(total / count)
    return history


def train(model: ConvNet, data, cfg: TrainConfig) -> TrainResult:
    """Minimise mean cross entropy over ``data`` (benign and poisoned mixed).

    The input model is left untouched; the trained copy is returned.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    if model.class_count < data.class_count:
        raise ValueError("model output width is smaller than the dataset's class count")
    model = model.copy()
    images, labels = data.images, data.labels

    def step_loss(idx, step):
        loss, _ = model.loss_and_grads(images[idx], labels[idx])
        return loss

    history = sgd_loop(model, len(data), cfg, step_loss)
    acc = float(np.mean(model.predict_labels(images) == labels))
    return TrainResult(model, history, acc)


def accuracy(model: Classifier, data) -> float:
    return float(np.mean(model.predict_labels(data.images) == data.labels))


def attack_success_rate(model: Classifier, poisoned_test, target: int | None = None) -> float:
    """Fraction of triggered images whose true label is not the target that land on it."""
    target = poisoned_test.target if target is None else target
    labels = poisoned_test.true_labels
    keep = labels != target
    if not np.any(keep):
        raise ValueError("every test image already belongs to the target class")
    pred = model.predict_labels(poisoned_test.images[keep])
    return float(np.mean(pred == target))


def gradient_check(model: ConvNet, images, labels, step: float = 1e-4, max_per_tensor: int | None = None,
                   seed: int = 0) -> float:
    """Max over parameter tensors of ``|g_a - g_n| / (|g_a| + |g_n|)`` (L2 norms).

    ``g_n`` uses central differences. ``max_per_tensor`` limits the checked
    entries per tensor to a random subset.
    """
    model = model.copy()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    _, grads = model.loss_and_grads(images, labels)
    grads = [g.copy() for g in grads]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(model.params, grads):
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            idx = np.sort(rng.choice(flat.size, max_per_tensor, replace=False))
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + step
            lp = cross_entropy(model.forward(images), labels)[0]
            flat[i] = old - step
            lm = cross_entropy(model.forward(images), labels)[0]
            flat[i] = old
            num[j] = (lp - lm) / (2 * step)
        ana = g.reshape(-1)[idx]
        denom = np.linalg.norm(ana) + np.linalg.norm(num)
        if denom > 0:
            worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    return worst
