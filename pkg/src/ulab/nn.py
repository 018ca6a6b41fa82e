"""Small deterministic feedforward softmax classifier with hand-written backprop.

Everything is float64 numpy.  Layers store weights as ``(out, in)`` matrices so a
forward pass is ``h @ W.T + b``; row ``y`` of the last weight matrix is the logit
weight vector of class ``y``.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DivergenceError, FormatError, ShapeError, UsageError

PROB_FLOOR = 1e-12
MODEL_MAGIC = b"ULAB0001"
ACTIVATIONS = ("relu", "identity")


@dataclass
class ClassifierModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not self.weights or len(self.weights) != len(self.biases):
            raise ConfigError("model needs at least one layer and one bias per layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i} input {w.shape[1]} != previous output "
                                 f"{self.weights[i - 1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ConfigError(f"layer {i} has non-finite parameters")

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def arch(self) -> list[int]:
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "ClassifierModel":
        return ClassifierModel([w.copy() for w in self.weights],
                               [b.copy() for b in self.biases],
                               self.activation, self.seed)

    def parameters_equal(self, other: "ClassifierModel") -> bool:
        """Bitwise parameter equality."""
        if self.arch != other.arch:
            return False
        return all(np.array_equal(a, b) for a, b in
                   zip(self.weights + self.biases, other.weights + other.biases))


@dataclass
class ProbVector:
    """A distribution over class labels."""

    mass: np.ndarray
    class_ids: Sequence[int] = field(default=None)

    def __post_init__(self):
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if self.class_ids is None:
            self.class_ids = list(range(self.mass.shape[0]))
        if self.mass.ndim != 1 or len(self.class_ids) != self.mass.shape[0]:
            raise ShapeError("mass and class_ids must have equal length")
        if np.any(self.mass < 0) or abs(self.mass.sum() - 1.0) > 1e-9:
            raise UsageError(f"not a probability vector: {self.mass}")

    def __len__(self):
        return self.mass.shape[0]

    def __getitem__(self, cls):
        return self.mass[list(self.class_ids).index(cls)]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    shuffle: bool = True
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.weight_decay >= 0:
            raise ConfigError("weight_decay must be non-negative")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def init_model(arch: Sequence[int], seed: int, activation: str = "relu") -> ClassifierModel:
    """Glorot-uniform weights, zero biases.

    Layer ``i`` draws its weights from ``U[-a, a]`` with
    ``a = sqrt(6 / (fan_in + fan_out))`` using a PCG64 stream seeded with
    ``seed``; layers are drawn in order, so ``(arch, seed)`` fixes every bit.
    """
    arch = [int(a) for a in arch]
    if len(arch) < 2:
        raise ConfigError(f"architecture needs >= 2 layer sizes, got {arch}")
    if min(arch) < 1:
        raise ConfigError(f"layer sizes must be positive, got {arch}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ClassifierModel(weights, biases, activation, seed)


def _act(z, activation):
    return np.maximum(z, 0.0) if activation == "relu" else z


def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"expected inputs of width {model.input_dim}, got shape {x.shape}")
    return x, single


def forward(model: ClassifierModel, x) -> np.ndarray:
    """Logits for a single input vector ``(d,)`` or a batch ``(N, d)``."""
    h, single = _as_batch(model, x)
    last = model.n_layers - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w.T + b
        if i < last:
            h = _act(h, model.activation)
    return h[0] if single else h


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Softmax along the last axis, computed after subtracting the row max."""
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(model: ClassifierModel, x) -> np.ndarray:
    return softmax(forward(model, x))


def predict(model: ClassifierModel, x) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(forward(model, x), axis=-1)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _target_matrix(targets, n, k):
    if len(targets) and isinstance(targets[0], ProbVector):
        targets = np.stack([t.mass for t in targets])
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != (n, k):
        raise ShapeError(f"targets must have shape {(n, k)}, got {t.shape}")
    return t


def cross_entropy(probs, targets) -> np.ndarray:
    """Per-row ``-sum_y q(y) log p(y)`` with ``p`` clamped to ``[1e-12, 1]``."""
    return -np.sum(targets * np.log(np.clip(probs, PROB_FLOOR, 1.0)), axis=-1)


def loss_and_grad(model: ClassifierModel, batch, targets):
    """Mean soft-target cross-entropy over ``batch`` and its parameter gradient.

    ``targets`` is an ``(N, K)`` array of distributions (or a sequence of
    :class:`ProbVector`).  Returns ``(loss, grads)`` where ``grads`` is a list of
    ``(dW, db)`` pairs aligned with the model layers.  Entries where the clamp
    is active contribute zero gradient, so the result is the exact derivative of
    the clamped loss.
    """
    x, _ = _as_batch(model, batch)
    n = x.shape[0]
    if n == 0:
        raise UsageError("empty batch")
    t = _target_matrix(targets, n, model.num_classes)

    acts, pre = [x], []
    h = x
    last = model.n_layers - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = _act(z, model.activation) if i < last else z
        acts.append(h)
    p = softmax(h)
    loss = float(np.mean(cross_entropy(p, t)))

    a = np.where(p > PROB_FLOOR, t, 0.0)
    dz = (p * a.sum(axis=1, keepdims=True) - a) / n
    grads = [None] * model.n_layers
    for i in range(last, -1, -1):
        grads[i] = (dz.T @ acts[i], dz.sum(axis=0))
        if i:
            dh = dz @ model.weights[i]
            if model.activation == "relu":
                dh = dh * (pre[i - 1] > 0)
            dz = dh
    return loss, grads


def fit(model: ClassifierModel, data, targets, cfg: TrainConfig, *,
        trainable: Sequence[int] | None = None, ascent: bool = False,
        clip_norm: float | None = None):
    """Minibatch SGD.  Returns ``(new_model, epoch_losses)``.

    ``trainable`` restricts updates to the listed layer indices; ``ascent``
    flips the update direction; ``clip_norm`` rescales each minibatch gradient
    to at most that global L2 norm.  ``cfg.weight_decay`` shrinks weight
    matrices (not biases) by ``lr * weight_decay`` per step in either
    direction.  Epoch loss is the mean of the pre-update minibatch losses.
    """
    x, _ = _as_batch(model, data)
    n = x.shape[0]
    if n == 0:
        raise UsageError("no training data")
    t = _target_matrix(targets, n, model.num_classes)
    layers = range(model.n_layers) if trainable is None else sorted(set(trainable))
    m = model.copy()
    rng = np.random.default_rng(cfg.seed)
    sign = 1.0 if ascent else -1.0
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grad(m, x[idx], t[idx])
            if not np.isfinite(loss):
                raise DivergenceError(epoch)
            batch_losses.append(loss)
            scale = 1.0
            if clip_norm is not None:
                norm = np.sqrt(sum(np.sum(gw * gw) + np.sum(gb * gb)
                                   for i, (gw, gb) in enumerate(grads) if i in layers))
                if norm > clip_norm:
                    scale = clip_norm / norm
            step = sign * cfg.learning_rate * scale
            shrink = 1.0 - cfg.learning_rate * cfg.weight_decay
            for i in layers:
                gw, gb = grads[i]
                w = m.weights[i] * shrink if cfg.weight_decay else m.weights[i]
                m.weights[i] = w + step * gw
                m.biases[i] = m.biases[i] + step * gb
        epoch_loss = float(np.mean(batch_losses))
        if not np.isfinite(epoch_loss) or not all(np.all(np.isfinite(w)) for w in m.weights):
            raise DivergenceError(epoch)
        history.append(epoch_loss)
    return m, history


def train_epochs(model: ClassifierModel, data, targets, cfg: TrainConfig) -> ClassifierModel:
    return fit(model, data, targets, cfg)[0]


def eval_accuracy(model: ClassifierModel, features, labels) -> float:
    """Fraction of argmax-correct predictions (ties -> lowest class index)."""
    labels = np.asarray(labels)
    if labels.shape[0] == 0:
        raise UsageError("cannot evaluate accuracy on an empty subset")
    return float(np.mean(predict(model, features) == labels))


# -- serialization -----------------------------------------------------------

def model_to_bytes(model: ClassifierModel) -> bytes:
    parts = [MODEL_MAGIC, struct.pack("<I", model.n_layers)]
    for w, b in zip(model.weights, model.biases):
        rows, cols = w.shape
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(buf: bytes, activation: str = "relu") -> ClassifierModel:
    if buf[:8] != MODEL_MAGIC:
        raise FormatError("bad model magic", 0)
    if len(buf) < 12:
        raise FormatError("truncated header", len(buf))
    (n_layers,) = struct.unpack_from("<I", buf, 8)
    off = 12
    weights, biases = [], []
    for _ in range(n_layers):
        if off + 8 > len(buf):
            raise FormatError("truncated layer header", off)
        rows, cols = struct.unpack_from("<II", buf, off)
        off += 8
        need = 8 * (rows * cols + rows)
        if off + need > len(buf):
            raise FormatError("truncated layer payload", off)
        w = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols)
        off += 8 * rows * cols
        b = np.frombuffer(buf, dtype="<f8", count=rows, offset=off)
        off += 8 * rows
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(buf):
        raise FormatError("trailing bytes after last layer", off)
    return ClassifierModel(weights, biases, activation)


def atomic_write_bytes(path, data: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model: ClassifierModel, path):
    atomic_write_bytes(path, model_to_bytes(model))


def load_model(path, activation: str = "relu") -> ClassifierModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read(), activation)
