"""Synthetic Gaussian data, IDX (MNIST) I/O and forget/retain partitioning."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, FormatError, UsageError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_ids: tuple = None
    name: str = ""

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or labels.ndim != 1 or feats.shape[0] != labels.shape[0]:
            raise UsageError(f"features {feats.shape} and labels {labels.shape} disagree")
        class_ids = self.class_ids
        if class_ids is None:
            class_ids = tuple(range(int(labels.max()) + 1)) if labels.size else ()
        class_ids = tuple(int(c) for c in class_ids)
        if labels.size and (labels.min() < 0 or labels.max() >= len(class_ids)):
            raise UsageError("label outside the class vocabulary")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_ids", class_ids)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, mask_or_index, name=None) -> "LabeledDataset":
        return LabeledDataset(self.features[mask_or_index], self.labels[mask_or_index],
                              self.class_ids, name or self.name)

    def of_class(self, c) -> "LabeledDataset":
        return self.subset(self.labels == c, f"{self.name}[{c}]")

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True, eq=False)
class SplitDataset:
    forget_train: LabeledDataset
    retain_train: LabeledDataset
    test_by_class: dict
    forget_classes: frozenset

    @property
    def num_classes(self) -> int:
        return self.retain_train.num_classes

    @property
    def retained_classes(self) -> list[int]:
        return [c for c in range(self.num_classes) if c not in self.forget_classes]

    @property
    def train(self) -> LabeledDataset:
        """Forget and retain training samples concatenated (forget first)."""
        return concat([self.forget_train, self.retain_train], "train")

    def test(self, classes: Iterable[int] | None = None) -> LabeledDataset:
        classes = sorted(self.test_by_class) if classes is None else list(classes)
        return concat([self.test_by_class[c] for c in classes], "test")

    @property
    def forget_test(self) -> LabeledDataset:
        return self.test(sorted(self.forget_classes))

    @property
    def retain_test(self) -> LabeledDataset:
        return self.test(self.retained_classes)


def concat(parts: Sequence[LabeledDataset], name="") -> LabeledDataset:
    parts = list(parts)
    return LabeledDataset(np.concatenate([p.features for p in parts]),
                          np.concatenate([p.labels for p in parts]),
                          parts[0].class_ids, name)


@dataclass(frozen=True)
class GaussianClass:
    mean: tuple
    var: tuple
    count: int


@dataclass(frozen=True)
class GaussianMixtureSpec:
    per_class: tuple
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixtureSpec":
        per_class = tuple(GaussianClass(tuple(c["mean"]), tuple(c["var"]), int(c["count"]))
                          for c in d["per_class"])
        return cls(per_class, int(d.get("seed", 0)))

    def to_dict(self) -> dict:
        return {"per_class": [{"mean": list(c.mean), "var": list(c.var), "count": c.count}
                              for c in self.per_class],
                "seed": self.seed}

    def with_seed(self, seed: int) -> "GaussianMixtureSpec":
        return GaussianMixtureSpec(self.per_class, seed)

    def with_counts(self, count: int) -> "GaussianMixtureSpec":
        return GaussianMixtureSpec(tuple(GaussianClass(c.mean, c.var, count)
                                         for c in self.per_class), self.seed)


def gen_gaussian_mixture(spec: GaussianMixtureSpec, name="gaussian") -> LabeledDataset:
    """Draw ``count`` points from ``N(mean, diag(var))`` for each class, in class order."""
    if not spec.per_class:
        raise ConfigError("mixture needs at least one class")
    dim = len(spec.per_class[0].mean)
    for i, c in enumerate(spec.per_class):
        if len(c.mean) != dim or len(c.var) != dim:
            raise ConfigError(f"class {i}: mean/var dimension differs from {dim}")
        if min(c.var) <= 0:
            raise ConfigError(f"class {i}: variances must be positive")
        if c.count < 1:
            raise ConfigError(f"class {i}: count must be positive")
    rng = np.random.default_rng(spec.seed)
    feats, labels = [], []
    for k, c in enumerate(spec.per_class):
        z = rng.standard_normal((c.count, dim))
        feats.append(np.asarray(c.mean) + z * np.sqrt(np.asarray(c.var)))
        labels.append(np.full(c.count, k))
    return LabeledDataset(np.concatenate(feats), np.concatenate(labels),
                          tuple(range(len(spec.per_class))), name)


# Three 2-D classes: B (label 1) sits next to A (label 0) and away from C (label 2).
TOY3 = GaussianMixtureSpec((
    GaussianClass((0.0, 0.0), (0.5, 0.5), 200),
    GaussianClass((2.0, 0.0), (0.5, 0.5), 200),
    GaussianClass((3.5, 3.5), (0.5, 0.5), 200),
))

TOY5 = GaussianMixtureSpec((
    GaussianClass((0.0, 0.0), (0.3, 0.3), 200),
    GaussianClass((2.0, 0.0), (0.3, 0.3), 200),
    GaussianClass((4.0, 1.0), (0.3, 0.3), 200),
    GaussianClass((1.0, 3.0), (0.3, 0.3), 200),
    GaussianClass((4.0, 4.0), (0.3, 0.3), 200),
))


def toy_split_data(spec: GaussianMixtureSpec, seed: int, n_train: int, n_test: int):
    """Train and test draws from ``spec`` with independent seeds."""
    train = gen_gaussian_mixture(spec.with_counts(n_train).with_seed(seed), "toy-train")
    test = gen_gaussian_mixture(spec.with_counts(n_test).with_seed(seed + 10_000), "toy-test")
    return train, test


# -- IDX ---------------------------------------------------------------------

def _read(path) -> bytes:
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(buf: bytes, expected_magic: int, ndim: int) -> np.ndarray:
    if len(buf) < 4:
        raise FormatError("truncated magic", len(buf))
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic != expected_magic:
        raise FormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError("truncated dimension header", len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    size = int(np.prod(dims, dtype=np.int64))
    if len(buf) - header != size:
        raise FormatError(f"payload has {len(buf) - header} bytes, header promises {size}",
                          header)
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    return parse_idx(_read(path), IDX_IMAGES_MAGIC, 3)


def read_idx_labels(path) -> np.ndarray:
    return parse_idx(_read(path), IDX_LABELS_MAGIC, 1)


def load_idx(images_path, labels_path, name="mnist") -> LabeledDataset:
    """Load an IDX image/label pair; pixels are flattened and scaled to ``[0, 1]``."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"image count {images.shape[0]} != label count {labels.shape[0]}", 4)
    if labels.size and labels.max() >= 10:
        raise FormatError(f"label {labels.max()} outside [0, 10)", 8 + int(np.argmax(labels >= 10)))
    feats = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(feats, labels.astype(np.int64), tuple(range(10)), name)


def idx_bytes(array: np.ndarray, magic: int) -> bytes:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Write a ``(N, rows, cols)`` uint8 image array and its labels as IDX files."""
    for path, payload in ((images_path, idx_bytes(images, IDX_IMAGES_MAGIC)),
                          (labels_path, idx_bytes(labels, IDX_LABELS_MAGIC))):
        path = os.fspath(path)
        opener = gzip.open if path.endswith(".gz") else open
        with opener(path, "wb") as fh:
            fh.write(payload)


def per_class_subset(data: LabeledDataset, per_class: int, seed: int, name=None) -> LabeledDataset:
    """Seeded draw of at most ``per_class`` samples of every class, original order kept."""
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.labels == c)
        if idx.size > per_class:
            idx = np.sort(rng.choice(idx, per_class, replace=False))
        keep.append(idx)
    return data.subset(np.sort(np.concatenate(keep)), name)


# -- forget / retain ----------------------------------------------------------

def split_forget(data: LabeledDataset, test: LabeledDataset, forget_classes) -> SplitDataset:
    forget = frozenset(int(c) for c in ([forget_classes] if np.isscalar(forget_classes)
                                        else forget_classes))
    if not forget:
        raise UsageError("forget set must name at least one class")
    present = set(np.unique(data.labels).tolist())
    missing = forget - present
    if missing:
        raise UsageError(f"forget classes {sorted(missing)} absent from training labels")
    mask = np.isin(data.labels, sorted(forget))
    if mask.all():
        raise UsageError("forgetting every class leaves an empty retain set")
    test_by_class = {c: test.of_class(c) for c in range(data.num_classes)}
    return SplitDataset(data.subset(mask, "forget-train"), data.subset(~mask, "retain-train"),
                        test_by_class, forget)
