"""Unlearning methods: retrain, FT, RL, GA, TRW and TRW restricted to a layer subset."""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .datasets import LabeledDataset, SplitDataset
from .errors import ConfigError, UsageError
from .nn import (ClassifierModel, TrainConfig, atomic_write_bytes, fit, init_model,
                 model_to_bytes, one_hot)
from .trw import DEFAULT_BETA, SimilarityProfile, build_forget_targets

METHODS = ("original", "retrain", "ft", "rl", "ga", "trw", "trw2r")


@dataclass(frozen=True)
class UnlearnConfig:
    method: str
    epochs: int = 10
    learning_rate: float = 0.05
    beta: float = DEFAULT_BETA
    seed: int = 0
    layer_subset_size: int = 2
    batch_size: int = 32
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.layer_subset_size < 1:
            raise ConfigError("layer_subset_size must be >= 1")
        if not np.isfinite(self.beta):
            raise ConfigError("beta must be finite")

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.epochs, self.batch_size, self.seed)

    @classmethod
    def from_dict(cls, d: dict) -> "UnlearnConfig":
        return cls(**d)


@dataclass
class UnlearnResult:
    model: ClassifierModel
    wall_clock_seconds: float
    epoch_losses: list
    method: str
    config: UnlearnConfig | None = None
    info: dict = field(default_factory=dict)

    def sidecar(self) -> dict:
        return {"method": self.method,
                "config": asdict(self.config) if self.config else None,
                "epoch_losses": list(self.epoch_losses),
                "wall_clock_seconds": self.wall_clock_seconds,
                **self.info}

    def save(self, directory, stem: str | None = None):
        """Write ``<stem>.ulab`` (model binary) and ``<stem>.json`` (sidecar)."""
        stem = stem or self.method
        atomic_write_bytes(os.path.join(directory, f"{stem}.ulab"), model_to_bytes(self.model))
        text = json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n"
        atomic_write_bytes(os.path.join(directory, f"{stem}.json"), text.encode())


def train_original(train: LabeledDataset, arch, cfg: TrainConfig,
                   activation="relu") -> ClassifierModel:
    model = init_model(arch, cfg.seed, activation)
    return fit(model, train.features, one_hot(train.labels, model.num_classes), cfg)[0]


def retrain_oracle(retain_train: LabeledDataset, arch, cfg: TrainConfig,
                   activation="relu") -> ClassifierModel:
    """Fresh model trained on the retained samples only.

    Takes the retain set alone, so it cannot see forget data by construction.
    """
    if len(retain_train) == 0:
        raise UsageError("retain set is empty")
    return train_original(retain_train, arch, cfg, activation)


def rl_relabel(split: SplitDataset, seed: int) -> np.ndarray:
    """Uniform random retained-class labels for the forget samples (drawn once)."""
    retained = np.array(split.retained_classes)
    rng = np.random.default_rng([seed, 0x524C])
    return rng.choice(retained, size=len(split.forget_train))


def choose_layers(n_layers: int, size: int, seed: int) -> list[int]:
    if size > n_layers:
        raise ConfigError(f"layer_subset_size={size} exceeds the {n_layers} model layers")
    rng = np.random.default_rng([seed, 0x3252])
    return sorted(int(i) for i in rng.choice(n_layers, size=size, replace=False))


def trw_targets(original: ClassifierModel, split: SplitDataset, profiles, beta: float):
    """Frozen tilted targets for every forget training sample.

    ``profiles`` maps each forget class to its similarity profile (a single
    profile is accepted when one class is forgotten).
    """
    if isinstance(profiles, SimilarityProfile):
        profiles = {profiles.forget_class: profiles}
    missing = split.forget_classes - set(profiles)
    if missing:
        raise UsageError(f"no similarity profile for forget classes {sorted(missing)}")
    ft = split.forget_train
    targets = np.zeros((len(ft), original.num_classes))
    for f in sorted(split.forget_classes):
        rows = ft.labels == f
        targets[rows] = build_forget_targets(original, ft.features[rows], split.forget_classes,
                                             profiles[f], beta)
    return targets


def _timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


def _retain_xy(split: SplitDataset, k: int):
    r = split.retain_train
    return r.features, one_hot(r.labels, k)


def unlearn_ft(model: ClassifierModel, split: SplitDataset, cfg: UnlearnConfig) -> UnlearnResult:
    x, t = _retain_xy(split, model.num_classes)
    (m, losses), secs = _timed(lambda: fit(model, x, t, cfg.train_config()))
    return UnlearnResult(m, secs, losses, "ft", cfg)


def unlearn_rl(model: ClassifierModel, split: SplitDataset, cfg: UnlearnConfig) -> UnlearnResult:
    k = model.num_classes
    new_labels = rl_relabel(split, cfg.seed)
    xr, tr = _retain_xy(split, k)
    x = np.concatenate([split.forget_train.features, xr])
    t = np.concatenate([one_hot(new_labels, k), tr])
    (m, losses), secs = _timed(lambda: fit(model, x, t, cfg.train_config()))
    return UnlearnResult(m, secs, losses, "rl", cfg)


def unlearn_ga(model: ClassifierModel, split: SplitDataset, cfg: UnlearnConfig) -> UnlearnResult:
    ft = split.forget_train
    t = one_hot(ft.labels, model.num_classes)
    (m, losses), secs = _timed(lambda: fit(model, ft.features, t, cfg.train_config(),
                                           ascent=True, clip_norm=cfg.clip_norm))
    return UnlearnResult(m, secs, losses, "ga", cfg)


def _trw_fit(model, split, cfg, profiles, trainable):
    k = model.num_classes
    targets = trw_targets(model, split, profiles, cfg.beta)
    xr, tr = _retain_xy(split, k)
    x = np.concatenate([split.forget_train.features, xr])
    t = np.concatenate([targets, tr])
    m, losses = fit(model, x, t, cfg.train_config(), trainable=trainable)
    return m, losses, targets


def unlearn_trw(model: ClassifierModel, split: SplitDataset, cfg: UnlearnConfig,
                profiles) -> UnlearnResult:
    """Retain cross-entropy plus soft cross-entropy toward frozen tilted targets.

    ``profiles`` must come from ``model`` (the original) before fine-tuning.
    Targets are computed once here and never refreshed.
    """
    (m, losses, targets), secs = _timed(lambda: _trw_fit(model, split, cfg, profiles, None))
    return UnlearnResult(m, secs, losses, "trw", cfg, {"targets": targets})


def unlearn_trw2r(model: ClassifierModel, split: SplitDataset, cfg: UnlearnConfig,
                  profiles) -> UnlearnResult:
    layers = choose_layers(model.n_layers, cfg.layer_subset_size, cfg.seed)
    (m, losses, targets), secs = _timed(lambda: _trw_fit(model, split, cfg, profiles, layers))
    return UnlearnResult(m, secs, losses, "trw2r", cfg,
                         {"targets": targets, "trainable_layers": layers})


def unlearn(model: ClassifierModel, split: SplitDataset, cfg: UnlearnConfig,
            profiles=None, arch=None) -> UnlearnResult:
    """Dispatch on ``cfg.method``.  ``retrain`` ignores ``model`` except for its shape."""
    if cfg.method == "original":
        return UnlearnResult(model.copy(), 0.0, [], "original", cfg)
    if cfg.method == "retrain":
        r = split.retain_train
        if len(r) == 0:
            raise UsageError("retain set is empty")
        fresh = init_model(arch or model.arch, cfg.seed, model.activation)
        (m, losses), secs = _timed(lambda: fit(fresh, r.features,
                                               one_hot(r.labels, fresh.num_classes),
                                               cfg.train_config()))
        return UnlearnResult(m, secs, losses, "retrain", cfg)
    if cfg.method == "ft":
        return unlearn_ft(model, split, cfg)
    if cfg.method == "rl":
        return unlearn_rl(model, split, cfg)
    if cfg.method == "ga":
        return unlearn_ga(model, split, cfg)
    if profiles is None:
        raise UsageError(f"{cfg.method} needs similarity profiles")
    if cfg.method == "trw":
        return unlearn_trw(model, split, cfg, profiles)
    return unlearn_trw2r(model, split, cfg, profiles)
