"""Config-driven experiments: metric tables, reports, beta sweeps, multi-class runs, toy grids."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attacks import (DEFAULT_RETRAIN_MODELS, ShadowSet, basic_mia, detector_accuracy,
                      logits_by_class, nearest_neighbor_class, ulira_simplified)
from .datasets import (TOY3, GaussianMixtureSpec, LabeledDataset, SplitDataset, load_idx,
                       per_class_subset, split_forget, toy_split_data)
from .errors import ConfigError, DivergenceError, FormatError, UlabError, UsageError
from .nn import (ClassifierModel, TrainConfig, atomic_write_bytes, eval_accuracy, fit, init_model,
                 one_hot, predict)
from .trw import DEFAULT_BETA, similarity_scores
from .unlearn import UnlearnConfig, UnlearnResult, retrain_oracle, train_original, unlearn

DATASETS = ("toy3", "gaussianSpecFile", "mnistIdx")
RESULTS_HEADER = ("method", "seed", "acc_r", "acc_f", "mia", "mia_nn", "mia_nn_gap", "ulira",
                  "runtime_s")
MNIST_FILES = (("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
               ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"))

# seed offsets for the models that surround one experiment seed
_REF_RETRAIN, _SHADOW_ORIG, _SHADOW_RETRAIN = 1000, 500, 2000


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment.  JSON keys are the camelCase names in ``_KEYS``."""

    dataset: str
    architecture: tuple
    forget_classes: tuple
    methods: tuple
    n_retrain_models: int = DEFAULT_RETRAIN_MODELS
    beta: float = DEFAULT_BETA
    seeds: tuple = (0,)
    output_dir: str = "out"
    data_path: str | None = None
    train_per_class: int | None = None
    test_per_class: int | None = None
    training: TrainConfig = field(default_factory=lambda: TrainConfig(0.05, 100, 32))
    ulira_shadows: int = 0
    record_timing: bool = False
    grid_resolution: int = 60
    grid_margin: float = 1.0

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if len(self.architecture) < 2:
            raise ConfigError("architecture needs at least input and output sizes")
        if not self.methods:
            raise ConfigError("methods must be nonempty")
        if not self.forget_classes:
            raise ConfigError("forgetClasses must be nonempty")
        if self.n_retrain_models < 1:
            raise ConfigError("nRetrainModels must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.ulira_shadows == 1 or self.ulira_shadows < 0:
            raise ConfigError("uliraShadows must be 0 (off) or >= 2")
        if self.dataset != "toy3" and not self.data_path:
            raise ConfigError(f"dataset {self.dataset} needs dataPath")
        k = self.architecture[-1]
        if any(not 0 <= c < k for c in self.forget_classes):
            raise ConfigError(f"forget classes {list(self.forget_classes)} outside [0, {k})")
        if k - len(set(self.forget_classes)) < 2:
            raise ConfigError("at least 2 classes must be retained")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        missing = {"dataset", "architecture", "forgetClasses", "methods"} - set(d)
        if missing:
            raise ConfigError(f"missing config keys {sorted(missing)}")
        kw = {_KEYS[k]: v for k, v in d.items()}
        beta = float(kw.get("beta", DEFAULT_BETA))
        try:
            kw["methods"] = tuple(_method_config(m, beta) for m in kw["methods"])
            if "training" in kw:
                kw["training"] = TrainConfig(**kw["training"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        kw["architecture"] = tuple(int(a) for a in kw["architecture"])
        kw["forget_classes"] = tuple(sorted({int(c) for c in kw["forget_classes"]}))
        kw["seeds"] = tuple(int(s) for s in kw.get("seeds", (0,)))
        return cls(**kw)

    def to_dict(self) -> dict:
        out = {}
        for key, attr in _KEYS.items():
            v = getattr(self, attr)
            if attr == "methods":
                v = [dataclasses.asdict(m) for m in v]
            elif attr == "training":
                v = dataclasses.asdict(v)
            elif isinstance(v, tuple):
                v = list(v)
            out[key] = v
        return out

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_KEYS = {"dataset": "dataset", "architecture": "architecture",
         "forgetClasses": "forget_classes", "methods": "methods",
         "nRetrainModels": "n_retrain_models", "beta": "beta", "seeds": "seeds",
         "outputDir": "output_dir", "dataPath": "data_path",
         "trainPerClass": "train_per_class", "testPerClass": "test_per_class",
         "training": "training", "uliraShadows": "ulira_shadows",
         "recordTiming": "record_timing", "gridResolution": "grid_resolution",
         "gridMargin": "grid_margin"}


def _method_config(m, beta: float) -> UnlearnConfig:
    if isinstance(m, UnlearnConfig):
        return m
    if isinstance(m, str):
        m = {"method": m}
    m = dict(m)
    m.setdefault("beta", beta)
    return UnlearnConfig.from_dict(m)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(d)


# -- data ----------------------------------------------------------------------

def _idx_path(directory, stem):
    for name in (stem, stem + ".gz"):
        p = os.path.join(directory, name)
        if os.path.exists(p):
            return p
    raise FormatError(f"missing {stem}[.gz] in {directory}", 0)


def load_data(config: ExperimentConfig, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Train/test sets for one seed.  Toy draws depend on the seed; MNIST does not."""
    if config.dataset == "mnistIdx":
        train, test = (load_idx(_idx_path(config.data_path, a), _idx_path(config.data_path, b),
                                name)
                       for (a, b), name in zip(MNIST_FILES, ("mnist-train", "mnist-test")))
        if config.train_per_class:
            train = per_class_subset(train, config.train_per_class, 0, "mnist-train")
        if config.test_per_class:
            test = per_class_subset(test, config.test_per_class, 0, "mnist-test")
    else:
        if config.dataset == "toy3":
            spec = TOY3
        else:
            with open(config.data_path) as fh:
                try:
                    spec = GaussianMixtureSpec.from_dict(json.load(fh))
                except (KeyError, TypeError, json.JSONDecodeError) as exc:
                    raise ConfigError(f"bad Gaussian spec {config.data_path}: {exc}") from None
        n_train = config.train_per_class or spec.per_class[0].count
        n_test = config.test_per_class or 500
        train, test = toy_split_data(spec, seed, n_train, n_test)
    if train.dim != config.architecture[0] or train.num_classes != config.architecture[-1]:
        raise ConfigError(f"architecture {list(config.architecture)} does not fit data with "
                          f"d={train.dim}, K={train.num_classes}")
    return train, test


# -- metrics -------------------------------------------------------------------

@dataclass
class MetricsRow:
    method: str
    seed: int
    acc_r: float | None = None
    acc_f: float | None = None
    mia: float | None = None
    mia_nn: float | None = None
    mia_nn_gap: float | None = None
    ulira: float | None = None
    runtime_s: float | None = None
    error: str | None = None

    def csv_fields(self) -> list[str]:
        return [self.method, str(self.seed)] + [
            "" if v is None else repr(float(v)) for v in
            (self.acc_r, self.acc_f, self.mia, self.mia_nn, self.mia_nn_gap, self.ulira,
             self.runtime_s)]


def results_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    for r in rows:
        w.writerow(r.csv_fields())
    return buf.getvalue()


def parse_results_csv(text: str) -> list[MetricsRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != RESULTS_HEADER:
        raise FormatError(f"unexpected results header {header}", 0)
    rows = []
    for rec in reader:
        if len(rec) != len(RESULTS_HEADER):
            raise FormatError(f"row has {len(rec)} fields", 0)
        vals = [None if v == "" else float(v) for v in rec[2:]]
        rows.append(MetricsRow(rec[0], int(rec[1]), *vals))
    return rows


def confusion_matrix(model: ClassifierModel, test_by_class: dict) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    k = model.num_classes
    out = np.zeros((k, k), dtype=np.int64)
    for c, d in sorted(test_by_class.items()):
        if len(d) == 0:
            raise UsageError(f"test split for class {c} is empty")
        out[c] = np.bincount(predict(model, d.features), minlength=k)
    return out


def reassignment_report(model: ClassifierModel, forget_test: LabeledDataset) -> list:
    """``[(class, fraction)]`` of predictions on forget samples, largest first."""
    if len(forget_test) == 0:
        raise UsageError("forget test set is empty")
    counts = np.bincount(predict(model, forget_test.features), minlength=model.num_classes)
    n = counts.sum()
    return [(int(c), counts[c] / n) for c in sorted(np.flatnonzero(counts),
                                                     key=lambda c: (-counts[c], c))]


# -- one seed ------------------------------------------------------------------

@dataclass
class SeedContext:
    seed: int
    split: SplitDataset
    original: ClassifierModel
    references: list
    nearest: dict
    profiles: dict
    config: ExperimentConfig
    _shadows: dict = field(default_factory=dict)

    def training(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self.config.training, seed=seed)

    def shadow_originals(self):
        if "orig" not in self._shadows:
            n, s = self.config.ulira_shadows, self.seed
            train = self.split.train
            self._shadows["orig"] = [train_original(train, self.config.architecture,
                                                    self.training(_SHADOW_ORIG + 10 * s + j))
                                     for j in range(n)]
            self._shadows["retrain"] = [retrain_oracle(self.split.retain_train,
                                                       self.config.architecture,
                                                       self.training(_SHADOW_RETRAIN + 10 * s + j))
                                        for j in range(n)]
        return self._shadows["orig"], self._shadows["retrain"]


def build_context(config: ExperimentConfig, seed: int, forget_classes=None) -> SeedContext:
    forget = tuple(forget_classes or config.forget_classes)
    train, test = load_data(config, seed)
    split = split_forget(train, test, forget)
    tc = lambda s: dataclasses.replace(config.training, seed=s)  # noqa: E731
    original = train_original(train, config.architecture, tc(seed))
    refs = [retrain_oracle(split.retain_train, config.architecture,
                           tc(_REF_RETRAIN + 10 * seed + j))
            for j in range(config.n_retrain_models)]
    nearest = {f: nearest_neighbor_class(refs, split, f, seed) for f in forget}
    profiles = {f: similarity_scores(original, f) for f in forget}
    return SeedContext(seed, split, original, refs, nearest, profiles, config)


def _run_method(ctx: SeedContext, cfg: UnlearnConfig, label: str | None = None):
    cfg = dataclasses.replace(cfg, seed=ctx.seed)
    if cfg.method == "retrain":
        # a fresh oracle trained like the original, distinct from the references
        r = ctx.split.retain_train
        start = time.perf_counter()
        fresh = init_model(ctx.config.architecture, ctx.seed, ctx.original.activation)
        model, losses = fit(fresh, r.features, one_hot(r.labels, fresh.num_classes),
                            ctx.training(ctx.seed))
        res = UnlearnResult(model, time.perf_counter() - start, losses, "retrain", cfg)
    else:
        res = unlearn(ctx.original, ctx.split, cfg, ctx.profiles)
    return res, evaluate(ctx, res.model, cfg, label or cfg.method,
                         res.wall_clock_seconds if ctx.config.record_timing else None)


def evaluate(ctx: SeedContext, model: ClassifierModel, cfg: UnlearnConfig | None, label: str,
             runtime=None) -> MetricsRow:
    sp = ctx.split
    rt, ft = sp.retain_test, sp.forget_test
    logits = logits_by_class(model, sp)
    nn, gap = [], []
    for f in sorted(sp.forget_classes):
        rn, per_class = ctx.nearest[f]
        acc = detector_accuracy(logits, f, rn, sp.forget_classes, ctx.seed)
        nn.append(acc)
        gap.append(per_class[rn] - acc)
    ulira = None
    if ctx.config.ulira_shadows and cfg is not None:
        ulira = _ulira(ctx, model, cfg)
    return MetricsRow(label, ctx.seed, eval_accuracy(model, rt.features, rt.labels),
                      eval_accuracy(model, ft.features, ft.labels),
                      basic_mia(model, sp).score, float(np.mean(nn)), float(np.mean(gap)),
                      ulira, runtime)


def _ulira(ctx: SeedContext, target: ClassifierModel, cfg: UnlearnConfig) -> float:
    originals, retrains = ctx.shadow_originals()
    shadows = []
    for o in originals:
        if cfg.method == "retrain":
            continue
        profiles = {f: similarity_scores(o, f) for f in ctx.split.forget_classes}
        shadows.append(unlearn(o, ctx.split, cfg, profiles).model)
    if cfg.method == "retrain":
        # the unlearned arm of a retrain target is itself a set of oracles
        tc = ctx.training
        shadows = [retrain_oracle(ctx.split.retain_train, ctx.config.architecture,
                                  tc(_SHADOW_ORIG + 10 * ctx.seed + j))
                   for j in range(len(originals))]
    arms = ShadowSet(shadows, retrains)
    return float(np.mean([ulira_simplified(arms, target, ctx.split, f)
                          for f in sorted(ctx.split.forget_classes)]))


def _error_row(label, seed, exc) -> MetricsRow:
    return MetricsRow(label, seed, error=f"{type(exc).__name__}: {exc}")


_CELL_ERRORS = (UlabError, ArithmeticError, np.linalg.LinAlgError)


def _context(config, seed, labels, forget=None):
    """``(ctx, None)`` or ``(None, error rows)`` when training the shared models fails.

    Configuration, data and usage problems are not cell failures and propagate.
    """
    try:
        return build_context(config, seed, forget), None
    except (ConfigError, FormatError, UsageError, OSError):
        raise
    except _CELL_ERRORS as exc:
        return None, [_error_row(label, seed, exc) for label in labels]


def _seed_rows(config: ExperimentConfig, seed: int) -> list[MetricsRow]:
    ctx, failed = _context(config, seed, [m.method for m in config.methods])
    if failed:
        return failed
    rows = []
    for cfg in config.methods:
        try:
            rows.append(_run_method(ctx, cfg)[1])
        except _CELL_ERRORS as exc:
            rows.append(_error_row(cfg.method, seed, exc))
    return rows


def _map_seeds(fn, config, seeds, jobs: int):
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(min(jobs, len(seeds))) as pool:
            parts = list(pool.map(fn, [config] * len(seeds), seeds))
    else:
        parts = [fn(config, s) for s in seeds]
    return [r for part in parts for r in part]


def write_results(rows, out_dir, config: ExperimentConfig, stem="results", extra=None):
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_bytes(os.path.join(out_dir, f"{stem}.csv"), results_csv(rows).encode())
    doc = {"config": config.to_dict(),
           "rows": [dataclasses.asdict(r) for r in rows],
           "errors": [{"method": r.method, "seed": r.seed, "error": r.error}
                      for r in rows if r.error]}
    if extra:
        doc.update(extra)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(os.path.join(out_dir, f"{stem}.json"), text.encode())


def all_diverged(rows) -> bool:
    return bool(rows) and all(r.error and r.error.startswith(DivergenceError.__name__)
                              for r in rows)


def run_experiment(config: ExperimentConfig, jobs: int = 1, write: bool = True) -> list:
    """One row per (seed, method), seeds outermost, in config order."""
    rows = _map_seeds(_seed_rows, config, list(config.seeds), jobs)
    if write:
        write_results(rows, config.output_dir, config)
    return rows


# -- beta ablation --------------------------------------------------------------

def _trw_base(config: ExperimentConfig) -> UnlearnConfig:
    for m in config.methods:
        if m.method == "trw":
            return m
    return UnlearnConfig("trw", beta=config.beta)


def beta_label(beta: float) -> str:
    return f"trw[beta={beta:g}]"


def _ablate_seed(config, seed, betas):
    ctx, failed = _context(config, seed, [beta_label(b) for b in betas])
    if failed:
        return failed
    base = _trw_base(config)
    rows = []
    for b in betas:
        try:
            rows.append(_run_method(ctx, dataclasses.replace(base, beta=float(b)),
                                    beta_label(b))[1])
        except _CELL_ERRORS as exc:
            rows.append(_error_row(beta_label(b), seed, exc))
    return rows


class _Bound:
    """Picklable partial for process pools."""

    def __init__(self, fn, *args):
        self.fn, self.args = fn, args

    def __call__(self, config, seed):
        return self.fn(config, seed, *self.args)


def ablate_beta(config: ExperimentConfig, betas, jobs: int = 1, write: bool = True) -> list:
    betas = [float(b) for b in betas]
    if not betas:
        raise ConfigError("betas must be nonempty")
    rows = _map_seeds(_Bound(_ablate_seed, betas), config, list(config.seeds), jobs)
    if write:
        write_results(rows, config.output_dir, config, "ablation", {"betas": betas})
    return rows


# -- multi-class forgetting -------------------------------------------------------

def multiclass_forget_sets(num_classes: int, counts, seed: int) -> list[tuple]:
    """Nested random forget sets: the first ``m`` classes of one seeded permutation."""
    order = np.random.default_rng([seed, 0x4D43]).permutation(num_classes)
    out = []
    for m in counts:
        if m < 1 or num_classes - m < 2:
            raise ConfigError(f"forgetting {m} of {num_classes} classes leaves fewer than 2")
        out.append(tuple(sorted(int(c) for c in order[:m])))
    return out


def multiclass_label(forget) -> str:
    return "trw[forget=" + ",".join(str(c) for c in forget) + "]"


def _multiclass_seed(config, seed, counts):
    base = _trw_base(config)
    rows = []
    for forget in multiclass_forget_sets(config.architecture[-1], counts, seed):
        label = multiclass_label(forget)
        ctx, failed = _context(config, seed, [label], forget)
        if failed:
            rows += failed
            continue
        try:
            rows.append(_run_method(ctx, base, label)[1])
        except _CELL_ERRORS as exc:
            rows.append(_error_row(label, seed, exc))
    return rows


def run_multiclass(config: ExperimentConfig, counts, jobs: int = 1, write: bool = True) -> list:
    counts = [int(m) for m in counts]
    if not counts:
        raise ConfigError("counts must be nonempty")
    multiclass_forget_sets(config.architecture[-1], counts, 0)  # validate before any training
    rows = _map_seeds(_Bound(_multiclass_seed, counts), config, list(config.seeds), jobs)
    if write:
        write_results(rows, config.output_dir, config, "multiclass", {"counts": counts})
    return rows


# -- toy decision boundaries ------------------------------------------------------

BOUNDARY_VARIANTS = ("original", "retrain", "beta0", "tilted")


def grid_points(bbox, resolution: int) -> np.ndarray:
    """Row-major ``resolution x resolution`` grid, x varying fastest."""
    xmin, xmax, ymin, ymax = bbox
    if resolution < 1:
        raise ConfigError("grid resolution must be >= 1")
    xs = np.linspace(xmin, xmax, resolution)
    ys = np.linspace(ymin, ymax, resolution)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def grid_csv(points: np.ndarray, classes: np.ndarray) -> str:
    lines = ["x,y,predictedClass"]
    lines += [f"{x!r},{y!r},{int(c)}" for (x, y), c in zip(points.tolist(), classes)]
    return "\n".join(lines) + "\n"


def boundary_models(config: ExperimentConfig, seed: int) -> tuple[dict, np.ndarray]:
    ctx = build_context(config, seed)
    if ctx.split.train.dim != 2:
        raise UsageError("decision grids need 2-D features")
    base = _trw_base(config)
    models = {"original": ctx.original, "retrain": ctx.references[0]}
    for name, b in (("beta0", 0.0), ("tilted", config.beta)):
        cfg = dataclasses.replace(base, beta=b, seed=seed)
        models[name] = unlearn(ctx.original, ctx.split, cfg, ctx.profiles).model
    x = ctx.split.train.features
    m = config.grid_margin
    bbox = (x[:, 0].min() - m, x[:, 0].max() + m, x[:, 1].min() - m, x[:, 1].max() + m)
    return models, grid_points(bbox, config.grid_resolution)


def _boundary_seed(config, seed):
    if config.architecture[0] != 2:
        raise UsageError("decision grids need 2-D features")
    models, points = boundary_models(config, seed)
    preds = {n: predict(models[n], points) for n in BOUNDARY_VARIANTS}
    agree = {n: float(np.mean(preds[n] == preds["retrain"])) for n in BOUNDARY_VARIANTS}
    files = {n: grid_csv(points, preds[n]) for n in BOUNDARY_VARIANTS}
    return [(seed, agree, files)]


def emit_toy_boundary(config: ExperimentConfig, jobs: int = 1, write: bool = True) -> dict:
    """Grid predictions of the four variants per seed plus agreement with retrain."""
    parts = _map_seeds(_boundary_seed, config, list(config.seeds), jobs)
    per_seed = {str(seed): agree for seed, agree, _ in parts}
    summary = {"agreement": per_seed,
               "mean": {n: float(np.mean([a[n] for a in per_seed.values()]))
                        for n in BOUNDARY_VARIANTS},
               "beta": config.beta, "resolution": config.grid_resolution,
               "margin": config.grid_margin}
    if write:
        for seed, _, files in parts:
            d = os.path.join(config.output_dir, f"seed_{seed}")
            os.makedirs(d, exist_ok=True)
            for name, text in files.items():
                atomic_write_bytes(os.path.join(d, f"{name}.csv"), text.encode())
        os.makedirs(config.output_dir, exist_ok=True)
        atomic_write_bytes(os.path.join(config.output_dir, "agreement.json"),
                           (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode())
    return summary
