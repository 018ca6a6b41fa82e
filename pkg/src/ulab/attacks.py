"""Membership-inference style audits of unlearned models.

* MIA-NN: per retained class, a 1-D threshold detector on that class's logit
  (class test samples vs. the other retained test samples) is applied to the
  forget-class test samples.  On retrained models the class whose detector
  fires most often is the nearest neighbour ``r_n``; an unlearned model is
  scored by the same detector built from its own logits.
* basic MIA: a threshold on model confidence separating retained training
  samples (members) from retained test samples (non-members); the score is the
  percentage of forget training samples judged non-members.
* simplified U-LiRA: per-sample Gaussian likelihood ratio between shadow
  unlearned and shadow retrained models on a logit-margin statistic.

The MIA-NN and U-LiRA cores work on plain logit arrays so externally produced
logit dumps can be audited without a model.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .datasets import SplitDataset
from .errors import UsageError
from .nn import ClassifierModel, forward, softmax

DEFAULT_RETRAIN_MODELS = 3
VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class ThresholdClassifier:
    threshold: float
    polarity: str  # "above": x > threshold -> 1, "below": x <= threshold -> 1
    train_balanced_accuracy: float
    degenerate: bool = False

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.polarity == "above":
            return (x > self.threshold).astype(np.int64)
        return (x <= self.threshold).astype(np.int64)


def fit_logit_classifier(positives, negatives, polarity: str | None = None) -> ThresholdClassifier:
    """Exhaustive balanced-accuracy threshold search on 1-D values.

    Candidates are midpoints between consecutive distinct pooled values, each
    tried with both polarities (or only ``polarity`` if given).  Ties go to the
    lowest threshold, then to ``above``.  Balanced accuracy is compared as an
    exact integer numerator, so tie-breaking is not at the mercy of rounding.
    """
    pos = np.sort(np.asarray(positives, dtype=np.float64).ravel())
    neg = np.sort(np.asarray(negatives, dtype=np.float64).ravel())
    n_pos, n_neg = pos.size, neg.size
    if n_pos == 0 or n_neg == 0:
        raise UsageError("threshold classifier needs positives and negatives")
    values = np.unique(np.concatenate([pos, neg]))
    if values.size == 1:
        return ThresholdClassifier(float(values[0]), polarity or "above", 0.5, degenerate=True)
    cand = 0.5 * (values[:-1] + values[1:])
    tp = n_pos - np.searchsorted(pos, cand, side="right")
    tn = np.searchsorted(neg, cand, side="right")
    denom = 2 * n_pos * n_neg
    above = tp.astype(np.int64) * n_neg + tn.astype(np.int64) * n_pos
    below = denom - above
    if polarity == "above":
        scored = above
        pols = ["above"]
    elif polarity == "below":
        scored = below
        pols = ["below"]
    else:
        scored = np.stack([above, below], axis=1).ravel()
        pols = ["above", "below"]
    best = int(np.argmax(scored))
    i, j = divmod(best, len(pols))
    return ThresholdClassifier(float(cand[i]), pols[j], float(scored[best]) / denom)


# -- MIA-NN ------------------------------------------------------------------

@dataclass
class AttackReport:
    per_class_mean_acc: dict
    nearest_neighbor: int
    retrain_reference_acc: float
    target_acc: float
    gap: float
    n_retrain_models: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_mean_acc"] = {str(k): v for k, v in sorted(self.per_class_mean_acc.items())}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def logits_by_class(model: ClassifierModel, split: SplitDataset) -> dict:
    return {c: forward(model, d.features) if len(d) else np.zeros((0, model.num_classes))
            for c, d in split.test_by_class.items()}


def _check_forget(logits: dict, forget: int):
    if forget not in logits or logits[forget].shape[0] == 0:
        raise UsageError("forget-class test set is empty")


def detector_accuracy(logits: dict, forget: int, cls: int, excluded=(), seed: int = 0,
                      with_classifier: bool = False):
    """Fraction of forget test samples the class-``cls`` logit detector flags.

    ``logits`` maps every class to the ``(n_c, K)`` logits of its test
    samples.  Negatives (other retained classes) are subsampled without
    replacement to the positive count with a stream fixed by ``(seed, cls)``,
    so every model sees the same subsample.
    """
    _check_forget(logits, forget)
    skip = set(excluded) | {forget, cls}
    pos = logits[cls][:, cls]
    if pos.size == 0:
        raise UsageError(f"no test samples for class {cls}")
    neg = np.concatenate([logits[c][:, cls] for c in sorted(logits) if c not in skip])
    if neg.size == 0:
        raise UsageError(f"no negative test samples for class {cls}")
    if neg.size > pos.size:
        rng = np.random.default_rng([seed, cls])
        neg = neg[np.sort(rng.choice(neg.size, pos.size, replace=False))]
    h = fit_logit_classifier(pos, neg)
    acc = float(np.mean(h.predict(logits[forget][:, cls])))
    return (acc, h) if with_classifier else acc


def nearest_neighbor_from_logits(retrain_logits: list, forget: int, retained, excluded=(),
                                 seed: int = 0):
    if not retrain_logits:
        raise UsageError("need at least one retrain model")
    per_class = {}
    for r in retained:
        per_class[int(r)] = float(np.mean([detector_accuracy(lg, forget, r, excluded, seed)
                                           for lg in retrain_logits]))
    # max() keeps the first maximum, so ties go to the lowest class id
    rn = max(sorted(per_class), key=lambda c: per_class[c])
    return rn, per_class


def nearest_neighbor_class(retrain_models, split: SplitDataset, forget: int, seed: int = 0):
    """``(r_n, {class: mean detector accuracy over retrain models})``."""
    logits = [logits_by_class(m, split) for m in retrain_models]
    retained = [c for c in split.retained_classes]
    return nearest_neighbor_from_logits(logits, forget, retained, split.forget_classes, seed)


def miann_score(target: ClassifierModel, rn: int, split: SplitDataset, forget: int,
                seed: int = 0) -> float:
    return detector_accuracy(logits_by_class(target, split), forget, rn,
                             split.forget_classes, seed)


def mia_nn_report(target: ClassifierModel, retrain_models, split: SplitDataset, forget: int,
                  seed: int = 0) -> AttackReport:
    rn, per_class = nearest_neighbor_class(retrain_models, split, forget, seed)
    acc, h = detector_accuracy(logits_by_class(target, split), forget, rn,
                               split.forget_classes, seed, with_classifier=True)
    return AttackReport(per_class, rn, per_class[rn], acc, per_class[rn] - acc,
                        len(retrain_models), h.degenerate)


def mia_nn_report_from_logits(target_logits: dict, retrain_logits: list, forget: int,
                              retained, excluded=(), seed: int = 0) -> AttackReport:
    rn, per_class = nearest_neighbor_from_logits(retrain_logits, forget, retained, excluded, seed)
    acc, h = detector_accuracy(target_logits, forget, rn, excluded, seed, with_classifier=True)
    return AttackReport(per_class, rn, per_class[rn], acc, per_class[rn] - acc,
                        len(retrain_logits), h.degenerate)


# -- logit dumps -------------------------------------------------------------

def write_logit_csv(path, sample_ids, labels, logits):
    logits = np.asarray(logits, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sampleId", "trueLabel"] + [f"logit_{k}" for k in range(logits.shape[1])])
        for sid, y, row in zip(sample_ids, labels, logits):
            w.writerow([sid, int(y)] + [repr(float(v)) for v in row])


def read_logit_csv(path):
    """``(sample_ids, labels, logits)`` from a ``sampleId,trueLabel,logit_0..`` CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:2] != ["sampleId", "trueLabel"] or not header[2:]:
        raise UsageError(f"unexpected logit dump header {header}")
    k = len(header) - 2
    if [f"logit_{i}" for i in range(k)] != header[2:]:
        raise UsageError("logit columns must be logit_0..logit_{K-1} in order")
    ids = [r[0] for r in body]
    labels = np.array([int(r[1]) for r in body], dtype=np.int64)
    logits = np.array([[float(v) for v in r[2:]] for r in body]).reshape(len(body), k)
    return ids, labels, logits


def group_logits(labels, logits, num_classes: int | None = None) -> dict:
    labels = np.asarray(labels)
    logits = np.asarray(logits, dtype=np.float64)
    k = num_classes or logits.shape[1]
    return {c: logits[labels == c] for c in range(k)}


# -- basic MIA ---------------------------------------------------------------

@dataclass(frozen=True)
class BasicMiaResult:
    score: float
    classifier: ThresholdClassifier
    significant: bool

    @property
    def degenerate(self) -> bool:
        return self.classifier.degenerate


def true_label_confidence(model: ClassifierModel, features, labels) -> np.ndarray:
    p = softmax(forward(model, features))
    return p[np.arange(p.shape[0]), np.asarray(labels)]


def dkw_radius(n: int, delta: float) -> float:
    return float(np.sqrt(np.log(2.0 / delta) / (2.0 * n)))


def basic_mia(target: ClassifierModel, split: SplitDataset, delta: float = 0.05) -> BasicMiaResult:
    """Threshold attack on true-label confidence.

    Members are the retained training samples, non-members the retained test
    samples; membership is assumed to raise confidence, so the threshold is
    fitted with ``above -> member`` polarity.  A fitted threshold is kept only
    if its advantage over chance exceeds the two-sample DKW radius at level
    ``delta``; otherwise members and non-members are indistinguishable and the
    attack only calls a sample a non-member when its confidence is below every
    reference sample.  Score: 100 x fraction of forget training samples
    classified as non-members (100 = fully forgotten).
    """
    ft = split.forget_train
    if len(ft) == 0:
        raise UsageError("no forget training samples")
    rt, te = split.retain_train, split.retain_test
    members = true_label_confidence(target, rt.features, rt.labels)
    non_members = true_label_confidence(target, te.features, te.labels)
    h = fit_logit_classifier(members, non_members, polarity="above")
    # BA - 1/2 is half the ECDF gap, so compare against half the summed radii
    guard = 0.5 * (dkw_radius(members.size, delta) + dkw_radius(non_members.size, delta))
    significant = h.train_balanced_accuracy - 0.5 > guard
    if not significant and not h.degenerate:
        floor = min(members.min(), non_members.min())
        h = ThresholdClassifier(float(np.nextafter(floor, -np.inf)), "above", 0.5)
    forget_conf = true_label_confidence(target, ft.features, ft.labels)
    return BasicMiaResult(100.0 * float(np.mean(h.predict(forget_conf) == 0)), h, significant)


def basic_mia_score(target: ClassifierModel, split: SplitDataset) -> float:
    return basic_mia(target, split).score


# -- simplified U-LiRA -------------------------------------------------------

@dataclass
class ShadowSet:
    unlearned_models: list
    retrain_models: list

    def __post_init__(self):
        if not self.unlearned_models or not self.retrain_models:
            raise UsageError("both shadow arms need at least one model")


def margin_statistic(model: ClassifierModel, features, forget: int, excluded=()) -> np.ndarray:
    """Forget-class logit minus the largest retained logit, per sample."""
    z = forward(model, features)
    skip = set(excluded) | {forget}
    retained = [c for c in range(z.shape[1]) if c not in skip]
    return z[:, forget] - z[:, retained].max(axis=1)


def _log_gauss(x, mu, var):
    return -0.5 * (np.log(2 * np.pi * var) + (x - mu) ** 2 / var)


def ulira_from_stats(unlearned_stats, retrain_stats) -> float:
    """Leave-one-model-out likelihood-ratio attack on per-sample statistics.

    ``unlearned_stats`` and ``retrain_stats`` are ``(n_models, n_samples)``
    arrays.  Each model is held out in turn; per sample, a Gaussian is fitted to
    each arm's remaining models (variance floored at ``1e-6``) and the held-out
    statistic is assigned to the arm with the higher likelihood (ties count
    as retrain).  Returns the arm-balanced accuracy: 0.5 means the arms are
    indistinguishable.
    """
    arms = [np.atleast_2d(np.asarray(retrain_stats, dtype=np.float64)),
            np.atleast_2d(np.asarray(unlearned_stats, dtype=np.float64))]
    if min(a.shape[0] for a in arms) < 2:
        raise UsageError("each shadow arm needs at least 2 models")
    if arms[0].shape[1] != arms[1].shape[1]:
        raise UsageError("arms must be evaluated on the same samples")
    per_arm = []
    for label, arm in enumerate(arms):
        other = arms[1 - label]
        mu_o, var_o = other.mean(axis=0), np.maximum(other.var(axis=0), VAR_FLOOR)
        correct = []
        for i in range(arm.shape[0]):
            rest = np.delete(arm, i, axis=0)
            mu_s, var_s = rest.mean(axis=0), np.maximum(rest.var(axis=0), VAR_FLOOR)
            x = arm[i]
            ll_same = _log_gauss(x, mu_s, var_s)
            ll_other = _log_gauss(x, mu_o, var_o)
            ll_unl, ll_ret = (ll_same, ll_other) if label == 1 else (ll_other, ll_same)
            pred = (ll_unl > ll_ret).astype(int)
            correct.append(np.mean(pred == label))
        per_arm.append(float(np.mean(correct)))
    return float(np.mean(per_arm))


def ulira_simplified(shadows: ShadowSet, target: ClassifierModel, split: SplitDataset,
                     forget: int) -> float:
    """U-LiRA accuracy with ``target`` joining the unlearned arm.

    ``target`` is an unlearned model; every model (target and shadows) is
    classified leave-one-out.
    """
    if len(shadows.unlearned_models) < 2 or len(shadows.retrain_models) < 2:
        raise UsageError("U-LiRA needs at least 2 shadow models per arm")
    x = split.test_by_class[forget].features
    if x.shape[0] == 0:
        raise UsageError("forget-class test set is empty")
    stat = lambda m: margin_statistic(m, x, forget, split.forget_classes)  # noqa: E731
    unlearned = np.stack([stat(m) for m in [target, *shadows.unlearned_models]])
    retrain = np.stack([stat(m) for m in shadows.retrain_models])
    return ulira_from_stats(unlearned, retrain)
