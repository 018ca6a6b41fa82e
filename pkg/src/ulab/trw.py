"""Tilted reweighting: forget-class removal, class similarity, exponential tilting.

Distributions are numpy arrays over all ``K`` classes; forget classes keep an
explicit zero slot so shapes never change.  Functions accept a single vector
``(K,)`` or a batch ``(N, K)`` where that makes sense.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import (DegenerateGeometryError, DegenerateMassError, InvalidInputError,
                     OutOfHullError, UsageError)
from .nn import ClassifierModel, forward, softmax

DEFAULT_BETA = 10.0
DEFAULT_TEMPERATURE = 0.01
DEGENERATE_MASS = 1e-9


def _forget_set(forget) -> list[int]:
    if isinstance(forget, Iterable) and not isinstance(forget, (str, bytes)):
        return sorted(int(f) for f in forget)
    return [int(forget)]


@dataclass(frozen=True)
class SimilarityProfile:
    """Similarity of every retained class to one forget class.

    ``scores`` is a distribution over the retained classes (a softmax of the
    cosines at ``temperature``); ``raw_cosines`` holds the cosines themselves.
    """

    scores: dict
    raw_cosines: dict
    d_prime: int
    temperature: float
    forget_class: int
    num_classes: int

    def __post_init__(self):
        if self.forget_class in self.scores:
            raise InvalidInputError("forget class cannot carry a similarity score")
        total = sum(self.scores.values())
        if min(self.scores.values()) < 0 or abs(total - 1.0) > 1e-9:
            raise InvalidInputError("scores must form a distribution over retained classes")

    def vector(self) -> np.ndarray:
        """Scores as a length-K array with 0 in the forget slot."""
        v = np.zeros(self.num_classes)
        for y, s in self.scores.items():
            v[y] = s
        return v

    @classmethod
    def from_scores(cls, scores, forget_class, temperature=1.0, d_prime=0):
        """Profile from raw per-class scores (forget slot ignored), mostly for tests."""
        scores = np.asarray(scores, dtype=np.float64)
        retained = [y for y in range(scores.shape[0]) if y != forget_class]
        s = softmax(scores[retained], temperature)
        return cls({y: float(v) for y, v in zip(retained, s)},
                   {y: float(scores[y]) for y in retained}, d_prime, temperature,
                   int(forget_class), scores.shape[0])

    def to_dict(self) -> dict:
        return {"forget_class": self.forget_class, "d_prime": self.d_prime,
                "temperature": self.temperature,
                "scores": {str(k): v for k, v in sorted(self.scores.items())},
                "raw_cosines": {str(k): v for k, v in sorted(self.raw_cosines.items())}}


def _score_vector(scores) -> np.ndarray:
    if isinstance(scores, SimilarityProfile):
        return scores.vector()
    return np.asarray(scores, dtype=np.float64)


def reweight(p, forget) -> np.ndarray:
    """Zero the forget class(es) and renormalise the remaining mass."""
    p = np.asarray(p, dtype=np.float64)
    idx = _forget_set(forget)
    if max(idx) >= p.shape[-1]:
        raise UsageError(f"forget class {max(idx)} outside {p.shape[-1]} classes")
    removed = p[..., idx].sum(axis=-1, keepdims=True)
    if np.any(removed >= 1.0 - DEGENERATE_MASS):
        raise DegenerateMassError("forget class holds all probability mass")
    out = p / (1.0 - removed)
    out[..., idx] = 0.0
    return out


def tilt(ptilde, scores, beta: float) -> np.ndarray:
    """``q(y) ∝ ptilde(y) exp(beta s_y)``, normalised over the support of ``ptilde``."""
    pt = np.asarray(ptilde, dtype=np.float64)
    s = _score_vector(scores)
    if s.shape[-1] != pt.shape[-1]:
        raise UsageError(f"{s.shape[-1]} scores for {pt.shape[-1]} classes")
    if not math.isfinite(beta):
        raise InvalidInputError("beta must be finite")
    support = pt > 0
    if not np.all(support.any(axis=-1)):
        raise InvalidInputError("reweighted distribution has no retained mass")
    expo = np.where(support, beta * s, -np.inf)
    expo = expo - expo.max(axis=-1, keepdims=True)
    w = pt * np.exp(expo)
    return w / w.sum(axis=-1, keepdims=True)


def moment(ptilde, scores, beta: float) -> float:
    """Expected score under the tilted distribution, ``m(beta)``."""
    return float(np.dot(tilt(ptilde, scores, beta), _score_vector(scores)))


def kl(q, p) -> float:
    """``KL(q || p)`` with ``0 log 0 = 0``; ``inf`` if ``q`` puts mass where ``p`` has none."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    pos = q > 0
    if np.any(p[pos] <= 0):
        return math.inf
    return float(np.sum(q[pos] * np.log(q[pos] / p[pos])))


def solve_beta(ptilde, scores, c: float, tol: float = 1e-10, max_iter: int = 2000) -> float:
    """Find ``beta`` with ``|m(beta) - c| < tol`` by bracketed bisection.

    ``m`` is strictly increasing when the scores are not constant on the support
    of ``ptilde``, so the bracket ``[-1, 1]`` is doubled on whichever side falls
    short of ``c`` and then halved until the tolerance is met.
    """
    pt = np.asarray(ptilde, dtype=np.float64)
    s = _score_vector(scores)
    on_support = s[pt > 0]
    lo_s, hi_s = on_support.min(), on_support.max()
    if not lo_s < c < hi_s:
        raise OutOfHullError(f"c={c} not inside the open score range ({lo_s}, {hi_s}); "
                             "boundary targets need beta = +/-inf")
    lo, hi = -1.0, 1.0
    while moment(pt, s, lo) > c:
        lo *= 2.0
        if lo < -1e12:
            raise OutOfHullError(f"could not bracket c={c} from below")
    while moment(pt, s, hi) < c:
        hi *= 2.0
        if hi > 1e12:
            raise OutOfHullError(f"could not bracket c={c} from above")
    best, best_err = 0.0, math.inf
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        m = moment(pt, s, mid)
        err = abs(m - c)
        if err < best_err:
            best, best_err = mid, err
        if err < tol or mid in (lo, hi):
            break
        if m < c:
            lo = mid
        else:
            hi = mid
    return best


def iproj_oracle(p, forget: int, scores, c: float, step: float = 1e-3,
                 refine_rounds: int = 5) -> np.ndarray:
    """Brute-force ``argmin KL(q || p)`` over the retained simplex with ``E_q[s] = c``.

    Independent of the closed form: two pivot coordinates (lowest and highest
    score) are solved from the two linear constraints and the remaining
    ``R - 2`` coordinates are scanned on a grid of spacing ``step``, followed by
    ``refine_rounds`` local re-gridding passes that shrink the spacing tenfold
    each time.  Exhaustive, so only meant for ``K <= 5``.
    """
    p = np.asarray(p, dtype=np.float64)
    s_full = _score_vector(scores)
    k = p.shape[0]
    if k > 5:
        raise UsageError("exhaustive oracle only supports K <= 5")
    retained = [y for y in range(k) if y != forget]
    s = s_full[retained]
    pr = p[retained]
    if np.ptp(s) == 0:
        raise InvalidInputError("oracle needs non-constant scores")
    if not s.min() <= c <= s.max():
        raise OutOfHullError(f"c={c} outside [{s.min()}, {s.max()}]")
    a, b = int(np.argmin(s)), int(np.argmax(s))
    free = [i for i in range(len(retained)) if i not in (a, b)]

    def complete(u):
        # u: (M, len(free)) -> (M, R) full candidate distributions, NaN rows infeasible
        rest = 1.0 - u.sum(axis=1)
        target = c - u @ s[free]
        qb = (target - s[a] * rest) / (s[b] - s[a])
        qa = rest - qb
        q = np.zeros((u.shape[0], len(retained)))
        q[:, free] = u
        q[:, a] = qa
        q[:, b] = qb
        q[np.abs(q) < 1e-15] = 0.0
        ok = np.all(q >= 0, axis=1) & np.all(u >= 0, axis=1) & (rest >= -1e-15)
        return q, ok

    def objective(q):
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(q > 0, q * np.log(q / pr), 0.0)
        terms = np.where((q > 0) & (pr <= 0), np.inf, terms)
        return terms.sum(axis=1)

    def best_of(u):
        q, ok = complete(u)
        if not ok.any():
            return None
        obj = np.where(ok, objective(q), np.inf)
        i = int(np.argmin(obj))
        return u[i], q[i], obj[i]

    if not free:
        q, ok = complete(np.zeros((1, 0)))
        out = np.zeros(k)
        out[retained] = np.clip(q[0], 0, None)
        return out

    axis = np.linspace(0.0, 1.0, int(round(1.0 / step)) + 1)
    grid = np.stack(np.meshgrid(*([axis] * len(free)), indexing="ij"), -1).reshape(-1, len(free))
    found = best_of(grid)
    if found is None:
        raise OutOfHullError("no feasible grid point; constraint set too thin for this step")
    u_best, q_best, obj_best = found
    h = step
    for _ in range(refine_rounds):
        local = np.linspace(-2 * h, 2 * h, 41)
        offsets = np.stack(np.meshgrid(*([local] * len(free)), indexing="ij"),
                           -1).reshape(-1, len(free))
        # re-centre until the best local point stops moving (valleys can be long)
        for _ in range(200):
            cand = best_of(u_best + offsets)
            if cand is None or not cand[2] < obj_best:
                break
            u_best, q_best, obj_best = cand
        h /= 10.0
    out = np.zeros(k)
    out[retained] = q_best
    return out / out.sum()


def similarity_scores(model: ClassifierModel, forget: int, d_prime: int | None = None,
                      temperature: float = DEFAULT_TEMPERATURE) -> SimilarityProfile:
    """Cosine similarity of PCA-projected logit weight vectors, softmaxed at low temperature.

    PCA is fitted on the ``K`` class weight vectors (rows of the last layer)
    after removing their mean, and each centred vector is projected onto the
    top ``d_prime`` principal directions.  Centring matters: softmax is blind
    to a shift shared by all classes, so without weight decay the mean row
    never leaves its random initial value.
    """
    w = model.weights[-1]
    k, d = w.shape
    if not 0 <= forget < k:
        raise UsageError(f"forget class {forget} outside {k} classes")
    if d_prime is None:
        d_prime = max(1, min(k - 1, d, 16))
    if not 1 <= d_prime <= min(d, k):
        raise UsageError(f"d_prime={d_prime} must lie in [1, min(d, K)={min(d, k)}]")
    if not temperature > 0:
        raise UsageError("temperature must be positive")
    centred = w - w.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    phi = centred @ vt[:d_prime].T
    norms = np.linalg.norm(phi, axis=1)
    if np.any(norms <= 1e-12 * max(1.0, norms.max())):
        raise DegenerateGeometryError("a projected class weight vector has zero norm")
    cos = np.clip(phi @ phi[forget] / (norms * norms[forget]), -1.0, 1.0)
    retained = [y for y in range(k) if y != forget]
    s = softmax(cos[retained], temperature)
    return SimilarityProfile({y: float(v) for y, v in zip(retained, s)},
                             {y: float(cos[y]) for y in retained},
                             d_prime, float(temperature), int(forget), k)


def forget_targets_from_probs(probs, forget, profile: SimilarityProfile,
                              beta: float = DEFAULT_BETA) -> np.ndarray:
    """Tilted targets for rows of ``probs`` (model outputs on forget samples).

    ``forget`` may be a set when several classes are forgotten at once: all of
    them are zeroed, and ``profile`` supplies the scores for the class these
    samples belong to.  Rows whose forget mass is numerically 1 fall back to
    the profile scores themselves.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    idx = _forget_set(forget)
    s = profile.vector()
    fallback = s.copy()
    fallback[idx] = 0.0
    fallback = fallback / fallback.sum()
    removed = probs[:, idx].sum(axis=1)
    ok = removed < 1.0 - DEGENERATE_MASS
    out = np.tile(fallback, (probs.shape[0], 1))
    if ok.any():
        out[ok] = tilt(reweight(probs[ok], idx), s, beta)
    return out


def build_forget_targets(model: ClassifierModel, forget_samples, forget,
                         profile: SimilarityProfile, beta: float = DEFAULT_BETA) -> np.ndarray:
    """Per-sample pipeline forward -> softmax -> reweight -> tilt, one row per sample."""
    x = np.asarray(forget_samples, dtype=np.float64)
    if x.shape[0] == 0:
        return np.zeros((0, model.num_classes))
    return forget_targets_from_probs(softmax(forward(model, x)), forget, profile, beta)


def tilt_records(model: ClassifierModel, forget_samples, forget: int,
                 profile: SimilarityProfile, beta: float = DEFAULT_BETA) -> list[dict]:
    """JSON-ready ``(p, ptilde, s, beta, q)`` per sample, for inspecting the tilt."""
    probs = softmax(forward(model, np.atleast_2d(forget_samples)))
    targets = forget_targets_from_probs(probs, forget, profile, beta)
    s = profile.vector().tolist()
    records = []
    for p, q in zip(probs, targets):
        try:
            pt = reweight(p, forget).tolist()
        except DegenerateMassError:
            pt = None
        records.append({"p": p.tolist(), "ptilde": pt, "s": s, "beta": beta, "q": q.tolist()})
    return records
