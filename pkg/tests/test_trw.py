import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from ulab.errors import (DegenerateGeometryError, DegenerateMassError, InvalidInputError,
                         OutOfHullError, UsageError)
from ulab.nn import ClassifierModel, init_model, softmax, forward
from ulab.trw import (SimilarityProfile, build_forget_targets, forget_targets_from_probs,
                      iproj_oracle, kl, moment, reweight, similarity_scores, solve_beta, tilt,
                      tilt_records)


def _last_layer_model(w):
    w = np.asarray(w, dtype=np.float64)
    return ClassifierModel([w], [np.zeros(w.shape[0])])


# -- reweight ------------------------------------------------------------------

def test_reweight_uniform():
    np.testing.assert_allclose(reweight([0.25] * 4, 0), [0, 1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_reweight_noop_when_forget_mass_zero():
    p = np.array([0.0, 0.7, 0.3])
    assert np.array_equal(reweight(p, 0), p)


def test_reweight_hand_example():
    np.testing.assert_allclose(reweight([0.5, 0.3, 0.2], 0), [0, 0.6, 0.4], atol=1e-15)


def test_reweight_degenerate():
    with pytest.raises(DegenerateMassError):
        reweight([1.0, 0.0, 0.0], 0)
    with pytest.raises(DegenerateMassError):
        reweight([1 - 1e-10, 1e-10, 0.0], 0)


def test_reweight_several_forget_classes():
    np.testing.assert_allclose(reweight([0.2, 0.3, 0.1, 0.4], {0, 2}), [0, 3 / 7, 0, 4 / 7],
                               atol=1e-15)


# -- similarity ------------------------------------------------------------------

def test_similarity_hand_built_pca():
    # centred-row cosines and the d'=1 sign pattern come from a scalar 2x2 eigen solution
    prof = similarity_scores(_last_layer_model([[1, 0], [0.8, 0.3], [-1, 2]]), 0, d_prime=2)
    assert prof.raw_cosines[1] == pytest.approx(0.9960610469790848, abs=1e-12)
    assert prof.raw_cosines[2] == pytest.approx(-0.9993681258932764, abs=1e-12)
    assert prof.scores[1] == pytest.approx(1.0, abs=1e-12)
    prof1 = similarity_scores(_last_layer_model([[1, 0], [0.8, 0.3], [-1, 2]]), 0, d_prime=1)
    assert prof1.raw_cosines == pytest.approx({1: 1.0, 2: -1.0})


def test_similarity_self_similar_class_wins():
    w = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    prof = similarity_scores(_last_layer_model(w), 0, d_prime=3)
    assert prof.raw_cosines[2] == pytest.approx(1.0)
    assert max(prof.scores, key=prof.scores.get) == 2


def test_similarity_symmetric_geometry_gives_uniform_scores():
    # regular simplex rows: centred vectors are equiangular
    w = np.eye(4)
    prof = similarity_scores(_last_layer_model(w), 1, d_prime=3)
    cos = list(prof.raw_cosines.values())
    np.testing.assert_allclose(cos, [-1 / 3] * 3, atol=1e-12)
    np.testing.assert_allclose(list(prof.scores.values()), [1 / 3] * 3, atol=1e-9)


def test_similarity_profile_invariants():
    prof = similarity_scores(init_model([4, 8, 5], 1), 2)
    assert 2 not in prof.scores
    assert sum(prof.scores.values()) == pytest.approx(1.0, abs=1e-9)
    assert all(-1 <= c <= 1 for c in prof.raw_cosines.values())
    assert prof.d_prime == 4 and prof.temperature == 0.01
    assert prof.vector()[2] == 0.0


def test_similarity_errors():
    m = init_model([3, 4], 0)
    with pytest.raises(UsageError):
        similarity_scores(m, 4)
    with pytest.raises(UsageError):
        similarity_scores(m, 0, d_prime=5)
    with pytest.raises(UsageError):
        similarity_scores(m, 0, temperature=0.0)
    with pytest.raises(DegenerateGeometryError):
        similarity_scores(_last_layer_model([[1, 1], [1, 1], [1, 1]]), 0, d_prime=1)


def test_profile_validation():
    with pytest.raises(InvalidInputError):
        SimilarityProfile({0: 0.5, 1: 0.5}, {}, 1, 1.0, 0, 3)
    with pytest.raises(InvalidInputError):
        SimilarityProfile({1: 0.5, 2: 0.6}, {}, 1, 1.0, 0, 3)


# -- tilt / moment / solver ---------------------------------------------------------

def test_tilt_beta_zero_is_identity():
    pt = np.array([0.0, 0.2, 0.5, 0.3])
    np.testing.assert_allclose(tilt(pt, [0, 0.1, 0.6, 0.3], 0.0), pt, atol=1e-15)


def test_tilt_constant_scores_is_identity():
    pt = np.array([0.0, 0.2, 0.5, 0.3])
    np.testing.assert_allclose(tilt(pt, [0, 0.4, 0.4, 0.4], 17.0), pt, atol=1e-15)


def test_tilt_hand_example():
    np.testing.assert_allclose(tilt([0.6, 0.4], [0.0, 1.0], math.log(3)), [1 / 3, 2 / 3],
                               atol=1e-15)


def test_tilt_keeps_forget_zero_and_is_stable():
    q = tilt([0.0, 0.5, 0.5], [0.0, 1.0, -1.0], 800.0)
    assert q[0] == 0.0
    np.testing.assert_allclose(q, [0.0, 1.0, 0.0], atol=1e-300)


def test_tilt_no_mass():
    with pytest.raises(InvalidInputError):
        tilt([0.0, 0.0], [0.5, 0.5], 1.0)


def test_solve_beta_examples():
    assert solve_beta([0.6, 0.4], [0.0, 1.0], 2 / 3) == pytest.approx(math.log(3), abs=1e-8)
    pt, s = [0.1, 0.5, 0.4], [0.2, 0.3, 0.5]
    assert abs(solve_beta(pt, s, float(np.dot(pt, s)))) < 1e-8
    with pytest.raises(OutOfHullError):
        solve_beta(pt, s, 0.5)
    with pytest.raises(OutOfHullError):
        solve_beta(pt, s, 0.9)


def test_solve_beta_ignores_scores_off_support():
    # class 0 has no mass, so its extreme score is not part of the hull
    with pytest.raises(OutOfHullError):
        solve_beta([0.0, 0.5, 0.5], [5.0, 0.2, 0.4], 1.0)


def test_oracle_trivial_cases():
    p = np.array([0.3, 0.2, 0.5])
    s = np.array([0.0, 0.25, 0.75])
    pt = reweight(p, 0)
    q = iproj_oracle(p, 0, s, float(pt @ s))
    np.testing.assert_allclose(q, pt, atol=1e-3)
    with pytest.raises(OutOfHullError):
        iproj_oracle(p, 0, s, 0.9)


def test_oracle_point_mass():
    p = np.array([0.2, 0.0, 0.8, 0.0])
    s = np.array([0.0, 0.1, 0.6, 0.3])
    q = iproj_oracle(p, 0, s, 0.6)
    np.testing.assert_allclose(q, [0, 0, 1, 0], atol=1e-9)


@pytest.mark.parametrize("seed", range(4))
def test_oracle_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    k = 3 + seed % 3
    p = rng.dirichlet(np.ones(k))
    s = rng.dirichlet(np.ones(k))
    pt = reweight(p, 0)
    c = moment(pt, s, 1.0)
    q = tilt(pt, s, solve_beta(pt, s, c))
    assert np.abs(q - iproj_oracle(p, 0, s, c)).max() < 1e-3


def _instance(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(3, 8))
    f = int(rng.integers(0, k))
    p = rng.dirichlet(np.ones(k))
    s = rng.normal(size=k)
    return reweight(p, f), s, p, f


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_moment_strictly_increasing(seed):
    pt, s, _, _ = _instance(seed)
    ms = [moment(pt, s, b) for b in np.linspace(-3, 3, 13)]
    assert all(b > a for a, b in zip(ms, ms[1:]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.floats(-5, 5), st.floats(-20, 20))
def test_tilt_shift_invariance(seed, shift, beta):
    pt, s, _, _ = _instance(seed)
    np.testing.assert_allclose(tilt(pt, s + shift, beta), tilt(pt, s, beta), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_kl_grows_away_from_zero(seed):
    pt, s, _, _ = _instance(seed)
    up = [kl(tilt(pt, s, b), pt) for b in np.linspace(0, 6, 13)]
    down = [kl(tilt(pt, s, -b), pt) for b in np.linspace(0, 6, 13)]
    assert all(b >= a - 1e-12 for a, b in zip(up, up[1:]))
    assert all(b >= a - 1e-12 for a, b in zip(down, down[1:]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_reweight_kl_factorization(seed):
    pt, _, p, f = _instance(seed)
    rng = np.random.default_rng(seed + 1)
    q = rng.dirichlet(np.ones(p.shape[0]))
    q[f] = 0.0
    q /= q.sum()
    assert kl(q, p) - kl(q, pt) == pytest.approx(-math.log(1 - p[f]), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.05, 0.95))
def test_solve_beta_hits_moment(seed, frac):
    pt, s, _, _ = _instance(seed)
    on = s[pt > 0]
    assume(np.ptp(on) > 1e-6)
    c = on.min() + frac * np.ptp(on)
    assert abs(moment(pt, s, solve_beta(pt, s, c)) - c) < 1e-8


# -- targets -----------------------------------------------------------------------

def test_targets_compose_audited_ops():
    # q values frozen from an independent loop evaluation of forward/softmax/reweight/tilt
    model = init_model([2, 6, 3], 5)
    prof = SimilarityProfile({0: 0.7, 2: 0.3}, {0: 0.0, 2: 0.0}, 1, 1.0, 1, 3)
    x = [[0.5, 0.2], [-1.0, 1.5], [2.0, -0.3]]
    got = build_forget_targets(model, x, 1, prof, 10.0)
    want = [[0.9798282057819333, 0.0, 0.02017179421806668],
            [0.9414312790070462, 0.0, 0.058568720992953925],
            [0.985024584868041, 0.0, 0.014975415131959087]]
    np.testing.assert_allclose(got, want, atol=1e-13)


def test_targets_beta_zero_equals_reweight():
    model = init_model([3, 5, 4], 2)
    x = np.random.default_rng(0).normal(size=(5, 3))
    prof = similarity_scores(model, 3)
    got = build_forget_targets(model, x, 3, prof, 0.0)
    np.testing.assert_allclose(got, reweight(softmax(forward(model, x)), 3), atol=1e-15)


def test_targets_valid_and_zero_on_forget():
    model = init_model([3, 5, 4], 8)
    x = np.random.default_rng(1).normal(size=(20, 3))
    t = build_forget_targets(model, x, 1, similarity_scores(model, 1), 10.0)
    np.testing.assert_allclose(t.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(t[:, 1] == 0.0)


def test_targets_when_forget_mass_already_zero():
    prof = SimilarityProfile({1: 0.8, 2: 0.2}, {1: 0.0, 2: 0.0}, 1, 1.0, 0, 3)
    p = np.array([[0.0, 0.5, 0.5]])
    np.testing.assert_allclose(forget_targets_from_probs(p, 0, prof, 2.0), tilt(p, prof, 2.0))


def test_targets_degenerate_row_falls_back_to_scores():
    prof = SimilarityProfile({1: 0.8, 2: 0.2}, {1: 0.0, 2: 0.0}, 1, 1.0, 0, 3)
    out = forget_targets_from_probs([[1.0, 0.0, 0.0], [0.5, 0.25, 0.25]], 0, prof, 10.0)
    np.testing.assert_allclose(out[0], [0.0, 0.8, 0.2])
    np.testing.assert_allclose(out[1], tilt(reweight([0.5, 0.25, 0.25], 0), prof, 10.0))


def test_tilt_records_are_json_ready():
    import json
    model = init_model([2, 3], 0)
    recs = tilt_records(model, [[0.1, 0.2]], 0, similarity_scores(model, 0), 10.0)
    doc = json.loads(json.dumps(recs))
    assert set(doc[0]) == {"p", "ptilde", "s", "beta", "q"}
    assert doc[0]["q"][0] == 0.0
