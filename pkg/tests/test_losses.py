import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles as O
from conftest import random_rotation
from vcreg import numeric as nm
from vcreg.correspondence import CorrespondenceSet, soft_pointer
from vcreg.errors import ConfigError
from vcreg.geometry import RigidTransform, apply, invert
from vcreg.losses import (LossConfig, combined_loss, correspondence_loss, label_matches, transformation_loss,
                          triplet_loss)


def cset(keypoints, virtual):
    k = len(keypoints)
    return CorrespondenceSet(np.asarray(keypoints), np.zeros((k, 1), dtype=int), np.ones((k, 1)),
                             np.asarray(virtual, dtype=float))


def random_truth(rng):
    return RigidTransform(random_rotation(rng), rng.normal(size=3))


# ---------------------------------------------------------------- labels


def test_exact_virtual_is_true_match(rng):
    p1 = rng.normal(size=(10, 3))
    assert label_matches(cset([2, 5], p1[[2, 5]]), p1, RigidTransform.identity()).tolist() == [True, True]


def test_virtual_near_other_point_is_false_match():
    p1 = np.array([[0, 0, 0], [1, 0, 0], [5, 0, 0]], dtype=float)
    assert label_matches(cset([0], [[0.9, 0, 0]]), p1, RigidTransform.identity()).tolist() == [False]


def test_labels_match_brute_force(rng):
    for _ in range(30):
        p1 = rng.normal(size=(25, 3))
        truth = random_truth(rng)
        kk = rng.choice(25, 8, replace=False)
        virtual = apply(truth, p1[kk] + rng.normal(size=(8, 3)) * 0.3)
        got = label_matches(cset(kk, virtual), p1, truth)
        inv = invert(truth)
        for i, g in enumerate(kk):
            y = apply(inv, virtual[i:i + 1])[0]
            nearest = min(range(25), key=lambda j: (O.sq_dist(y, p1[j]), j))
            assert got[i] == (nearest == g)


# ---------------------------------------------------------------- correspondence loss


def test_aligned_virtuals_zero_loss(rng):
    p1 = rng.normal(size=(10, 3))
    truth = random_truth(rng)
    cs = cset([1, 3, 4], apply(truth, p1[[1, 3, 4]]))
    loss = correspondence_loss(cs, label_matches(cs, p1, truth), p1, truth)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-12)


def test_single_true_match_distance():
    p1 = np.array([[0, 0, 0], [10, 0, 0]], dtype=float)
    cs = cset([0], [[0.0, 0.3, 0.4]])
    loss = correspondence_loss(cs, np.array([True]), p1, RigidTransform.identity())
    assert float(loss.data) == pytest.approx(0.5, abs=1e-15)


def test_mixed_case_hand_sum(rng):
    p1 = rng.normal(size=(6, 3))
    truth = random_truth(rng)
    kk = [0, 1, 2, 3, 4]
    virtual = rng.normal(size=(5, 3))
    labels = np.array([True, False, True, False, False])
    cs = cset(kk, virtual)
    got = float(correspondence_loss(cs, labels, p1, truth, LossConfig(gamma=0.5)).data)
    inv = invert(truth)
    d = [O.norm(apply(inv, virtual[i:i + 1])[0] - p1[g]) for i, g in enumerate(kk)]
    want = (d[0] + d[2]) / 2 + 0.5 * (d[1] + d[3] + d[4]) / 3
    assert got == pytest.approx(want, abs=1e-12)


def test_empty_terms_dropped(rng):
    p1 = rng.normal(size=(4, 3))
    cs = cset([0, 1], rng.normal(size=(2, 3)))
    t = RigidTransform.identity()
    all_false = float(correspondence_loss(cs, np.array([False, False]), p1, t, LossConfig(gamma=0.5)).data)
    d = np.linalg.norm(cs.virtual - p1[[0, 1]], axis=1)
    assert all_false == pytest.approx(0.5 * d.mean(), abs=1e-12)
    assert np.isfinite(float(correspondence_loss(cs, np.array([True, True]), p1, t).data))


@given(st.integers(0, 2**32 - 1))
def test_correspondence_loss_non_negative(seed):
    rng = np.random.default_rng(seed)
    p1 = rng.normal(size=(8, 3))
    cs = cset([0, 2, 5], rng.normal(size=(3, 3)))
    labels = rng.random(3) < 0.5
    assert float(correspondence_loss(cs, labels, p1, random_truth(rng)).data) >= 0


def test_correspondence_loss_gradcheck_through_pointer(rng):
    p1, p2 = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    truth = random_truth(rng)
    phi1, phi2 = nm.Tensor(rng.uniform(-1, 1, size=(6, 4))), nm.Tensor(rng.uniform(-1, 1, size=(6, 4)))
    kk, jj = [0, 2, 3, 5], [[0, 1, 2], [2, 3, 4], [1, 4, 5], [0, 3, 5]]
    labels = np.array([True, False, True, False])

    def f(ts):
        cs = soft_pointer(ts[0], ts[1], p2, kk, jj)
        return correspondence_loss(cs, labels, p1, truth)

    assert nm.gradcheck(f, [phi1, phi2]) < 1e-4


# ---------------------------------------------------------------- transformation loss


def test_transformation_loss_cases(rng):
    t = random_truth(rng)
    assert transformation_loss(t, t) == pytest.approx(0.0, abs=1e-24)
    shifted = RigidTransform(t.rotation, t.translation + [1, 0, 0])
    assert transformation_loss(shifted, t) == pytest.approx(1.0, abs=1e-12)


def test_transformation_loss_matches_norms(rng):
    a, b = random_truth(rng), random_truth(rng)
    want = np.linalg.norm(a.rotation.T @ b.rotation - np.eye(3), "fro") ** 2 + np.linalg.norm(a.translation - b.translation) ** 2
    assert transformation_loss(a, b) == pytest.approx(want, rel=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_transformation_loss_right_invariance(seed):
    rng = np.random.default_rng(seed)
    r, rg, q = random_rotation(rng), random_rotation(rng), random_rotation(rng)
    t = rng.normal(size=3)
    base = transformation_loss(RigidTransform(r, t), RigidTransform(rg, t))
    moved = transformation_loss(RigidTransform(r @ q, t), RigidTransform(rg @ q, t))
    assert moved == pytest.approx(base, abs=1e-10)


# ---------------------------------------------------------------- combined / triplet


def test_combined_loss_cases(rng):
    corr = nm.Tensor(0.7)
    params = [nm.Tensor(rng.normal(size=(2, 3))), nm.Tensor(rng.normal(size=4))]
    assert float(combined_loss(corr, params, LossConfig(alpha=2.0, beta=0.0)).data) == pytest.approx(1.4)
    zeros = [nm.Tensor(np.zeros(3))]
    assert float(combined_loss(corr, zeros, LossConfig(alpha=1.0)).data) == 0.7
    sq = sum(float(x) ** 2 for p in params for x in p.data.reshape(-1))
    got = float(combined_loss(corr, params, LossConfig(alpha=1.0, beta=0.01)).data)
    assert got == pytest.approx(0.7 + 0.01 * sq, abs=1e-12)


def test_combined_loss_grows_with_parameter_magnitude(rng):
    p = rng.normal(size=5)
    values = [float(combined_loss(nm.Tensor(0.3), [nm.Tensor(p * s)], LossConfig(beta=1e-3)).data)
              for s in (1.0, 1.1, 2.0)]
    assert values[0] < values[1] < values[2]


def test_triplet_cases(rng):
    a = rng.normal(size=(1, 4))
    assert float(triplet_loss(a, a, a + 10.0, margin=0.5).data) == 0.0
    n = rng.normal(size=(1, 4))
    assert float(triplet_loss(a, n, n, margin=0.5).data) == pytest.approx(0.5)
    e = [nm.Tensor(np.array([1.0, -2.0]))]
    assert float(triplet_loss(a, n, n, 0.5, 0.1, e).data) == pytest.approx(0.5 + 0.1 * 3.0)


def test_triplet_hand_computed(rng):
    a, p, n = rng.normal(size=(3, 6))
    want = max(0.0, O.sq_dist(a, p) - O.sq_dist(a, n) + 0.5)
    assert float(triplet_loss(a, p, n, margin=0.5).data) == pytest.approx(want, abs=1e-12)


def test_triplet_gradcheck(rng):
    a, p, n = (nm.Tensor(rng.uniform(-1, 1, size=(3, 4))) for _ in range(3))
    e = nm.Tensor(rng.uniform(0.1, 1, size=5))
    assert nm.gradcheck(lambda ts: triplet_loss(ts[0], ts[1], ts[2], 2.0, 0.01, [ts[3]]), [a, p, n, e]) < 1e-4


def test_loss_config_rejects_negative():
    with pytest.raises(ConfigError):
        LossConfig(gamma=-0.1)
