import math

import numpy as np
import pytest

from pehcm import autodiff as ad
from pehcm import geometry
from pehcm.margins import (
    EPS_KL,
    LabelTriple,
    TargetDistances,
    batch_stratum_means,
    cosine_distance,
    distance_matrix,
    hcm_loss,
    target_matrix,
    total_loss,
)

from conftest import fd_gradient


def make_labels(instance, fine, coarse):
    return LabelTriple(np.array(instance), np.array(fine), np.array(coarse))


# -- cosine distance ----------------------------------------------------------


def test_cosine_distance_anchor_values():
    assert cosine_distance([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert cosine_distance([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert cosine_distance([1.0, 0.0], [-1.0, 0.0]) == 2.0


def test_cosine_distance_rejects_zero():
    with pytest.raises(ValueError):
        cosine_distance([0.0, 0.0], [1.0, 0.0])


def test_cosine_distance_invariant_under_exp_map(rng):
    q = rng.normal(size=(40, 6))
    k = rng.normal(size=(40, 6))
    for c in (1e-3, 1.0):
        mapped = np.abs(cosine_distance(geometry.exp_map(q, c), geometry.exp_map(k, c))
                        - cosine_distance(q, k))
        assert mapped.max() < 1e-9


def test_distance_matrix_against_double_loop(rng):
    q = rng.normal(size=(3, 2))
    k = rng.normal(size=(3, 2))
    w = distance_matrix(q, k)
    for i in range(3):
        for j in range(3):
            assert abs(w[i, j] - cosine_distance(q[i], k[j])) < 1e-12


def test_distance_matrix_diagonal_and_degenerate_batch(rng):
    q = rng.normal(size=(4, 3))
    assert np.abs(np.diag(distance_matrix(q, q))).max() < 1e-12
    single = distance_matrix(q[:1], q[:1])
    assert single.shape == (1, 1)


def test_distance_matrix_rejects_zero_rows(rng):
    q = rng.normal(size=(3, 2))
    q[1] = 0.0
    with pytest.raises(ValueError):
        distance_matrix(q, q)


# -- target ladder ----------------------------------------------------------------


def test_target_matrix_ladder_branches():
    t = TargetDistances()
    # two views of one sample / same fine / same coarse / different coarse
    lq = make_labels([0, 1, 2, 3], [0, 0, 1, 0], [0, 0, 0, 1])
    lk = make_labels([0, 1, 2, 3], [0, 0, 1, 0], [0, 0, 0, 1])
    m = target_matrix(lq, lk, t)
    assert m[0, 0] == t.d0 == 0.0            # same instance
    assert m[0, 1] == t.d1                    # same coarse + same fine
    assert m[0, 2] == t.d2                    # same coarse, different fine
    assert m[0, 3] == t.d3 == 1.0             # different coarse
    # pseudo-labels are scoped within the coarse class: same fine id across
    # different coarse classes is not a fine match
    assert m[1, 3] == t.d3


def test_target_matrix_absent_fine_skips_d1():
    t = TargetDistances()
    lq = make_labels([0, 1], [-1, -1], [0, 0])
    m = target_matrix(lq, lq, t)
    assert m[0, 1] == t.d2 and m[1, 0] == t.d2


def test_target_matrix_brute_force_six_samples():
    t = TargetDistances(d1=0.2, d2=0.6)
    instance = [0, 0, 1, 2, 3, 4]
    fine = [0, 0, 0, 1, -1, 0]
    coarse = [0, 0, 0, 0, 0, 1]
    labels = make_labels(instance, fine, coarse)
    got = target_matrix(labels, labels, t)
    for i in range(6):
        for j in range(6):
            if instance[i] == instance[j]:
                want = t.d0
            elif (coarse[i] == coarse[j] and fine[i] >= 0 and fine[j] >= 0
                  and fine[i] == fine[j]):
                want = t.d1
            elif coarse[i] == coarse[j]:
                want = t.d2
            else:
                want = t.d3
            assert got[i, j] == want, (i, j)


def test_target_matrix_permutation_equivariant(rng):
    t = TargetDistances()
    labels = make_labels([0, 1, 2, 3, 4], [0, 1, 0, -1, 1], [0, 0, 1, 1, 0])
    m = target_matrix(labels, labels, t)
    perm = rng.permutation(5)
    permuted = make_labels(labels.instance_id[perm], labels.fine_pseudo[perm],
                           labels.coarse[perm])
    assert np.array_equal(target_matrix(permuted, permuted, t), m[np.ix_(perm, perm)])


# -- KL loss -----------------------------------------------------------------------


def test_hcm_loss_zero_iff_rows_match(rng):
    m = rng.uniform(0.0, 2.0, (4, 4))
    assert hcm_loss(m.copy(), m) == 0.0
    w = m.copy()
    w[2, 1] = (m[2, 1] + 1.0) % 2.0
    assert hcm_loss(w, m) > 0.0


def test_hcm_loss_nonnegative_random(rng):
    for _ in range(50):
        w = rng.uniform(0.0, 2.0, (3, 5))
        m = rng.uniform(0.0, 2.0, (3, 5))
        assert hcm_loss(w, m) >= 0.0


def test_hcm_loss_two_entry_hand_value():
    # single row: target (0, 1), observed (1, 0), floored by eps
    eps = EPS_KL
    m_hat = np.array([0.0 + eps, 1.0 + eps])
    m_hat = m_hat / m_hat.sum()
    w_hat = np.array([1.0 + eps, 0.0 + eps])
    w_hat = w_hat / w_hat.sum()
    expected = (m_hat[0] * math.log(m_hat[0] / w_hat[0])
                + m_hat[1] * math.log(m_hat[1] / w_hat[1]))
    got = hcm_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    assert abs(got - expected) < 1e-12


def test_hcm_loss_shape_mismatch():
    with pytest.raises(ValueError):
        hcm_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_hcm_loss_range_validation():
    with pytest.raises(ValueError):
        hcm_loss(np.full((1, 2), 2.5), np.zeros((1, 2)))


def test_hcm_gradients_match_fd(rng):
    n, d = 4, 3
    q0 = rng.normal(size=(n, d))
    k0 = rng.normal(size=(n, d))
    labels = make_labels([0, 1, 2, 3], [0, 0, 1, -1], [0, 0, 0, 1])
    target = target_matrix(labels, labels, TargetDistances())
    alpha = 800.0

    def loss_of(q_arr, k_arr):
        return alpha * hcm_loss(distance_matrix(q_arr, k_arr), target)

    q = ad.Tensor(q0, requires_grad=True)
    k = ad.Tensor(k0, requires_grad=True)
    total = alpha * hcm_loss(distance_matrix(q, k), target)
    total.backward()
    fd_q = fd_gradient(lambda arr: loss_of(arr, k0), q0.copy(), h=1e-6)
    fd_k = fd_gradient(lambda arr: loss_of(q0, arr), k0.copy(), h=1e-6)
    for an, fd in ((q.grad, fd_q), (k.grad, fd_k)):
        rel = np.abs(an - fd) / np.maximum(np.abs(fd), 1e-5)
        assert rel.max() < 1e-4


# -- total loss -----------------------------------------------------------------------


def test_total_loss_alpha_zero_is_exactly_cls():
    assert total_loss(1.2345, 0.777, 0.0) == 1.2345


def test_total_loss_arithmetic():
    assert total_loss(1.0, 0.01, 800.0) == 9.0


def test_total_loss_rejects_negative_alpha():
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, -1.0)


# -- stratum means ---------------------------------------------------------------------


def test_stratum_means_absent_when_empty():
    w = np.full((2, 2), 0.3)
    labels = make_labels([0, 1], [-1, -1], [0, 1])
    d1_mean, d2_mean = batch_stratum_means(w, labels, labels)
    assert d1_mean is None and d2_mean is None


def test_stratum_means_constant_stratum():
    w = np.full((3, 3), 0.4)
    labels = make_labels([0, 1, 2], [0, 1, 2], [0, 0, 0])
    d1_mean, d2_mean = batch_stratum_means(w, labels, labels)
    assert d1_mean is None and abs(d2_mean - 0.4) < 1e-14


def test_stratum_means_brute_force(rng):
    n = 4
    w = rng.uniform(0.0, 2.0, (n, n))
    instance = [0, 1, 2, 0]
    fine = [0, 0, 1, -1]
    coarse = [0, 0, 0, 1]
    labels = make_labels(instance, fine, coarse)
    got1, got2 = batch_stratum_means(w, labels, labels)
    bucket1, bucket2 = [], []
    for i in range(n):
        for j in range(n):
            if instance[i] == instance[j]:
                continue
            if coarse[i] == coarse[j] and fine[i] >= 0 and fine[i] == fine[j]:
                bucket1.append(w[i, j])
            elif coarse[i] == coarse[j]:
                bucket2.append(w[i, j])
    assert abs(got1 - np.mean(bucket1)) < 1e-12
    assert abs(got2 - np.mean(bucket2)) < 1e-12


# -- target distance state ----------------------------------------------------------------


def test_targets_initial_ladder():
    t = TargetDistances()
    assert t.ladder() == (0.0, 0.134, 0.5, 1.0)


def test_targets_momentum_update_value():
    t = TargetDistances(d1=0.5)
    t.momentum_update(d1_mean=0.3)
    assert abs(t.d1 - 0.4998) < 1e-12


def test_targets_absent_mean_leaves_value():
    t = TargetDistances()
    t.momentum_update(d1_mean=None, d2_mean=0.4)
    assert t.d1 == 0.134 and t.d2 != 0.5


def test_targets_contraction_identity():
    # exact on dyadic values, 1-ulp tight on the default beta
    t = TargetDistances(d1=0.75, d2=0.5, beta=0.5)
    t.momentum_update(d1_mean=0.25, d2_mean=0.25)
    assert abs(t.d1 - 0.25) == 0.5 * abs(0.75 - 0.25)
    t = TargetDistances()
    before = t.d1
    t.momentum_update(d1_mean=0.3)
    assert abs(abs(t.d1 - 0.3) - t.beta * abs(before - 0.3)) < 1e-15


def test_targets_reinitialize():
    t = TargetDistances(d1=0.9, d2=0.1)
    t.reinitialize()
    assert (t.d1, t.d2) == (0.134, 0.5)


def test_targets_validate_beta():
    with pytest.raises(ValueError):
        TargetDistances(beta=1.0)
    with pytest.raises(ValueError):
        TargetDistances(beta=0.0)
