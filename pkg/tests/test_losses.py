"""Tests for every loss term: hand oracles, degenerate cases, analytic
gradients against central finite differences, and the composition
contracts of the total loss."""

import math

import numpy as np
import pytest

from trimodal.batching import EmbeddingBatch
from trimodal.geometry import id_distance_matrix, positive_query_matrices
from trimodal.gradcheck import central_diff, make_problem, rel_error
from trimodal.losses import (
    CenterBank,
    ClassifierSet,
    LossWeights,
    center_loss,
    contrastive_loss,
    identity_loss,
    negative_loss,
    normalize_features,
    pair_contrast_loss,
    positive_loss,
    query_alignment_loss,
    total_loss,
)

TOL = 1e-4


def single_instance_idm(v_rows, w_rows, k=1):
    v = np.asarray(v_rows, dtype=float)
    w = np.asarray(w_rows, dtype=float)
    labels = np.arange(len(v))
    return id_distance_matrix(v, w, labels, k=k)


class TestPositiveLoss:
    def test_zero_diagonal(self):
        f = np.array([[1.0], [5.0]])
        idm = single_instance_idm(f, f)
        value, _, _ = positive_loss(idm)
        assert value == 0.0

    def test_arithmetic_mean_of_diagonal(self):
        idm = single_instance_idm([[0.0], [0.0]], [[1.0], [3.0]])
        assert idm.d[0, 0] == 1.0 and idm.d[1, 1] == 3.0
        value, _, _ = positive_loss(idm)
        assert value == 2.0

    def test_gradient_matches_finite_differences(self):
        problem = make_problem(0, p=3, n=2)
        batch, k = problem.batch, problem.k
        _, ga, gb = positive_loss(id_distance_matrix(batch.v, batch.i, batch.labels, k))
        f = lambda: positive_loss(id_distance_matrix(batch.v, batch.i, batch.labels, k))[0]
        fd = central_diff(f, [batch.v, batch.i])
        assert rel_error([ga, gb], fd) <= TOL


class TestNegativeLoss:
    def test_unit_off_diagonal(self):
        idm = single_instance_idm([[0.0], [1.0]], [[0.0], [1.0]])
        value, _, _ = negative_loss(idm, epsilon=0.0)
        assert value == 1.0

    def test_vanishes_for_distant_identities(self):
        idm = single_instance_idm([[0.0], [1e6]], [[0.0], [1e6]])
        value, _, _ = negative_loss(idm, epsilon=0.0)
        assert value < 1e-5

    def test_single_identity_rejected(self):
        idm = single_instance_idm([[0.0]], [[1.0]])
        with pytest.raises(ValueError, match="two identities"):
            negative_loss(idm, epsilon=1e-6)

    def test_gradient_matches_finite_differences(self):
        problem = make_problem(1, p=3, n=2)
        batch, k = problem.batch, problem.k
        eps = 1e-6
        _, ga, gb = negative_loss(id_distance_matrix(batch.v, batch.i, batch.labels, k), eps)
        f = lambda: negative_loss(id_distance_matrix(batch.v, batch.i, batch.labels, k), eps)[0]
        fd = central_diff(f, [batch.v, batch.i])
        assert rel_error([ga, gb], fd) <= TOL


class TestPairContrastLoss:
    def test_default_weights(self):
        w = LossWeights()
        assert (w.lambda1, w.lambda2) == (1.0, 0.1)
        assert (w.alpha, w.beta, w.gamma) == (1.0, 0.005, 1.0)

    def test_zero_weights_annihilate(self):
        idm = single_instance_idm([[0.0], [1.0]], [[0.5], [2.0]])
        w = LossWeights(lambda1=0.0, lambda2=0.0)
        value, ga, gb = pair_contrast_loss(idm, w)
        assert value == 0.0
        assert np.all(ga == 0.0) and np.all(gb == 0.0)

    def test_positive_only_with_zero_diagonal(self):
        f = np.array([[0.0], [1.0]])
        idm = single_instance_idm(f, f)
        value, _, _ = pair_contrast_loss(idm, LossWeights(lambda1=1.0, lambda2=0.0))
        assert value == 0.0


class TestContrastiveLoss:
    def test_equal_modalities_reduce_to_negative_terms(self):
        # One instance per identity and v = g = i: every positive cell is a
        # self-distance (zero), so only the lambda2-scaled negative terms
        # survive, identically in each of the three averaged pairs.
        rng = np.random.default_rng(0)
        f = rng.standard_normal((3, 4))
        labels = np.arange(3)
        batch = EmbeddingBatch(v=f, g=f.copy(), i=f.copy(), labels=labels)
        w = LossWeights()
        res = contrastive_loss(batch, k=1, weights=w)
        single = pair_contrast_loss(id_distance_matrix(f, f, labels, 1), w)[0]
        assert res.value == pytest.approx(single, abs=1e-12)
        pos_only = pair_contrast_loss(
            id_distance_matrix(f, f, labels, 1), LossWeights(lambda2=0.0)
        )[0]
        assert pos_only == 0.0
        neg_only = pair_contrast_loss(
            id_distance_matrix(f, f, labels, 1), LossWeights(lambda1=0.0)
        )[0]
        assert res.value == pytest.approx(neg_only, abs=1e-12)

    def test_three_equal_components_average_to_component(self):
        # With identical features in all modalities the three pair losses
        # are equal, so their mean equals any one of them.
        rng = np.random.default_rng(4)
        f = rng.standard_normal((6, 4))
        labels = np.repeat([0, 1], 3)
        batch = EmbeddingBatch(v=f, g=f.copy(), i=f.copy(), labels=labels)
        w = LossWeights()
        res = contrastive_loss(batch, k=2, weights=w)
        component = pair_contrast_loss(id_distance_matrix(f, f, labels, 2), w)[0]
        assert res.value == pytest.approx(component, abs=1e-12)

    def test_gradients_match_finite_differences(self):
        problem = make_problem(2, p=3, n=2)
        batch, k, w = problem.batch, problem.k, problem.weights
        res = contrastive_loss(batch, k, w)
        f = lambda: contrastive_loss(batch, k, w).value
        fd = central_diff(f, [batch.v, batch.g, batch.i])
        assert rel_error([res.g_v, res.g_g, res.g_i], fd) <= TOL


class TestCenterLoss:
    def test_zero_when_features_equal_centers(self):
        bank = CenterBank(ids=np.array([0, 1]), centers=np.array([[1.0, 0.0], [0.0, 2.0]]))
        feats = bank.centers.copy()
        value, g_f, g_c = center_loss(feats, np.array([0, 1]), bank)
        assert value == 0.0
        assert np.all(g_f == 0.0) and np.all(g_c == 0.0)

    def test_single_feature_arithmetic(self):
        bank = CenterBank(ids=np.array([5]), centers=np.array([[1.0]]))
        value, _, _ = center_loss(np.array([[0.0]]), np.array([5]), bank)
        assert value == 1.0

    def test_missing_center_rejected(self):
        bank = CenterBank(ids=np.array([0]), centers=np.zeros((1, 2)))
        with pytest.raises(ValueError, match="no center for identity 3"):
            center_loss(np.zeros((1, 2)), np.array([3]), bank)

    def test_gradients_match_finite_differences(self):
        problem = make_problem(3)
        batch, bank = problem.batch, problem.bank
        stacked = np.vstack([batch.v, batch.g, batch.i])
        labels3 = np.concatenate([batch.labels] * 3)
        _, g_f, g_c = center_loss(stacked, labels3, bank)
        f = lambda: center_loss(stacked, labels3, bank)[0]
        fd = central_diff(f, [stacked, bank.centers])
        assert rel_error([g_f, g_c], fd) <= TOL


class TestQueryAlignmentLoss:
    def make_batch(self, v, g, i, reps):
        labels = np.repeat(np.arange(len(v) // reps), reps)
        return EmbeddingBatch(
            v=np.asarray(v, float), g=np.asarray(g, float), i=np.asarray(i, float), labels=labels
        )

    def test_identical_modalities_give_zero(self):
        rng = np.random.default_rng(1)
        f = rng.standard_normal((4, 3))
        batch = self.make_batch(f, f.copy(), f.copy(), reps=2)
        res = query_alignment_loss(positive_query_matrices(batch))
        assert res.value == 0.0

    def test_transition_equals_infrared_zeroes_two_pairs(self):
        rng = np.random.default_rng(2)
        v = rng.standard_normal((4, 3))
        i = rng.standard_normal((4, 3))
        batch = self.make_batch(v, i.copy(), i, reps=2)
        res = query_alignment_loss(positive_query_matrices(batch))
        assert res.pair_values["vg,vi"] == 0.0
        assert res.pair_values["gv,iv"] == 0.0

    def test_handcrafted_value(self):
        # One identity, two instances, 1-D features; row sums worked out
        # by hand give (6 + 2.5 + 0.5 + 6) / 4.
        batch = self.make_batch([[0.0], [4.0]], [[1.0], [2.5]], [[5.0], [9.0]], reps=2)
        res = query_alignment_loss(positive_query_matrices(batch))
        assert res.value == pytest.approx(3.75, abs=1e-12)

    def test_handcrafted_gradients(self):
        batch = self.make_batch([[0.0], [4.0]], [[1.0], [2.5]], [[5.0], [9.0]], reps=2)
        res = query_alignment_loss(positive_query_matrices(batch))
        f = lambda: query_alignment_loss(positive_query_matrices(batch)).value
        fd = central_diff(f, [batch.v, batch.g, batch.i])
        assert rel_error([res.g_v, res.g_g, res.g_i], fd) <= TOL

    def test_gradients_match_finite_differences(self):
        problem = make_problem(4)
        batch = problem.batch
        res = query_alignment_loss(positive_query_matrices(batch))
        f = lambda: query_alignment_loss(positive_query_matrices(batch)).value
        fd = central_diff(f, [batch.v, batch.g, batch.i])
        assert rel_error([res.g_v, res.g_g, res.g_i], fd) <= TOL


def make_classifiers(ids, feat_dim, seed=0, **kwargs):
    return ClassifierSet.initialize(ids, feat_dim, np.random.default_rng(seed), **kwargs)


class TestNormalizeFeatures:
    def test_constant_column_maps_to_bias(self):
        cls = make_classifiers([0, 1], 3)
        cls.bn_beta = np.array([0.5, -1.0, 2.0])
        f = np.full((4, 3), 7.0)
        x_v, x_i, _ = normalize_features(f[:2], f[2:], cls, training=True)
        np.testing.assert_allclose(np.vstack([x_v, x_i]), np.tile(cls.bn_beta, (4, 1)), atol=1e-12)

    def test_normalized_statistics(self):
        cls = make_classifiers([0, 1], 4)
        rng = np.random.default_rng(3)
        f_v = rng.standard_normal((8, 4)) * 3 + 1
        f_i = rng.standard_normal((8, 4)) * 0.5 - 2
        x_v, x_i, _ = normalize_features(f_v, f_i, cls, training=True)
        x = np.vstack([x_v, x_i])
        np.testing.assert_allclose(x.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(x.var(axis=0), 1.0, atol=1e-3)

    def test_eval_mode_closed_form(self):
        cls = make_classifiers([0, 1], 2)
        cls.bn_mean = np.array([1.0, -2.0])
        cls.bn_var = np.array([4.0, 0.25])
        cls.bn_gamma = np.array([2.0, 3.0])
        cls.bn_beta = np.array([0.1, 0.2])
        rng = np.random.default_rng(4)
        f_v, f_i = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
        x_v, x_i, _ = normalize_features(f_v, f_i, cls, training=False)
        scale = cls.bn_gamma / np.sqrt(cls.bn_var + cls.bn_eps)
        np.testing.assert_allclose(x_v, f_v * scale + (cls.bn_beta - cls.bn_mean * scale), atol=1e-12)
        np.testing.assert_allclose(x_i, f_i * scale + (cls.bn_beta - cls.bn_mean * scale), atol=1e-12)

    def test_running_stats_updated_only_in_training(self):
        cls = make_classifiers([0, 1], 2)
        rng = np.random.default_rng(5)
        f = rng.standard_normal((4, 2))
        _, _, cache = normalize_features(f[:2], f[2:], cls, training=False)
        assert np.array_equal(cache.new_mean, cls.bn_mean)
        _, _, cache = normalize_features(f[:2], f[2:], cls, training=True)
        assert not np.array_equal(cache.new_mean, cls.bn_mean)

    def test_single_row_training_batch_rejected(self):
        cls = make_classifiers([0], 2)
        with pytest.raises(ValueError, match="at least 2 rows"):
            normalize_features(np.zeros((1, 2)), np.zeros((0, 2)), cls, training=True)


def reference_identity_loss(x_v, x_i, labels, cls):
    """Loop-based independent oracle for the identity loss value."""

    def logsumexp(row):
        m = max(row)
        return m + math.log(sum(math.exp(v - m) for v in row))

    def ce_hard(logits, labs):
        return sum(logsumexp(row) - row[lab] for row, lab in zip(logits, labs)) / len(labs)

    def matmul(x, w):
        return [[sum(a * b for a, b in zip(row, col)) for col in w] for row in x]

    labels = list(labels)
    x_all = [list(r) for r in x_v] + [list(r) for r in x_i]
    w_sh = [list(c) for c in np.asarray(cls.w_shared)]
    w_v = [list(c) for c in np.asarray(cls.w_v)]
    w_i = [list(c) for c in np.asarray(cls.w_i)]
    value = ce_hard(matmul(x_all, w_sh), labels + labels)
    value += ce_hard(matmul([list(r) for r in x_v], w_v), labels)
    value += ce_hard(matmul([list(r) for r in x_i], w_i), labels)

    ema_v = (1 - cls.r) * cls.ema_v + cls.r * cls.w_v
    ema_i = (1 - cls.r) * cls.ema_i + cls.r * cls.w_i
    z = matmul([list(r) for r in x_v], w_v) + matmul([list(r) for r in x_i], w_i)
    zt = matmul([list(r) for r in x_v], [list(c) for c in ema_i]) + matmul(
        [list(r) for r in x_i], [list(c) for c in ema_v]
    )
    cons = 0.0
    for zrow, trow in zip(z, zt):
        lz = logsumexp(zrow)
        lt = logsumexp(trow)
        q = [math.exp(v - lt) for v in trow]
        cons += sum(qc * (lz - zc) for qc, zc in zip(q, zrow))
    return value + cons / len(z)


class TestIdentityLoss:
    def test_single_class_is_zero(self):
        cls = make_classifiers([0], 3)
        rng = np.random.default_rng(1)
        x_v, x_i = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        res = identity_loss(x_v, x_i, np.zeros(2, dtype=int), cls, update_state=False)
        assert res.value == 0.0
        assert np.all(res.gx_v == 0.0) and np.all(res.g_w_v == 0.0)

    def test_ema_update_rate(self):
        cls = make_classifiers([0, 1], 2)
        cls.w_v = np.ones_like(cls.w_v)
        cls.ema_v = np.zeros_like(cls.ema_v)
        identity_loss(
            np.zeros((2, 2)), np.zeros((2, 2)), np.array([0, 1]), cls, update_state=True
        )
        np.testing.assert_allclose(cls.ema_v, 0.2, atol=1e-15)

    def test_ema_not_committed_without_update(self):
        cls = make_classifiers([0, 1], 2)
        before = cls.ema_v.copy()
        identity_loss(
            np.ones((2, 2)), np.ones((2, 2)), np.array([0, 1]), cls, update_state=False
        )
        assert np.array_equal(cls.ema_v, before)

    def test_hand_oracle_two_class(self):
        cls = make_classifiers([0, 1], 2, seed=7)
        x_v = np.array([[1.0, 0.0], [0.0, 1.0]])
        x_i = np.array([[0.5, -0.5], [-1.0, 2.0]])
        labels = np.array([0, 1])
        expected = reference_identity_loss(x_v, x_i, labels, cls)
        res = identity_loss(x_v, x_i, labels, cls, update_state=False)
        assert res.value == pytest.approx(expected, abs=1e-10)

    def test_label_out_of_range_rejected(self):
        cls = make_classifiers([0, 1], 2)
        with pytest.raises(ValueError, match="classifier class"):
            identity_loss(np.zeros((1, 2)), np.zeros((1, 2)), np.array([9]), cls)

    def test_classifier_gradients_match_finite_differences(self):
        problem = make_problem(5)
        batch, cls = problem.batch, problem.cls
        base = identity_loss(batch.v, batch.i, batch.labels, cls, update_state=False)
        q0 = base.soft_target
        f = lambda: identity_loss(
            batch.v, batch.i, batch.labels, cls, update_state=False, soft_target=q0
        ).value
        fd = central_diff(f, [cls.w_shared, cls.w_v, cls.w_i])
        assert rel_error([base.g_w_shared, base.g_w_v, base.g_w_i], fd) <= TOL

    def test_same_modality_consistency_switch(self):
        cls_cross = make_classifiers([0, 1], 2, seed=3)
        cls_same = make_classifiers([0, 1], 2, seed=3, cross_consistency=False)
        cls_same.ema_v += 0.5  # make the two shadow assignments distinguishable
        cls_cross.ema_v += 0.5
        rng = np.random.default_rng(0)
        x_v, x_i = rng.standard_normal((2, 2)), rng.standard_normal((2, 2))
        labels = np.array([0, 1])
        a = identity_loss(x_v, x_i, labels, cls_cross, update_state=False).value
        b = identity_loss(x_v, x_i, labels, cls_same, update_state=False).value
        assert a != b


class TestTotalLoss:
    def test_weights_zero_equals_identity_alone(self):
        problem = make_problem(6)
        w0 = LossWeights(alpha=0.0, beta=0.0, gamma=0.0)
        report = total_loss(
            problem.batch, problem.bank, problem.cls, w0, problem.k, update_state=False
        )
        assert report.values["total"] == report.values["id"]

    def test_composition_of_separate_terms(self):
        problem = make_problem(7)
        batch, bank, cls, w, k = (
            problem.batch,
            problem.bank,
            problem.cls,
            problem.weights,
            problem.k,
        )
        report = total_loss(batch, bank, cls, w, k, update_state=False)
        x_v, x_i, _ = normalize_features(batch.v, batch.i, cls, training=True)
        v_id = identity_loss(x_v, x_i, batch.labels, cls, update_state=False).value
        v_con = contrastive_loss(batch, k, w).value
        stacked = np.vstack([batch.v, batch.g, batch.i])
        v_cen = center_loss(stacked, np.concatenate([batch.labels] * 3), bank)[0]
        v_qa = query_alignment_loss(positive_query_matrices(batch)).value
        expected = v_id + w.alpha * v_con + w.beta * v_cen + w.gamma * v_qa
        assert report.values["total"] == pytest.approx(expected, abs=1e-12)

    def test_feature_gradients_match_finite_differences(self):
        problem = make_problem(8)
        batch, bank, cls, w, k = (
            problem.batch,
            problem.bank,
            problem.cls,
            problem.weights,
            problem.k,
        )
        base = total_loss(batch, bank, cls, w, k, update_state=False)
        q0 = base.soft_target
        f = lambda: total_loss(
            batch, bank, cls, w, k, update_state=False, soft_target=q0
        ).values["total"]
        fd = central_diff(f, [batch.v, batch.g, batch.i])
        assert rel_error([base.g_v, base.g_g, base.g_i], fd) <= TOL

    def test_translation_equivariance(self):
        problem = make_problem(9)
        batch, w, k = problem.batch, problem.weights, problem.k
        shift = np.full(batch.v.shape[1], 3.7)
        shifted = EmbeddingBatch(
            v=batch.v + shift, g=batch.g + shift, i=batch.i + shift, labels=batch.labels
        )
        assert contrastive_loss(batch, k, w).value == pytest.approx(
            contrastive_loss(shifted, k, w).value, rel=1e-9
        )
        a = query_alignment_loss(positive_query_matrices(batch)).value
        b = query_alignment_loss(positive_query_matrices(shifted)).value
        assert a == pytest.approx(b, rel=1e-9)

    def test_zero_weight_equals_removed_term(self):
        problem = make_problem(10)
        w0 = LossWeights(alpha=0.0)
        on = total_loss(
            problem.batch, problem.bank, problem.cls, w0, problem.k,
            use_contrast=True, update_state=False,
        )
        off = total_loss(
            problem.batch, problem.bank, problem.cls, w0, problem.k,
            use_contrast=False, update_state=False,
        )
        assert on.values["total"] == off.values["total"]
        assert np.array_equal(on.g_v, off.g_v)
        assert np.array_equal(on.g_i, off.g_i)
        assert np.array_equal(on.g_g, off.g_g)

    def test_values_finite_and_nonnegative(self):
        for seed in range(5):
            problem = make_problem(20 + seed)
            report = total_loss(
                problem.batch, problem.bank, problem.cls, problem.weights, problem.k,
                update_state=False,
            )
            for name, value in report.values.items():
                assert np.isfinite(value), name
                assert value >= 0.0, name
