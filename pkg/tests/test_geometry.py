"""Tests for pairwise distances, top-k aggregation, the identity distance
matrix, and the positive-pair query matrices."""

import numpy as np
import pytest

from trimodal.batching import EmbeddingBatch
from trimodal.geometry import (
    MODE_HARDEST_NEGATIVE,
    MODE_HARDEST_POSITIVE,
    id_distance_matrix,
    pairwise_euclidean,
    positive_query_matrices,
    topk_aggregate,
)


def loop_distances(a, b):
    out = np.zeros((len(a), len(b)))
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i, j] = np.linalg.norm(x - y)
    return out


class TestPairwise:
    def test_zero_case(self):
        np.testing.assert_array_equal(
            pairwise_euclidean(np.array([[0.0, 0.0]]), np.array([[0.0, 0.0]])), [[0.0]]
        )

    def test_unit_basis(self):
        d = pairwise_euclidean(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
        np.testing.assert_allclose(d, [[np.sqrt(2.0)]], atol=1e-15)

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((2, 4))
        np.testing.assert_allclose(pairwise_euclidean(a, b), loop_distances(a, b), atol=1e-12)

    def test_exact_zero_iff_identical_rows(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((5, 3))
        d = pairwise_euclidean(a, a.copy())
        assert np.all(np.diag(d) == 0.0)
        off = d[~np.eye(5, dtype=bool)]
        assert np.all(off > 0.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimensions disagree"):
            pairwise_euclidean(np.zeros((2, 3)), np.zeros((2, 4)))


class TestTopkAggregate:
    def test_full_set_mean(self):
        assert topk_aggregate([1.0, 2.0, 3.0], 3, MODE_HARDEST_POSITIVE) == 2.0
        assert topk_aggregate([1.0, 2.0, 3.0], 3, MODE_HARDEST_NEGATIVE) == 2.0

    def test_hardest_positive_is_max(self):
        assert topk_aggregate([1.0, 2.0, 3.0], 1, MODE_HARDEST_POSITIVE) == 3.0

    def test_hardest_negative_mean_of_two_smallest(self):
        assert topk_aggregate([1.0, 2.0, 3.0], 2, MODE_HARDEST_NEGATIVE) == 1.5

    def test_k_larger_than_count_uses_all(self):
        assert topk_aggregate([2.0, 4.0], 10, MODE_HARDEST_POSITIVE) == 3.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            topk_aggregate([], 1, MODE_HARDEST_POSITIVE)


def brute_force_cell(dists, k, largest):
    flat = dists.ravel()
    order = np.argsort(-flat if largest else flat, kind="stable")
    return flat[order[: min(k, flat.size)]].mean()


class TestIdDistanceMatrix:
    def test_zero_diagonal_single_instance(self):
        rng = np.random.default_rng(0)
        f = rng.standard_normal((3, 4))
        labels = np.array([0, 1, 2])
        idm = id_distance_matrix(f, f, labels, k=1)
        np.testing.assert_array_equal(np.diag(idm.d), 0.0)

    def test_hand_set_hardest_pairs(self):
        # P=2, N=2 in 2-D; with k=1 each cell is the single hardest pair.
        v = np.array([[0.0, 0.0], [1.0, 0.0], [4.0, 0.0], [6.0, 0.0]])
        w = np.array([[0.0, 1.0], [2.0, 0.0], [5.0, 0.0], [4.0, 1.0]])
        labels = np.array([0, 0, 1, 1])
        idm = id_distance_matrix(v, w, labels, k=1)
        for i, rows_i in enumerate([(0, 1), (2, 3)]):
            for j, cols_j in enumerate([(0, 1), (2, 3)]):
                cell = loop_distances(v[list(rows_i)], w[list(cols_j)])
                assert idm.d[i, j] == pytest.approx(brute_force_cell(cell, 1, i == j), abs=1e-12)

    def test_enumeration_oracle_grid(self):
        rng = np.random.default_rng(8)
        for p in (2, 3):
            for n in (1, 2, 3):
                labels = np.repeat(np.arange(p), n)
                a = rng.standard_normal((p * n, 5))
                b = rng.standard_normal((p * n, 5))
                for k in range(1, n * n + 1):
                    idm = id_distance_matrix(a, b, labels, k=k)
                    full = loop_distances(a, b)
                    for i in range(p):
                        for j in range(p):
                            cell = full[np.ix_(np.where(labels == i)[0], np.where(labels == j)[0])]
                            expect = brute_force_cell(cell, k, i == j)
                            assert idm.d[i, j] == pytest.approx(expect, abs=1e-12)

    def test_k_equals_instance_count_default_setting(self):
        # k = N, the reference hyperparameter choice, is a valid clamp-free k.
        rng = np.random.default_rng(2)
        n = 4
        labels = np.repeat(np.arange(2), n)
        a = rng.standard_normal((2 * n, 3))
        idm = id_distance_matrix(a, a, labels, k=n)
        assert idm.k_eff == n

    def test_k_clamped_to_pair_count(self):
        rng = np.random.default_rng(2)
        labels = np.repeat(np.arange(2), 2)
        a = rng.standard_normal((4, 3))
        idm = id_distance_matrix(a, a, labels, k=100)
        assert idm.k_eff == 4

    def test_monotone_in_k(self):
        rng = np.random.default_rng(5)
        labels = np.repeat(np.arange(3), 3)
        a = rng.standard_normal((9, 4))
        b = rng.standard_normal((9, 4))
        prev = None
        off = ~np.eye(3, dtype=bool)
        for k in range(1, 10):
            d = id_distance_matrix(a, b, labels, k=k).d
            if prev is not None:
                assert np.all(d[off] >= prev[off] - 1e-12)
                assert np.all(np.diag(d) <= np.diag(prev) + 1e-12)
            prev = d

    def test_permutation_invariance(self):
        rng = np.random.default_rng(6)
        labels = np.repeat(np.arange(2), 3)
        a = rng.standard_normal((6, 4))
        b = rng.standard_normal((6, 4))
        d0 = id_distance_matrix(a, b, labels, k=2).d
        perm = np.array([1, 2, 0, 5, 3, 4])  # permute within identities
        d1 = id_distance_matrix(a[perm], b[perm], labels[perm], k=2).d
        np.testing.assert_allclose(d0, d1, atol=1e-12)

    def test_ragged_labels_rejected(self):
        with pytest.raises(ValueError, match="ragged"):
            id_distance_matrix(np.zeros((3, 2)), np.zeros((3, 2)), np.array([0, 0, 1]), k=1)


class TestQueryMatrices:
    def batch(self, v, g, i, labels):
        return EmbeddingBatch(v=v, g=g, i=i, labels=np.asarray(labels))

    def test_degenerate_equal_modalities(self):
        rng = np.random.default_rng(1)
        f = rng.standard_normal((4, 3))
        qms = positive_query_matrices(self.batch(f, f.copy(), f.copy(), [0, 0, 1, 1]))
        for ident in range(2):
            e = qms.e["vg"][ident]
            np.testing.assert_array_equal(np.diag(e), 0.0)
            np.testing.assert_allclose(e, e.T, atol=1e-12)

    def test_transpose_identity_exact(self):
        rng = np.random.default_rng(2)
        b = self.batch(
            rng.standard_normal((6, 4)),
            rng.standard_normal((6, 4)),
            rng.standard_normal((6, 4)),
            [0, 0, 0, 1, 1, 1],
        )
        qms = positive_query_matrices(b)
        for fwd, rev in (("vi", "iv"), ("vg", "gv"), ("ig", "gi")):
            assert np.array_equal(qms.e[fwd].transpose(0, 2, 1), qms.e[rev])

    def test_reuses_supplied_blocks(self):
        # The query matrices must be carved out of the blocks already
        # computed for the identity distance matrices, not recomputed.
        rng = np.random.default_rng(6)
        b = self.batch(
            rng.standard_normal((4, 3)),
            rng.standard_normal((4, 3)),
            rng.standard_normal((4, 3)),
            [0, 0, 1, 1],
        )
        from trimodal.geometry import full_block

        blocks = {
            "vi": full_block(b.v, b.i),
            "vg": full_block(b.v, b.g),
            "ig": full_block(b.i, b.g),
        }
        qms = positive_query_matrices(b, blocks=blocks)
        assert qms.blocks is blocks
        for ident, rows in ((0, [0, 1]), (1, [2, 3])):
            np.testing.assert_array_equal(
                qms.e["vi"][ident], blocks["vi"].dist[np.ix_(rows, rows)]
            )

    def test_restriction_oracle(self):
        rng = np.random.default_rng(3)
        v = rng.standard_normal((4, 5))
        g = rng.standard_normal((4, 5))
        i = rng.standard_normal((4, 5))
        labels = np.array([0, 0, 1, 1])
        qms = positive_query_matrices(self.batch(v, g, i, labels))
        for ident, rows in ((0, [0, 1]), (1, [2, 3])):
            np.testing.assert_allclose(
                qms.e["vi"][ident], loop_distances(v[rows], i[rows]), atol=1e-12
            )
            np.testing.assert_allclose(
                qms.e["ig"][ident], loop_distances(i[rows], g[rows]), atol=1e-12
            )
