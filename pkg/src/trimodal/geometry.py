"""Distance geometry: pairwise blocks, the hard-mined identity distance
matrix, and the per-identity positive-pair query matrices.

The identity distance matrix D is P x P.  Cell (i, j) aggregates the
N x N instance distances between identity i under one modality and
identity j under the other: the mean of the k largest distances on the
diagonal (hardest positives) and of the k smallest off it (hardest
negatives).  Selected instance pairs are recorded so losses can route
gradients through exactly the pairs that produced each cell.

Ties in the top-k selection break toward the lowest flat index
(p_local * N + q_local), and k is clamped to N^2.  Distances are true
Euclidean norms; the gradient at exactly zero distance is defined as
the zero vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import accel

MODE_HARDEST_POSITIVE = "hardest-positive"
MODE_HARDEST_NEGATIVE = "hardest-negative"


@dataclass
class PairwiseBlock:
    """Instance-level distances between two feature sets, with the row
    mapping back to batch rows and references to the feature arrays
    (needed to turn cell gradients into feature gradients)."""

    dist: np.ndarray
    feat_a: np.ndarray
    feat_b: np.ndarray
    rows_a: np.ndarray
    rows_b: np.ndarray


@dataclass
class IdDistanceMatrix:
    """Top-k aggregated identity distance matrix plus gradient routing data.

    ``sel_rows``/``sel_cols`` have shape (P, P, k_eff) and hold, per cell,
    the block coordinates of the selected instance pairs.
    """

    d: np.ndarray
    k: int
    k_eff: int
    sel_rows: np.ndarray
    sel_cols: np.ndarray
    block: PairwiseBlock
    ids: np.ndarray
    groups: np.ndarray

    @property
    def p(self) -> int:
        return self.d.shape[0]

    @property
    def n(self) -> int:
        return self.groups.shape[1]


@dataclass
class QueryMatrixSet:
    """Per-identity N x N positive-pair distance matrices.

    ``e`` maps each ordered modality pair key ("vg", "gi", "vi", "ig",
    "gv", "iv") to a (P, N, N) stack; reversed keys are exact transposes
    of their mirrors.  ``blocks`` holds the three underlying full
    pairwise blocks keyed "vi", "vg", "ig" for gradient routing.
    """

    e: dict[str, np.ndarray]
    ids: np.ndarray
    groups: np.ndarray
    blocks: dict[str, PairwiseBlock]


def pairwise_euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix between rows of ``a`` (n x d) and ``b`` (m x d)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("inputs must be 2-D feature matrices")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimensions disagree: {a.shape[1]} vs {b.shape[1]}")
    return accel.pairwise_dist(a, b)


def topk_aggregate(values, k: int, mode: str) -> float:
    """Mean of the k largest (hardest-positive) or smallest
    (hardest-negative) values; k is clamped to the value count and ties
    break toward the lowest index."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("topk_aggregate needs at least one value")
    if k < 1:
        raise ValueError("k must be >= 1")
    if mode == MODE_HARDEST_POSITIVE:
        order = np.argsort(-v, kind="stable")
    elif mode == MODE_HARDEST_NEGATIVE:
        order = np.argsort(v, kind="stable")
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return float(v[order[: min(k, v.size)]].mean())


def group_rows(labels) -> tuple[np.ndarray, np.ndarray]:
    """Identities in first-appearance order and their row indices (P, N).

    Rejects ragged groups: every identity must appear the same number of
    times.
    """
    labels = np.asarray(labels)
    ids_sorted, first_pos, counts = np.unique(labels, return_index=True, return_counts=True)
    if counts.min() != counts.max():
        raise ValueError("ragged identity groups: every identity needs the same instance count")
    order = np.argsort(first_pos, kind="stable")
    ids = ids_sorted[order]
    n = int(counts[0])
    groups = np.empty((len(ids), n), dtype=np.intp)
    for row, ident in enumerate(ids):
        groups[row] = np.flatnonzero(labels == ident)
    return ids, groups


def full_block(feat_a: np.ndarray, feat_b: np.ndarray) -> PairwiseBlock:
    """Pairwise block covering all rows of two aligned feature matrices."""
    dist = pairwise_euclidean(feat_a, feat_b)
    return PairwiseBlock(
        dist=dist,
        feat_a=np.asarray(feat_a, dtype=np.float64),
        feat_b=np.asarray(feat_b, dtype=np.float64),
        rows_a=np.arange(feat_a.shape[0], dtype=np.intp),
        rows_b=np.arange(feat_b.shape[0], dtype=np.intp),
    )


def id_distance_matrix(
    feat_m1: np.ndarray,
    feat_m2: np.ndarray,
    labels,
    k: int,
    block: PairwiseBlock | None = None,
) -> IdDistanceMatrix:
    """Top-k identity distance matrix between two modalities.

    Both feature matrices share ``labels`` (P identities x N instances in
    identical row positions).  ``block`` lets callers reuse an already
    computed pairwise block.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    feat_m1 = np.asarray(feat_m1, dtype=np.float64)
    feat_m2 = np.asarray(feat_m2, dtype=np.float64)
    if feat_m1.shape != feat_m2.shape:
        raise ValueError("feature matrices must have identical shape")
    ids, groups = group_rows(labels)
    p, n = groups.shape
    if block is None:
        block = full_block(feat_m1, feat_m2)

    k_eff = min(k, n * n)
    d = np.zeros((p, p))
    sel_rows = np.empty((p, p, k_eff), dtype=np.intp)
    sel_cols = np.empty((p, p, k_eff), dtype=np.intp)
    for i in range(p):
        ri = groups[i]
        for j in range(p):
            rj = groups[j]
            sub = block.dist[np.ix_(ri, rj)].ravel()
            if i == j:
                order = np.argsort(-sub, kind="stable")[:k_eff]
            else:
                order = np.argsort(sub, kind="stable")[:k_eff]
            d[i, j] = sub[order].mean()
            sel_rows[i, j] = ri[order // n]
            sel_cols[i, j] = rj[order % n]
    return IdDistanceMatrix(d, k, k_eff, sel_rows, sel_cols, block, ids, groups)


def distance_matrix_feature_grads(
    idm: IdDistanceMatrix, dl_dd: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Feature gradients for a loss with cell gradients ``dl_dd`` (P x P).

    Routes each cell's gradient through its recorded top-k instance pairs
    and expands the per-pair distance gradients to the two feature sets.
    """
    w = np.zeros_like(idm.block.dist)
    np.add.at(w, (idm.sel_rows, idm.sel_cols), (dl_dd / idm.k_eff)[:, :, None])
    return accel.weighted_dist_grad(idm.block.feat_a, idm.block.feat_b, idm.block.dist, w)


def positive_query_matrices(batch, blocks: dict[str, PairwiseBlock] | None = None) -> QueryMatrixSet:
    """The six per-identity positive-pair query matrices of a batch.

    Reuses the three cross-modal pairwise blocks when provided (they are
    the same blocks the identity distance matrices are built from), and
    materializes reversed keys as transposed views of the forward ones.
    """
    ids, groups = group_rows(batch.labels)
    p, n = groups.shape
    if blocks is None:
        blocks = {
            "vi": full_block(batch.v, batch.i),
            "vg": full_block(batch.v, batch.g),
            "ig": full_block(batch.i, batch.g),
        }
    e = {key: np.empty((p, n, n)) for key in ("vi", "vg", "ig")}
    for idx in range(p):
        r = groups[idx]
        for key in ("vi", "vg", "ig"):
            e[key][idx] = blocks[key].dist[np.ix_(r, r)]
    e["iv"] = e["vi"].transpose(0, 2, 1)
    e["gv"] = e["vg"].transpose(0, 2, 1)
    e["gi"] = e["ig"].transpose(0, 2, 1)
    return QueryMatrixSet(e=e, ids=ids, groups=groups, blocks=blocks)
