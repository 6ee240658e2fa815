"""Retrieval evaluation: CMC/mAP, k-reciprocal re-ranking, distance-gap
statistics, and a 2-D principal-component export.

Galleries are ranked by ascending Euclidean distance with ties broken by
gallery index.  Queries whose label is absent from the gallery are
skipped and counted.  The re-ranker follows the classic k-reciprocal
encoding recipe: reciprocal neighbor sets over the query+gallery union,
one-half-k expansion, Gaussian-weighted encoding vectors, local query
expansion with k2, Jaccard distance, and a convex blend of the original
and Jaccard distances controlled by ``lambda_rr``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import accel
from .geometry import pairwise_euclidean

DEFAULT_RANKS = (1, 5, 10, 20)


@dataclass
class RetrievalSet:
    """Query features/labels of one modality vs gallery of the other."""

    q_feats: np.ndarray
    q_labels: np.ndarray
    g_feats: np.ndarray
    g_labels: np.ndarray

    def __post_init__(self):
        self.q_labels = np.asarray(self.q_labels)
        self.g_labels = np.asarray(self.g_labels)
        if self.q_feats.shape[0] == 0 or self.g_feats.shape[0] == 0:
            raise ValueError("query and gallery must be nonempty")
        if self.q_feats.shape[0] != len(self.q_labels):
            raise ValueError("query labels must match query rows")
        if self.g_feats.shape[0] != len(self.g_labels):
            raise ValueError("gallery labels must match gallery rows")


@dataclass
class MetricsReport:
    """Retrieval metrics; serializes to a plain dict for JSON export."""

    ranks: dict[int, float]
    mean_ap: float
    n_query: int
    n_gallery: int
    n_skipped: int
    mean_pos: float | None = None
    mean_neg: float | None = None
    gap: float | None = None
    trials: int = 1

    def to_dict(self) -> dict:
        return {
            "ranks": {str(r): v for r, v in self.ranks.items()},
            "mean_ap": self.mean_ap,
            "n_query": self.n_query,
            "n_gallery": self.n_gallery,
            "n_skipped": self.n_skipped,
            "mean_pos": self.mean_pos,
            "mean_neg": self.mean_neg,
            "gap": self.gap,
            "trials": self.trials,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            ranks={int(r): v for r, v in d["ranks"].items()},
            mean_ap=d["mean_ap"],
            n_query=d["n_query"],
            n_gallery=d["n_gallery"],
            n_skipped=d["n_skipped"],
            mean_pos=d.get("mean_pos"),
            mean_neg=d.get("mean_neg"),
            gap=d.get("gap"),
            trials=d.get("trials", 1),
        )


def cmc_map(
    rs: RetrievalSet,
    distances: np.ndarray | None = None,
    ranks: tuple[int, ...] = DEFAULT_RANKS,
) -> MetricsReport:
    """Cumulative match characteristic and mean average precision.

    ``distances`` may carry a precomputed (or re-ranked) query x gallery
    matrix; otherwise Euclidean distances are used.
    """
    if distances is None:
        distances = pairwise_euclidean(rs.q_feats, rs.g_feats)
    elif distances.shape != (len(rs.q_labels), len(rs.g_labels)):
        raise ValueError("precomputed distance matrix has the wrong shape")
    order = np.argsort(distances, axis=1, kind="stable")
    hits = rs.g_labels[order] == rs.q_labels[:, None]
    valid = hits.any(axis=1)
    n_skipped = int((~valid).sum())
    if not valid.any():
        raise ValueError("no query label is present in the gallery")
    first, ap = accel.rank_stats(hits[valid])
    return MetricsReport(
        ranks={r: float((first < r).mean()) for r in ranks},
        mean_ap=float(ap.mean()),
        n_query=len(rs.q_labels),
        n_gallery=len(rs.g_labels),
        n_skipped=n_skipped,
    )


def distance_gap(rs: RetrievalSet) -> tuple[float, float, float]:
    """Mean same-label and different-label query-gallery distances and
    their gap (negative minus positive)."""
    dist = pairwise_euclidean(rs.q_feats, rs.g_feats)
    pos_mask = rs.q_labels[:, None] == rs.g_labels[None, :]
    if not pos_mask.any():
        raise ValueError("no positive query-gallery pair")
    if pos_mask.all():
        raise ValueError("no negative query-gallery pair")
    mean_pos = float(dist[pos_mask].mean())
    mean_neg = float(dist[~pos_mask].mean())
    return mean_pos, mean_neg, mean_neg - mean_pos


# --------------------------------------------------------------------------
# k-reciprocal re-ranking
# --------------------------------------------------------------------------


def _k_reciprocal(rank: np.ndarray, i: int, k: int) -> np.ndarray:
    forward = rank[i, : k + 1]
    backward = rank[forward, : k + 1]
    return forward[np.where(backward == i)[0]]


def k_reciprocal_rerank(
    q_feats: np.ndarray,
    g_feats: np.ndarray,
    k1: int = 20,
    k2: int = 6,
    lambda_rr: float = 0.3,
) -> np.ndarray:
    """Re-ranked query x gallery distance matrix.

    ``lambda_rr`` weights the original Euclidean distances against the
    Jaccard distances of the expanded reciprocal-neighbor encodings;
    lambda_rr=1 returns the original matrix unchanged.
    """
    if not k1 > k2 >= 1:
        raise ValueError("need k1 > k2 >= 1")
    n_g = g_feats.shape[0]
    if k1 >= n_g:
        raise ValueError(f"k1={k1} must be smaller than the gallery size {n_g}")
    if not 0.0 <= lambda_rr <= 1.0:
        raise ValueError("lambda_rr must be in [0, 1]")

    original = pairwise_euclidean(q_feats, g_feats)
    n_q = q_feats.shape[0]
    feats = np.vstack([q_feats, g_feats])
    n = feats.shape[0]

    union_sq = pairwise_euclidean(feats, feats) ** 2
    # Column-normalized distances, per the classic recipe; the transpose
    # makes rows index the probe side again.
    norm = (union_sq / np.maximum(union_sq.max(axis=0), 1e-12)).T
    rank = np.argsort(norm, axis=1, kind="stable")

    v = np.zeros((n, n))
    half_k = int(np.around(k1 / 2.0))
    for i in range(n):
        recip = _k_reciprocal(rank, i, k1)
        expansion = recip
        for cand in recip:
            cand_recip = _k_reciprocal(rank, cand, half_k)
            if len(np.intersect1d(cand_recip, recip)) > 2.0 / 3.0 * len(cand_recip):
                expansion = np.append(expansion, cand_recip)
        expansion = np.unique(expansion)
        wts = np.exp(-norm[i, expansion])
        v[i, expansion] = wts / wts.sum()
    if k2 > 1:
        v = v[rank[:, :k2]].mean(axis=1)

    jaccard = accel.jaccard_dist(v[:n_q], v[n_q:])
    return lambda_rr * original + (1.0 - lambda_rr) * jaccard


# --------------------------------------------------------------------------
# 2-D projection
# --------------------------------------------------------------------------


def pca2d(features: np.ndarray) -> np.ndarray:
    """Coordinates of each row in the top-2 principal components.

    Sign convention: each component's first nonzero loading is positive.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("pca2d needs at least two feature rows")
    centered = features - features.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if not (s > 1e-12).any():
        raise ValueError("input has rank 0: all rows identical")
    comps = vt[:2].copy()
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros((2 - comps.shape[0], comps.shape[1]))])
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if len(nz) and row[nz[0]] < 0:
            row *= -1.0
    return centered @ comps.T
