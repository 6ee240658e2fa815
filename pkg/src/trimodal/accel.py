"""Hot numeric kernels, with numba-jitted and pure-numpy twins.

The jitted path is the default whenever numba imports cleanly; setting
the environment variable ``TRIMODAL_NO_NUMBA`` to anything other than
``0`` forces the numpy path.  ``set_backend`` switches at runtime (used
by the benchmark and the backend-equivalence tests).

Both paths implement identical arithmetic contracts: distances use the
direct squared-difference form (an entry is exactly 0 iff the two rows
are equal, and the radicand is never negative), and the distance
gradient uses the zero subgradient at zero distance.  Last-ulp float
results may differ between backends; all callers compare with
tolerances.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
    HAVE_NUMBA = False


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------


def _pairwise_dist_np(a, b):
    diff = a[:, None, :] - b[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    return np.sqrt(np.maximum(sq, 0.0))


def _weighted_dist_grad_np(a, b, dist, w):
    r = np.divide(w, dist, out=np.zeros_like(w), where=dist > 0.0)
    ga = a * r.sum(axis=1)[:, None] - r @ b
    gb = b * r.sum(axis=0)[:, None] - r.T @ a
    return ga, gb


def _rank_stats_np(hits):
    q, g = hits.shape
    hitsf = hits.astype(np.float64)
    cum = np.cumsum(hitsf, axis=1)
    first = np.argmax(hits, axis=1).astype(np.int64)
    prec = cum / np.arange(1, g + 1, dtype=np.float64)
    npos = cum[:, -1]
    ap = (prec * hitsf).sum(axis=1) / np.maximum(npos, 1.0)
    return first, ap


def _jaccard_dist_np(vq, vg):
    out = np.empty((vq.shape[0], vg.shape[0]))
    for i in range(vq.shape[0]):
        mins = np.minimum(vq[i], vg).sum(axis=1)
        out[i] = 1.0 - mins / (2.0 - mins)
    return out


# --------------------------------------------------------------------------
# numba twins
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _pairwise_dist_nb(a, b):
        n, d = a.shape
        m = b.shape[0]
        out = np.empty((n, m))
        for i in range(n):
            for j in range(m):
                s = 0.0
                for t in range(d):
                    x = a[i, t] - b[j, t]
                    s += x * x
                out[i, j] = np.sqrt(s)
        return out

    @njit(cache=True)
    def _weighted_dist_grad_nb(a, b, dist, w):
        n, d = a.shape
        m = b.shape[0]
        ga = np.zeros((n, d))
        gb = np.zeros((m, d))
        for i in range(n):
            for j in range(m):
                if w[i, j] != 0.0 and dist[i, j] > 0.0:
                    r = w[i, j] / dist[i, j]
                    for t in range(d):
                        diff = r * (a[i, t] - b[j, t])
                        ga[i, t] += diff
                        gb[j, t] -= diff
        return ga, gb

    @njit(cache=True)
    def _rank_stats_nb(hits):
        q, g = hits.shape
        first = np.zeros(q, dtype=np.int64)
        ap = np.zeros(q)
        for i in range(q):
            npos = 0
            psum = 0.0
            seen = False
            for j in range(g):
                if hits[i, j]:
                    if not seen:
                        first[i] = j
                        seen = True
                    npos += 1
                    psum += npos / (j + 1.0)
            if npos > 0:
                ap[i] = psum / npos
        return first, ap

    @njit(cache=True)
    def _jaccard_dist_nb(vq, vg):
        nq, n = vq.shape
        ng = vg.shape[0]
        out = np.empty((nq, ng))
        for i in range(nq):
            for j in range(ng):
                s = 0.0
                for t in range(n):
                    s += min(vq[i, t], vg[j, t])
                out[i, j] = 1.0 - s / (2.0 - s)
        return out


_BACKENDS = {
    "numpy": {
        "pairwise_dist": _pairwise_dist_np,
        "weighted_dist_grad": _weighted_dist_grad_np,
        "rank_stats": _rank_stats_np,
        "jaccard_dist": _jaccard_dist_np,
    }
}
if HAVE_NUMBA:
    _BACKENDS["numba"] = {
        "pairwise_dist": _pairwise_dist_nb,
        "weighted_dist_grad": _weighted_dist_grad_nb,
        "rank_stats": _rank_stats_nb,
        "jaccard_dist": _jaccard_dist_nb,
    }


def _default_backend() -> str:
    if not HAVE_NUMBA:
        return "numpy"
    if os.environ.get("TRIMODAL_NO_NUMBA", "0") not in ("", "0"):
        return "numpy"
    return "numba"


_active_name = _default_backend()
_active = _BACKENDS[_active_name]


def backend() -> str:
    """Name of the active kernel backend ("numba" or "numpy")."""
    return _active_name


def set_backend(name: str) -> None:
    """Switch the kernel backend at runtime."""
    global _active_name, _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {sorted(_BACKENDS)}")
    _active_name = name
    _active = _BACKENDS[name]


def _as_f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def pairwise_dist(a, b):
    """Euclidean distances between all rows of ``a`` and ``b``."""
    return _active["pairwise_dist"](_as_f64(a), _as_f64(b))


def weighted_dist_grad(a, b, dist, w):
    """Gradients of sum_{ij} w_ij * ||a_i - b_j|| with respect to a and b.

    ``dist`` must be the pairwise distance matrix of (a, b); entries with
    zero distance contribute the zero subgradient.
    """
    return _active["weighted_dist_grad"](_as_f64(a), _as_f64(b), _as_f64(dist), _as_f64(w))


def rank_stats(hits):
    """Per-query first-hit position and average precision.

    ``hits`` is a boolean query x gallery matrix already sorted per row by
    ascending distance.  Queries without any hit get ap 0 and first 0; the
    caller is responsible for masking those out.
    """
    hits = np.ascontiguousarray(hits, dtype=np.bool_)
    return _active["rank_stats"](hits)


def jaccard_dist(vq, vg):
    """Jaccard distance 1 - |min|/|max| between rows of two weight matrices.

    Rows must be nonnegative and sum to 1, so sum(max) = 2 - sum(min).
    """
    return _active["jaccard_dist"](_as_f64(vq), _as_f64(vg))
