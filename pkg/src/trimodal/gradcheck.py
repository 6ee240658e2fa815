"""Central finite-difference verification of every analytic gradient.

Each term is re-evaluated from scratch around the base point, so the
check covers the full computation including top-k selection.  Batches
are drawn until they sit at least ``margin`` away from the
non-differentiable sets (zero distances, top-k selection boundaries,
absolute-value kinks of the query alignment term, rectifier zeros), so
the h=1e-5 probes cannot cross a kink.

The soft target of the identity loss is a stop-gradient constant, so its
reference function pins the target at the base-point value; likewise the
EMA/batch-norm state updates are suppressed during probing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .batching import EmbeddingBatch
from .geometry import id_distance_matrix, positive_query_matrices
from .losses import (
    CenterBank,
    ClassifierSet,
    LossWeights,
    QUERY_PAIRS,
    center_loss,
    contrastive_loss,
    identity_loss,
    negative_loss,
    pair_contrast_loss,
    positive_loss,
    query_alignment_loss,
    total_loss,
)
from .model import EncoderParams, encode
from .seeding import stream

TERMS = (
    "positive",
    "negative",
    "pair_contrast",
    "contrastive",
    "center",
    "query_align",
    "identity",
    "total",
)

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4
DEFAULT_MARGIN = 1e-3


@dataclass
class TermCheck:
    term: str
    max_rel_err: float
    tolerance: float = DEFAULT_TOL

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def central_diff(f, arrays, h: float = DEFAULT_H):
    """Central-difference gradient of scalar ``f()`` in the entries of
    ``arrays`` (mutated in place during probing, restored after)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = f()
            flat[idx] = orig - h
            fm = f()
            flat[idx] = orig
            gflat[idx] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_error(analytic, numeric) -> float:
    """Max-norm relative disagreement across paired gradient arrays."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
        worst = max(worst, float(np.abs(a - n).max(initial=0.0)) / scale)
    return worst


# --------------------------------------------------------------------------
# random problems with kink margins
# --------------------------------------------------------------------------


@dataclass
class Problem:
    batch: EmbeddingBatch
    bank: CenterBank
    cls: ClassifierSet
    weights: LossWeights
    k: int


def _selection_margin(feats_a, feats_b, labels, k) -> float:
    """Smallest gap around the top-k selection boundary and to zero distance."""
    idm = id_distance_matrix(feats_a, feats_b, labels, k)
    margin = float(idm.block.dist.min())
    p, n = idm.groups.shape
    for i in range(p):
        for j in range(p):
            sub = np.sort(idm.block.dist[np.ix_(idm.groups[i], idm.groups[j])].ravel())
            if idm.k_eff < sub.size:
                if i == j:
                    boundary = sub[-idm.k_eff] - sub[-idm.k_eff - 1]
                else:
                    boundary = sub[idm.k_eff] - sub[idm.k_eff - 1]
                margin = min(margin, float(boundary))
    return margin


def _problem_margin(problem: Problem) -> float:
    batch, k = problem.batch, problem.k
    margin = min(
        _selection_margin(batch.v, batch.i, batch.labels, k),
        _selection_margin(batch.v, batch.g, batch.labels, k),
        _selection_margin(batch.i, batch.g, batch.labels, k),
    )
    qms = positive_query_matrices(batch)
    rowsums = {key: qms.e[key].sum(axis=2) for key in qms.e}
    for a, b in QUERY_PAIRS:
        margin = min(margin, float(np.abs(rowsums[a] - rowsums[b]).min()))
    stacked = np.vstack([batch.v, batch.g, batch.i])
    labels3 = np.concatenate([batch.labels] * 3)
    idx = problem.bank.index_of(labels3)
    dist = np.linalg.norm(stacked - problem.bank.centers[idx], axis=1)
    return min(margin, float(dist.min()))


def make_problem(
    seed: int,
    p: int = 4,
    n: int = 2,
    feat_dim: int = 8,
    k: int | None = None,
    margin: float = DEFAULT_MARGIN,
    max_tries: int = 50,
) -> Problem:
    """Seeded random batch/bank/classifier set at least ``margin`` away
    from every gradient kink (resampling with shifted seeds as needed)."""
    if k is None:
        k = n
    for attempt in range(max_tries):
        rng = stream(seed + 1000 * attempt, "gradcheck")
        labels = np.repeat(np.arange(p), n)
        batch = EmbeddingBatch(
            v=rng.standard_normal((p * n, feat_dim)),
            g=rng.standard_normal((p * n, feat_dim)),
            i=rng.standard_normal((p * n, feat_dim)),
            labels=labels,
        )
        bank = CenterBank.initialize(np.arange(p), feat_dim, rng)
        cls = ClassifierSet.initialize(np.arange(p), feat_dim, rng)
        problem = Problem(batch=batch, bank=bank, cls=cls, weights=LossWeights(), k=k)
        if _problem_margin(problem) >= margin:
            return problem
    raise RuntimeError(f"no kink-free problem found after {max_tries} tries")


# --------------------------------------------------------------------------
# per-term checks
# --------------------------------------------------------------------------


def _check_positive(problem: Problem):
    batch, k = problem.batch, problem.k
    value, ga, gb = positive_loss(id_distance_matrix(batch.v, batch.i, batch.labels, k))
    f = lambda: positive_loss(id_distance_matrix(batch.v, batch.i, batch.labels, k))[0]
    return [ga, gb], central_diff(f, [batch.v, batch.i])


def _check_negative(problem: Problem):
    batch, k, eps = problem.batch, problem.k, problem.weights.epsilon
    _, ga, gb = negative_loss(id_distance_matrix(batch.v, batch.i, batch.labels, k), eps)
    f = lambda: negative_loss(id_distance_matrix(batch.v, batch.i, batch.labels, k), eps)[0]
    return [ga, gb], central_diff(f, [batch.v, batch.i])


def _check_pair_contrast(problem: Problem):
    batch, k, w = problem.batch, problem.k, problem.weights
    _, ga, gb = pair_contrast_loss(id_distance_matrix(batch.v, batch.i, batch.labels, k), w)
    f = lambda: pair_contrast_loss(id_distance_matrix(batch.v, batch.i, batch.labels, k), w)[0]
    return [ga, gb], central_diff(f, [batch.v, batch.i])


def _check_contrastive(problem: Problem):
    batch, k, w = problem.batch, problem.k, problem.weights
    res = contrastive_loss(batch, k, w)
    f = lambda: contrastive_loss(batch, k, w).value
    return [res.g_v, res.g_g, res.g_i], central_diff(f, [batch.v, batch.g, batch.i])


def _check_center(problem: Problem):
    batch, bank = problem.batch, problem.bank
    stacked = np.vstack([batch.v, batch.g, batch.i])
    labels3 = np.concatenate([batch.labels] * 3)
    _, g_f, g_c = center_loss(stacked, labels3, bank)
    f = lambda: center_loss(stacked, labels3, bank)[0]
    return [g_f, g_c], central_diff(f, [stacked, bank.centers])


def _check_query_align(problem: Problem):
    batch = problem.batch
    res = query_alignment_loss(positive_query_matrices(batch))
    f = lambda: query_alignment_loss(positive_query_matrices(batch)).value
    return [res.g_v, res.g_g, res.g_i], central_diff(f, [batch.v, batch.g, batch.i])


def _check_identity(problem: Problem):
    batch, cls = problem.batch, problem.cls
    base = identity_loss(batch.v, batch.i, batch.labels, cls, update_state=False)
    q0 = base.soft_target
    f = lambda: identity_loss(
        batch.v, batch.i, batch.labels, cls, update_state=False, soft_target=q0
    ).value
    analytic = [base.gx_v, base.gx_i, base.g_w_shared, base.g_w_v, base.g_w_i]
    return analytic, central_diff(f, [batch.v, batch.i, cls.w_shared, cls.w_v, cls.w_i])


def _check_total(problem: Problem):
    batch, bank, cls, w, k = (
        problem.batch,
        problem.bank,
        problem.cls,
        problem.weights,
        problem.k,
    )
    base = total_loss(batch, bank, cls, w, k, update_state=False)
    q0 = base.soft_target
    f = lambda: total_loss(batch, bank, cls, w, k, update_state=False, soft_target=q0).values[
        "total"
    ]
    analytic = [
        base.g_v,
        base.g_g,
        base.g_i,
        base.g_centers,
        base.g_w_shared,
        base.g_w_v,
        base.g_w_i,
        base.g_bn_gamma,
        base.g_bn_beta,
    ]
    arrays = [
        batch.v,
        batch.g,
        batch.i,
        bank.centers,
        cls.w_shared,
        cls.w_v,
        cls.w_i,
        cls.bn_gamma,
        cls.bn_beta,
    ]
    return analytic, central_diff(f, arrays)


_CHECKS = {
    "positive": _check_positive,
    "negative": _check_negative,
    "pair_contrast": _check_pair_contrast,
    "contrastive": _check_contrastive,
    "center": _check_center,
    "query_align": _check_query_align,
    "identity": _check_identity,
    "total": _check_total,
}


def check_encoder(seed: int, margin: float = DEFAULT_MARGIN) -> float:
    """Finite-difference check of the encoder's backprop closure.

    Uses the scalar J = sum(features * R) for a fixed random R, so dJ/df
    is exactly R.  Resamples until rectifier pre-activations sit clear of
    zero.
    """
    for attempt in range(50):
        rng = stream(seed + 1000 * attempt, "gradcheck-encoder")
        params = EncoderParams.initialize(5, 7, 4, rng)
        obs = rng.standard_normal((6, 5))
        a1 = obs @ params.w1.T + params.b1
        if np.abs(a1).min() >= margin:
            break
    else:
        raise RuntimeError("no rectifier-safe encoder problem found")
    r = rng.standard_normal((6, 4))
    _, backprop = encode(params, obs, compute_grad=True)
    analytic_map = backprop(r)
    analytic = [analytic_map[k] for k in ("w1", "b1", "w2", "b2")]
    f = lambda: float((encode(params, obs) * r).sum())
    numeric = central_diff(f, [params.w1, params.b1, params.w2, params.b2])
    return rel_error(analytic, numeric)


def run_suite(
    n_batches: int = 20,
    base_seed: int = 0,
    tolerance: float = DEFAULT_TOL,
    corrupt_term: str | None = None,
    include_encoder: bool = True,
) -> list[TermCheck]:
    """Check every loss term (and the encoder) on seeded random batches.

    ``corrupt_term`` deliberately perturbs that term's analytic gradient
    (negative-control hook for the harness tests).
    """
    worst = {term: 0.0 for term in TERMS}
    for b in range(n_batches):
        problem = make_problem(base_seed + b)
        for term in TERMS:
            analytic, numeric = _CHECKS[term](problem)
            if corrupt_term == term:
                analytic = [a.copy() for a in analytic]
                analytic[0].flat[0] += 1e-2
            worst[term] = max(worst[term], rel_error(analytic, numeric))
    checks = [TermCheck(term, worst[term], tolerance) for term in TERMS]
    if include_encoder:
        err = max(check_encoder(base_seed + b) for b in range(min(n_batches, 5)))
        if corrupt_term == "encoder":
            err += 1e-2
        checks.append(TermCheck("encoder", err, tolerance))
    return checks
