"""Loss terms with values and analytic gradients.

All gradients are hand-derived for this fixed computation graph; there
is no autodiff.  The terms:

* positive/negative losses over an identity distance matrix and their
  weighted combination (``pair_contrast_loss``),
* ``contrastive_loss``: the pair losses averaged over the three modality
  pairs (v,i), (v,g), (i,g),
* ``center_loss``: mean Euclidean distance of every stacked feature to
  its learnable identity center,
* ``query_alignment_loss``: matches row sums of the positive-pair query
  matrices across modality-pair combinations,
* ``identity_loss``: cross-entropy of a shared and two per-modality
  linear classifiers on batch-normalized v/i features, an EMA update of
  shadow classifier weights, and a consistency term against the
  cross-assigned shadows (the soft target is a constant: no gradient
  flows into it),
* ``total_loss`` combining everything.

Convention: a gradient at a non-differentiable point (zero distance,
absolute-value kink, top-k tie) uses the zero / frozen-selection
subgradient.  The g partition's gradients are always computed and
reported; whether they reach encoder parameters is the trainer's
decision (stop-gradient contract).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import accel
from .batching import EmbeddingBatch
from .geometry import (
    IdDistanceMatrix,
    QueryMatrixSet,
    distance_matrix_feature_grads,
    full_block,
    id_distance_matrix,
    positive_query_matrices,
)

# Ordered modality-pair combinations of the query alignment loss: each
# entry compares row sums of E^a against E^b.
QUERY_PAIRS = (("vg", "vi"), ("gi", "vi"), ("ig", "iv"), ("gv", "iv"))


@dataclass(frozen=True)
class LossWeights:
    """Loss hyperparameters; defaults follow the reference experiment setup."""

    lambda1: float = 1.0
    lambda2: float = 0.1
    alpha: float = 1.0
    beta: float = 0.005
    gamma: float = 1.0
    epsilon: float = 1e-6

    def __post_init__(self):
        vals = (self.lambda1, self.lambda2, self.alpha, self.beta, self.gamma, self.epsilon)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("loss weights must be finite")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


def _index_of(ids: np.ndarray, labels, what: str) -> np.ndarray:
    labels = np.asarray(labels)
    if len(ids) == 0:
        raise ValueError(f"no {what} available: empty identity set")
    idx = np.searchsorted(ids, labels)
    idx_clip = np.minimum(idx, len(ids) - 1)
    bad = ids[idx_clip] != labels
    if bad.any():
        missing = labels[bad][0]
        raise ValueError(f"no {what} for identity {missing}")
    return idx_clip


@dataclass
class CenterBank:
    """One learnable center vector per training identity."""

    ids: np.ndarray
    centers: np.ndarray

    INIT_STD = 0.01

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        if self.centers.shape[0] != len(self.ids):
            raise ValueError("one center per identity required")
        if not np.all(np.isfinite(self.centers)):
            raise ValueError("centers must be finite")

    @classmethod
    def initialize(cls, ids, feat_dim: int, rng: np.random.Generator) -> "CenterBank":
        ids = np.sort(np.asarray(ids))
        centers = cls.INIT_STD * rng.standard_normal((len(ids), feat_dim))
        return cls(ids=ids, centers=centers)

    def index_of(self, labels) -> np.ndarray:
        return _index_of(self.ids, labels, "center")


@dataclass
class ClassifierSet:
    """Linear identity classifiers plus the feature normalizer state.

    ``w_shared`` classifies concatenated v/i features; ``w_v``/``w_i``
    are the per-modality classifiers with EMA shadows ``ema_v``/``ema_i``
    updated at rate ``r``.  ``cross_consistency`` selects whether the
    consistency soft targets use the opposite modality's shadow (the
    default) or the same modality's.
    """

    ids: np.ndarray
    w_shared: np.ndarray
    w_v: np.ndarray
    w_i: np.ndarray
    ema_v: np.ndarray
    ema_i: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray
    r: float = 0.2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    cross_consistency: bool = True

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        if not 0.0 < self.r < 1.0:
            raise ValueError("update rate r must be in (0, 1)")
        if self.ema_v.shape != self.w_v.shape or self.ema_i.shape != self.w_i.shape:
            raise ValueError("shadow shapes must equal live classifier shapes")

    @classmethod
    def initialize(cls, ids, feat_dim: int, rng: np.random.Generator, **kwargs) -> "ClassifierSet":
        ids = np.sort(np.asarray(ids))
        c = len(ids)
        scale = 1.0 / np.sqrt(feat_dim)
        w_shared = scale * rng.standard_normal((c, feat_dim))
        w_v = scale * rng.standard_normal((c, feat_dim))
        w_i = scale * rng.standard_normal((c, feat_dim))
        return cls(
            ids=ids,
            w_shared=w_shared,
            w_v=w_v,
            w_i=w_i,
            ema_v=w_v.copy(),
            ema_i=w_i.copy(),
            bn_gamma=np.ones(feat_dim),
            bn_beta=np.zeros(feat_dim),
            bn_mean=np.zeros(feat_dim),
            bn_var=np.ones(feat_dim),
            **kwargs,
        )

    @property
    def num_classes(self) -> int:
        return self.w_shared.shape[0]

    def index_of(self, labels) -> np.ndarray:
        return _index_of(self.ids, labels, "classifier class")


@dataclass
class LossReport:
    """Values and gradients of one total-loss evaluation.

    ``g_g`` is always populated; under the stop-gradient contract the
    trainer must not propagate it to encoder parameters.
    """

    values: dict[str, float]
    g_v: np.ndarray
    g_g: np.ndarray
    g_i: np.ndarray
    g_centers: np.ndarray
    g_w_shared: np.ndarray
    g_w_v: np.ndarray
    g_w_i: np.ndarray
    g_bn_gamma: np.ndarray
    g_bn_beta: np.ndarray
    g_detached: bool
    soft_target: np.ndarray


# --------------------------------------------------------------------------
# pair losses over an identity distance matrix
# --------------------------------------------------------------------------


def _pos_cell_grads(idm: IdDistanceMatrix) -> tuple[float, np.ndarray]:
    p = idm.p
    value = float(np.trace(idm.d)) / p
    dl = np.zeros_like(idm.d)
    np.fill_diagonal(dl, 1.0 / p)
    return value, dl


def _neg_cell_grads(idm: IdDistanceMatrix, epsilon: float) -> tuple[float, np.ndarray]:
    p = idm.p
    if p < 2:
        raise ValueError("negative loss needs at least two identities")
    off = ~np.eye(p, dtype=bool)
    denom = idm.d[off] + epsilon
    value = float((1.0 / denom).sum()) / (p * (p - 1))
    dl = np.zeros_like(idm.d)
    dl[off] = -1.0 / (denom * denom) / (p * (p - 1))
    return value, dl


def positive_loss(idm: IdDistanceMatrix) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean same-identity cell of D; pulls hardest positives together.

    Returns (value, grad wrt first feature set, grad wrt second).
    """
    value, dl = _pos_cell_grads(idm)
    ga, gb = distance_matrix_feature_grads(idm, dl)
    return value, ga, gb


def negative_loss(idm: IdDistanceMatrix, epsilon: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean inverse off-diagonal cell of D; pushes hardest negatives apart."""
    value, dl = _neg_cell_grads(idm, epsilon)
    ga, gb = distance_matrix_feature_grads(idm, dl)
    return value, ga, gb


def pair_contrast_loss(
    idm: IdDistanceMatrix, weights: LossWeights
) -> tuple[float, np.ndarray, np.ndarray]:
    """lambda1 * positive_loss + lambda2 * negative_loss for one modality pair."""
    v_pos, dl_pos = _pos_cell_grads(idm)
    v_neg, dl_neg = _neg_cell_grads(idm, weights.epsilon)
    dl = weights.lambda1 * dl_pos + weights.lambda2 * dl_neg
    ga, gb = distance_matrix_feature_grads(idm, dl)
    return weights.lambda1 * v_pos + weights.lambda2 * v_neg, ga, gb


@dataclass
class ContrastiveResult:
    value: float
    g_v: np.ndarray
    g_g: np.ndarray
    g_i: np.ndarray
    blocks: dict
    matrices: dict[str, IdDistanceMatrix]


def contrastive_loss(
    batch: EmbeddingBatch, k: int, weights: LossWeights, blocks: dict | None = None
) -> ContrastiveResult:
    """Pair contrast losses averaged over the (v,i), (v,g), (i,g) pairs."""
    if blocks is None:
        blocks = {
            "vi": full_block(batch.v, batch.i),
            "vg": full_block(batch.v, batch.g),
            "ig": full_block(batch.i, batch.g),
        }
    matrices = {
        key: id_distance_matrix(blk.feat_a, blk.feat_b, batch.labels, k, block=blk)
        for key, blk in blocks.items()
    }
    g_v = np.zeros_like(batch.v)
    g_g = np.zeros_like(batch.g)
    g_i = np.zeros_like(batch.i)
    value = 0.0
    for key, (acc_a, acc_b) in (("vi", (g_v, g_i)), ("vg", (g_v, g_g)), ("ig", (g_i, g_g))):
        v, ga, gb = pair_contrast_loss(matrices[key], weights)
        value += v / 3.0
        acc_a += ga / 3.0
        acc_b += gb / 3.0
    return ContrastiveResult(value, g_v, g_g, g_i, blocks, matrices)


# --------------------------------------------------------------------------
# center loss
# --------------------------------------------------------------------------


def center_loss(
    features: np.ndarray, labels, bank: CenterBank
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean Euclidean distance of each feature row to its identity center.

    Returns (value, grad wrt features, grad wrt centers).  Zero-distance
    rows contribute the zero subgradient.
    """
    features = np.asarray(features, dtype=np.float64)
    idx = bank.index_of(labels)
    diff = features - bank.centers[idx]
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    b = features.shape[0]
    value = float(dist.mean())
    unit = np.divide(diff, dist[:, None], out=np.zeros_like(diff), where=dist[:, None] > 0)
    g_f = unit / b
    g_c = np.zeros_like(bank.centers)
    np.add.at(g_c, idx, -unit / b)
    return value, g_f, g_c


# --------------------------------------------------------------------------
# query alignment loss
# --------------------------------------------------------------------------


@dataclass
class QueryAlignResult:
    value: float
    pair_values: dict[str, float]
    g_v: np.ndarray
    g_g: np.ndarray
    g_i: np.ndarray


def query_alignment_loss(qms: QueryMatrixSet) -> QueryAlignResult:
    """Mean absolute difference of query-row sums across the four
    modality-pair combinations, averaged over identities.

    The sign of each row-sum difference routes a uniform gradient into
    the entries of the two query matrices involved; entry gradients fold
    back onto the three underlying pairwise blocks.
    """
    p, n = qms.groups.shape
    rowsums = {key: qms.e[key].sum(axis=2) for key in qms.e}
    scale = 1.0 / (len(QUERY_PAIRS) * p)
    de = {key: np.zeros((p, n, n)) for key in qms.e}
    value = 0.0
    pair_values = {}
    for a, b in QUERY_PAIRS:
        diff = rowsums[a] - rowsums[b]
        pv = float(np.abs(diff).sum()) / (n * p)
        pair_values[f"{a},{b}"] = pv
        value += pv / len(QUERY_PAIRS)
        s = np.sign(diff)[:, :, None] / n * scale
        de[a] += s
        de[b] -= s

    # Fold entry gradients of all six keys onto the three stored blocks;
    # a reversed key's entry (p, q) lives at the transposed block position.
    w = {key: np.zeros_like(qms.blocks[key].dist) for key in ("vi", "vg", "ig")}
    for idx in range(p):
        r = qms.groups[idx]
        sel = np.ix_(r, r)
        w["vi"][sel] += de["vi"][idx] + de["iv"][idx].T
        w["vg"][sel] += de["vg"][idx] + de["gv"][idx].T
        w["ig"][sel] += de["ig"][idx] + de["gi"][idx].T

    grads = {}
    for key in ("vi", "vg", "ig"):
        blk = qms.blocks[key]
        grads[key] = accel.weighted_dist_grad(blk.feat_a, blk.feat_b, blk.dist, w[key])
    g_v = grads["vi"][0] + grads["vg"][0]
    g_i = grads["vi"][1] + grads["ig"][0]
    g_g = grads["vg"][1] + grads["ig"][1]
    return QueryAlignResult(value, pair_values, g_v, g_g, g_i)


# --------------------------------------------------------------------------
# feature normalization + identity loss
# --------------------------------------------------------------------------


@dataclass
class BnCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    training: bool
    rows_v: int
    new_mean: np.ndarray
    new_var: np.ndarray


def normalize_features(
    f_v: np.ndarray, f_i: np.ndarray, cls: ClassifierSet, training: bool
) -> tuple[np.ndarray, np.ndarray, BnCache]:
    """Batch normalization over the concatenated v/i batch dimension.

    Training mode normalizes with biased batch statistics and computes
    updated running statistics (returned in the cache; committing them is
    the caller's decision).  Eval mode applies the running statistics,
    making the output an affine function of the input.
    """
    f_v = np.asarray(f_v, dtype=np.float64)
    f_i = np.asarray(f_i, dtype=np.float64)
    x = np.vstack([f_v, f_i])
    b = x.shape[0]
    if training:
        if b < 2:
            raise ValueError("batch normalization needs at least 2 rows in training mode")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + cls.bn_eps)
        xhat = (x - mu) * inv_std
        m = cls.bn_momentum
        new_mean = (1.0 - m) * cls.bn_mean + m * mu
        new_var = (1.0 - m) * cls.bn_var + m * var * b / (b - 1)
    else:
        inv_std = 1.0 / np.sqrt(cls.bn_var + cls.bn_eps)
        xhat = (x - cls.bn_mean) * inv_std
        new_mean = cls.bn_mean
        new_var = cls.bn_var
    out = cls.bn_gamma * xhat + cls.bn_beta
    cache = BnCache(xhat, inv_std, training, f_v.shape[0], new_mean, new_var)
    return out[: f_v.shape[0]], out[f_v.shape[0] :], cache


def bn_backward(
    cache: BnCache, cls: ClassifierSet, dx_v: np.ndarray, dx_i: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Backpropagate through normalize_features.

    Returns (grad f_v, grad f_i, grad gamma, grad beta).
    """
    dout = np.vstack([dx_v, dx_i])
    dgamma = (dout * cache.xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * cls.bn_gamma
    if cache.training:
        b = dout.shape[0]
        dx = (
            cache.inv_std
            / b
            * (b * dxhat - dxhat.sum(axis=0) - cache.xhat * (dxhat * cache.xhat).sum(axis=0))
        )
    else:
        dx = dxhat * cache.inv_std
    return dx[: cache.rows_v], dx[cache.rows_v :], dgamma, dbeta


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(_log_softmax(logits))


def _ce_hard(logits, labels):
    rows = logits.shape[0]
    ls = _log_softmax(logits)
    value = -float(ls[np.arange(rows), labels].mean())
    grad = np.exp(ls)
    grad[np.arange(rows), labels] -= 1.0
    return value, grad / rows


def _ce_soft(logits, q):
    rows = logits.shape[0]
    ls = _log_softmax(logits)
    value = -float((q * ls).sum()) / rows
    grad = (np.exp(ls) * q.sum(axis=1, keepdims=True) - q) / rows
    return value, grad


@dataclass
class IdentityResult:
    value: float
    gx_v: np.ndarray
    gx_i: np.ndarray
    g_w_shared: np.ndarray
    g_w_v: np.ndarray
    g_w_i: np.ndarray
    soft_target: np.ndarray
    new_ema_v: np.ndarray
    new_ema_i: np.ndarray


def identity_loss(
    x_v: np.ndarray,
    x_i: np.ndarray,
    labels,
    cls: ClassifierSet,
    update_state: bool = True,
    soft_target: np.ndarray | None = None,
) -> IdentityResult:
    """Classification loss on normalized v/i features.

    Cross-entropy of the shared classifier on the concatenated batch and
    of each per-modality classifier, then an EMA update of the shadow
    weights, then a consistency cross-entropy between the live logits and
    the softmax of the (cross-assigned) shadow logits.  The soft target
    is a constant with respect to every gradient; passing ``soft_target``
    pins it explicitly (used by the finite-difference checks).  The EMA
    update is committed to ``cls`` only when ``update_state`` is true.
    """
    idx = cls.index_of(labels)
    nv = x_v.shape[0]
    x_all = np.vstack([x_v, x_i])
    idx2 = np.concatenate([idx, idx])

    logits_sh = x_all @ cls.w_shared.T
    v_sh, dlog_sh = _ce_hard(logits_sh, idx2)
    logits_v = x_v @ cls.w_v.T
    v_v, dlog_v = _ce_hard(logits_v, idx)
    logits_i = x_i @ cls.w_i.T
    v_i, dlog_i = _ce_hard(logits_i, idx)

    new_ema_v = (1.0 - cls.r) * cls.ema_v + cls.r * cls.w_v
    new_ema_i = (1.0 - cls.r) * cls.ema_i + cls.r * cls.w_i

    z = np.vstack([logits_v, logits_i])
    if soft_target is None:
        if cls.cross_consistency:
            zt = np.vstack([x_v @ new_ema_i.T, x_i @ new_ema_v.T])
        else:
            zt = np.vstack([x_v @ new_ema_v.T, x_i @ new_ema_i.T])
        soft_target = softmax(zt)
    v_cons, dz = _ce_soft(z, soft_target)

    dlog_v_total = dlog_v + dz[:nv]
    dlog_i_total = dlog_i + dz[nv:]
    gx_v = dlog_sh[:nv] @ cls.w_shared + dlog_v_total @ cls.w_v
    gx_i = dlog_sh[nv:] @ cls.w_shared + dlog_i_total @ cls.w_i
    g_w_shared = dlog_sh.T @ x_all
    g_w_v = dlog_v_total.T @ x_v
    g_w_i = dlog_i_total.T @ x_i

    if update_state:
        cls.ema_v = new_ema_v
        cls.ema_i = new_ema_i
    return IdentityResult(
        value=v_sh + v_v + v_i + v_cons,
        gx_v=gx_v,
        gx_i=gx_i,
        g_w_shared=g_w_shared,
        g_w_v=g_w_v,
        g_w_i=g_w_i,
        soft_target=soft_target,
        new_ema_v=new_ema_v,
        new_ema_i=new_ema_i,
    )


# --------------------------------------------------------------------------
# total loss
# --------------------------------------------------------------------------


def total_loss(
    batch: EmbeddingBatch,
    bank: CenterBank,
    cls: ClassifierSet,
    weights: LossWeights,
    k: int,
    use_contrast: bool = True,
    use_center: bool = True,
    use_query_align: bool = True,
    update_state: bool = True,
    soft_target: np.ndarray | None = None,
) -> LossReport:
    """identity + alpha * contrastive + beta * center + gamma * query alignment.

    The identity loss consumes only the v and i partitions.  A term
    disabled via its flag contributes exactly zero value and gradients,
    identically to setting its weight to zero.  ``update_state=False``
    leaves the EMA shadows and batch-norm running statistics untouched
    (used by the finite-difference checks together with ``soft_target``).
    """
    pn = batch.rows
    x_v, x_i, bncache = normalize_features(batch.v, batch.i, cls, training=True)
    idres = identity_loss(
        x_v, x_i, batch.labels, cls, update_state=update_state, soft_target=soft_target
    )
    g_v, g_i, g_bn_gamma, g_bn_beta = bn_backward(bncache, cls, idres.gx_v, idres.gx_i)
    g_g = np.zeros_like(batch.g)
    g_centers = np.zeros_like(bank.centers)
    values = {"id": idres.value, "contrast": 0.0, "center": 0.0, "query_align": 0.0}

    blocks = None
    if use_contrast or use_query_align:
        blocks = {
            "vi": full_block(batch.v, batch.i),
            "vg": full_block(batch.v, batch.g),
            "ig": full_block(batch.i, batch.g),
        }
    if use_contrast:
        con = contrastive_loss(batch, k, weights, blocks=blocks)
        values["contrast"] = con.value
        g_v += weights.alpha * con.g_v
        g_g += weights.alpha * con.g_g
        g_i += weights.alpha * con.g_i
    if use_center:
        stacked = np.vstack([batch.v, batch.g, batch.i])
        labels3 = np.concatenate([batch.labels] * 3)
        v_c, g_f, g_c = center_loss(stacked, labels3, bank)
        values["center"] = v_c
        g_v += weights.beta * g_f[:pn]
        g_g += weights.beta * g_f[pn : 2 * pn]
        g_i += weights.beta * g_f[2 * pn :]
        g_centers += weights.beta * g_c
    if use_query_align:
        qms = positive_query_matrices(batch, blocks=blocks)
        qres = query_alignment_loss(qms)
        values["query_align"] = qres.value
        g_v += weights.gamma * qres.g_v
        g_g += weights.gamma * qres.g_g
        g_i += weights.gamma * qres.g_i

    values["total"] = (
        values["id"]
        + weights.alpha * values["contrast"]
        + weights.beta * values["center"]
        + weights.gamma * values["query_align"]
    )
    if update_state:
        cls.bn_mean = bncache.new_mean
        cls.bn_var = bncache.new_var
    return LossReport(
        values=values,
        g_v=g_v,
        g_g=g_g,
        g_i=g_i,
        g_centers=g_centers,
        g_w_shared=idres.g_w_shared,
        g_w_v=idres.g_w_v,
        g_w_i=idres.g_w_i,
        g_bn_gamma=g_bn_gamma,
        g_bn_beta=g_bn_beta,
        g_detached=batch.g_detached,
        soft_target=idres.soft_target,
    )
