"""Toy encoder, Adam optimizer, learning-rate schedule, and training loop.

The encoder is a two-layer MLP shared across all three modalities.
Each training step encodes the v and i partitions with a gradient path
and the g partition without one (unless stop-gradient is disabled),
evaluates the total loss, and applies one Adam step to the encoder,
centers, normalizer affine parameters, and live classifiers.  The EMA
shadow weights are updated inside the identity loss and are never
touched by the optimizer.

Checkpoints serialize every array (including optimizer moments and the
sampling rng state) so a resumed run continues bit-exactly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .batching import BatchSpec, EmbeddingBatch, ObservationBatch, pk_sample
from .losses import CenterBank, ClassifierSet, LossReport, LossWeights, total_loss
from .seeding import stream
from .synthgen import SyntheticDataset

_CKPT_MAGIC = b"TRIMOCK1"


@dataclass
class EncoderParams:
    """Two affine layers with a rectifier in between."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        if self.w1.shape[0] != self.b1.shape[0] or self.w2.shape[0] != self.b2.shape[0]:
            raise ValueError("bias lengths must match layer output dims")
        if self.w2.shape[1] != self.w1.shape[0]:
            raise ValueError("layer dimensions are inconsistent")
        for arr in (self.w1, self.b1, self.w2, self.b2):
            if not np.all(np.isfinite(arr)):
                raise ValueError("encoder parameters must be finite")

    @classmethod
    def initialize(
        cls, obs_dim: int, hidden_dim: int, feat_dim: int, rng: np.random.Generator
    ) -> "EncoderParams":
        w1 = rng.standard_normal((hidden_dim, obs_dim)) * math.sqrt(2.0 / obs_dim)
        w2 = rng.standard_normal((feat_dim, hidden_dim)) * math.sqrt(1.0 / hidden_dim)
        return cls(w1=w1, b1=np.zeros(hidden_dim), w2=w2, b2=np.zeros(feat_dim))

    @property
    def obs_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.w2.shape[0]


@dataclass(frozen=True)
class ModelConfig:
    """Encoder dimensions.  ``part_count`` is a placeholder axis for
    part-based features; only the single-vector setting is supported."""

    hidden_dim: int = 64
    feat_dim: int = 16
    part_count: int = 1

    def __post_init__(self):
        if self.hidden_dim < 1 or self.feat_dim < 1:
            raise ValueError("model dimensions must be >= 1")
        if self.part_count != 1:
            raise ValueError("part_count other than 1 is not supported")


def encode(params: EncoderParams, obs: np.ndarray, compute_grad: bool = False):
    """Encode observations; optionally return a backprop closure.

    The closure maps a feature gradient to parameter gradients
    {"w1", "b1", "w2", "b2"}.  It holds references to ``obs`` and the
    forward activations, so it must be called before those are mutated.
    """
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[1] != params.obs_dim:
        raise ValueError(f"observations must be (n, {params.obs_dim}), got {obs.shape}")
    a1 = obs @ params.w1.T + params.b1
    h = np.maximum(a1, 0.0)
    f = h @ params.w2.T + params.b2
    if not compute_grad:
        return f

    def backprop(df: np.ndarray) -> dict[str, np.ndarray]:
        dw2 = df.T @ h
        db2 = df.sum(axis=0)
        da1 = (df @ params.w2) * (a1 > 0.0)
        dw1 = da1.T @ obs
        db1 = da1.sum(axis=0)
        return {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}

    return f, backprop


# --------------------------------------------------------------------------
# optimizer and schedule
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam moment accumulators over a named parameter dict."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def initialize(cls, params: dict[str, np.ndarray], **kwargs) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **kwargs,
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
) -> None:
    """One bias-corrected Adam update, in place."""
    if params.keys() != grads.keys():
        raise ValueError("parameter and gradient keys must match")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for key, p in params.items():
        g = grads[key]
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {key}")
        m = state.m[key]
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class ScheduleConfig:
    """Linear warm-up then milestone decay.

    Warm-up scales the base rate by (epoch + 1) / warmup_epochs; after
    warm-up the rate is base_lr times the factor of the last passed
    milestone.
    """

    base_lr: float = 3.5e-4
    warmup_epochs: int = 10
    milestones: tuple[int, ...] = (80, 180)
    factors: tuple[float, ...] = (0.1, 0.01)
    total_epochs: int = 250

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.warmup_epochs < 1:
            raise ValueError("warmup_epochs must be >= 1")
        if len(self.milestones) != len(self.factors):
            raise ValueError("milestones and factors must pair up")
        if any(f <= 0 for f in self.factors):
            raise ValueError("factors must be positive")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")


def lr_at(schedule: ScheduleConfig, epoch: int) -> float:
    """Learning rate at an epoch index in [0, total_epochs)."""
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if epoch < schedule.warmup_epochs:
        return schedule.base_lr * (epoch + 1) / schedule.warmup_epochs
    factor = 1.0
    for milestone, f in zip(schedule.milestones, schedule.factors):
        if epoch >= milestone:
            factor = f
    return schedule.base_lr * factor


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainState:
    encoder: EncoderParams
    bank: CenterBank
    cls: ClassifierSet
    opt: OptimizerState
    sampler: np.random.Generator
    step: int = 0


def trainable_arrays(state: TrainState) -> dict[str, np.ndarray]:
    """The arrays Adam updates, by name.  EMA shadows and batch-norm
    running statistics are deliberately absent."""
    return {
        "enc.w1": state.encoder.w1,
        "enc.b1": state.encoder.b1,
        "enc.w2": state.encoder.w2,
        "enc.b2": state.encoder.b2,
        "centers": state.bank.centers,
        "cls.w_shared": state.cls.w_shared,
        "cls.w_v": state.cls.w_v,
        "cls.w_i": state.cls.w_i,
        "bn.gamma": state.cls.bn_gamma,
        "bn.beta": state.cls.bn_beta,
    }


def init_train_state(
    dataset: SyntheticDataset,
    model_cfg: ModelConfig,
    seed: int,
    cross_consistency: bool = True,
) -> TrainState:
    """Fresh training state for a dataset's train split."""
    train_ids = dataset.train_ids
    if len(train_ids) == 0:
        raise ValueError("dataset has no train identities")
    encoder = EncoderParams.initialize(
        dataset.obs_dim, model_cfg.hidden_dim, model_cfg.feat_dim, stream(seed, "encoder-init")
    )
    bank = CenterBank.initialize(train_ids, model_cfg.feat_dim, stream(seed, "center-init"))
    cls = ClassifierSet.initialize(
        train_ids,
        model_cfg.feat_dim,
        stream(seed, "classifier-init"),
        cross_consistency=cross_consistency,
    )
    state = TrainState(
        encoder=encoder,
        bank=bank,
        cls=cls,
        opt=None,  # type: ignore[arg-type]
        sampler=stream(seed, "sampling"),
    )
    state.opt = OptimizerState.initialize(trainable_arrays(state))
    return state


def forward_batch(params: EncoderParams, obs: ObservationBatch, stopgrad: bool = True):
    """Encode a batch.  Returns (EmbeddingBatch, backprop closures).

    Under the stop-gradient contract the g partition is encoded without a
    gradient path and its closure slot is None.
    """
    f_v, bp_v = encode(params, obs.v, compute_grad=True)
    f_i, bp_i = encode(params, obs.i, compute_grad=True)
    if stopgrad:
        f_g = encode(params, obs.g)
        bp_g = None
    else:
        f_g, bp_g = encode(params, obs.g, compute_grad=True)
    emb = EmbeddingBatch(v=f_v, g=f_g, i=f_i, labels=obs.labels, g_detached=stopgrad)
    return emb, (bp_v, bp_i, bp_g)


def apply_step(
    state: TrainState,
    report: LossReport,
    closures,
    lr: float,
) -> None:
    """Turn a loss report into parameter gradients and apply one Adam step."""
    bp_v, bp_i, bp_g = closures
    enc = bp_v(report.g_v)
    for key, val in bp_i(report.g_i).items():
        enc[key] += val
    if bp_g is not None:
        if report.g_detached:
            raise ValueError("a g-partition closure was supplied for a detached batch")
        for key, val in bp_g(report.g_g).items():
            enc[key] += val
    grads = {
        "enc.w1": enc["w1"],
        "enc.b1": enc["b1"],
        "enc.w2": enc["w2"],
        "enc.b2": enc["b2"],
        "centers": report.g_centers,
        "cls.w_shared": report.g_w_shared,
        "cls.w_v": report.g_w_v,
        "cls.w_i": report.g_w_i,
        "bn.gamma": report.g_bn_gamma,
        "bn.beta": report.g_bn_beta,
    }
    adam_step(trainable_arrays(state), grads, state.opt, lr)
    state.step += 1


def train_step(
    state: TrainState,
    obs: ObservationBatch,
    weights: LossWeights,
    k: int,
    lr: float,
    stopgrad: bool = True,
    use_contrast: bool = True,
    use_center: bool = True,
    use_query_align: bool = True,
) -> LossReport:
    """One full training step on an already sampled batch."""
    emb, closures = forward_batch(state.encoder, obs, stopgrad=stopgrad)
    report = total_loss(
        emb,
        state.bank,
        state.cls,
        weights,
        k,
        use_contrast=use_contrast,
        use_center=use_center,
        use_query_align=use_query_align,
    )
    apply_step(state, report, closures, lr)
    return report


def train(
    dataset: SyntheticDataset,
    spec: BatchSpec,
    model_cfg: ModelConfig,
    weights: LossWeights,
    schedule: ScheduleConfig,
    *,
    steps: int,
    k: int | None = None,
    seed: int = 0,
    stopgrad: bool = True,
    use_contrast: bool = True,
    use_center: bool = True,
    use_query_align: bool = True,
    cross_consistency: bool = True,
    state: TrainState | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run the training loop; returns the final state and per-step trace.

    ``k`` defaults to the batch's instances-per-identity.  The trace
    records the weighted contribution of each term, so a term disabled by
    flag and one weighted to zero produce identical traces.  Resuming
    from a loaded ``state`` continues the original run bit-exactly.
    """
    if k is None:
        k = spec.n
    if state is None:
        state = init_train_state(dataset, model_cfg, seed, cross_consistency=cross_consistency)
    steps_per_epoch = max(1, math.ceil(len(dataset.train_ids) / spec.p))
    last_epoch = (state.step + max(steps, 1) - 1) // steps_per_epoch
    if steps > 0 and last_epoch >= schedule.total_epochs:
        raise ValueError(
            f"{steps} steps from step {state.step} would exceed the schedule's "
            f"{schedule.total_epochs} epochs ({steps_per_epoch} steps per epoch)"
        )
    trace = []
    for _ in range(steps):
        epoch = state.step // steps_per_epoch
        lr = lr_at(schedule, epoch)
        obs = pk_sample(dataset, spec, state.sampler)
        report = train_step(
            state,
            obs,
            weights,
            k,
            lr,
            stopgrad=stopgrad,
            use_contrast=use_contrast,
            use_center=use_center,
            use_query_align=use_query_align,
        )
        total = report.values["total"]
        if not np.isfinite(total):
            raise FloatingPointError(f"non-finite loss at step {state.step - 1}")
        trace.append(
            {
                "step": state.step - 1,
                "epoch": epoch,
                "lr": lr,
                "total": total,
                "id": report.values["id"],
                "contrast": weights.alpha * report.values["contrast"],
                "center": weights.beta * report.values["center"],
                "query_align": weights.gamma * report.values["query_align"],
            }
        )
    return state, trace


# --------------------------------------------------------------------------
# checkpoints: magic, u64-LE manifest length, JSON manifest, float64-LE
# array blob in manifest order.
# --------------------------------------------------------------------------


def _state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = dict(trainable_arrays(state))
    arrays["cls.ema_v"] = state.cls.ema_v
    arrays["cls.ema_i"] = state.cls.ema_i
    arrays["bn.mean"] = state.cls.bn_mean
    arrays["bn.var"] = state.cls.bn_var
    for key in list(trainable_arrays(state)):
        arrays[f"opt.m.{key}"] = state.opt.m[key]
        arrays[f"opt.v.{key}"] = state.opt.v[key]
    return arrays


def save_checkpoint(state: TrainState, path, config: dict | None = None, seed: int | None = None) -> None:
    """Write the full training state.  ``config``/``seed`` are embedded in
    the manifest for provenance; they are not needed to restore."""
    arrays = _state_arrays(state)
    manifest = {
        "format": "trimodal-checkpoint",
        "version": 1,
        "step": int(state.step),
        "config": config,
        "seed": seed,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
        "bank_ids": [int(x) for x in state.bank.ids],
        "cls": {
            "r": state.cls.r,
            "bn_momentum": state.cls.bn_momentum,
            "bn_eps": state.cls.bn_eps,
            "cross_consistency": state.cls.cross_consistency,
        },
        "opt": {
            "step": int(state.opt.step),
            "beta1": state.opt.beta1,
            "beta2": state.opt.beta2,
            "eps": state.opt.eps,
        },
        "sampler_state": state.sampler.bit_generator.state,
        "dtype": "<f8",
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a trimodal checkpoint file")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        data = fh.read()

    arrays = {}
    offset = 0
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = (
            np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
        offset += count * 8
    if offset != len(data):
        raise ValueError(f"{path}: payload size mismatch")

    encoder = EncoderParams(
        w1=arrays["enc.w1"], b1=arrays["enc.b1"], w2=arrays["enc.w2"], b2=arrays["enc.b2"]
    )
    bank = CenterBank(
        ids=np.asarray(manifest["bank_ids"], dtype=np.int64), centers=arrays["centers"]
    )
    cls_meta = manifest["cls"]
    cls = ClassifierSet(
        ids=bank.ids,
        w_shared=arrays["cls.w_shared"],
        w_v=arrays["cls.w_v"],
        w_i=arrays["cls.w_i"],
        ema_v=arrays["cls.ema_v"],
        ema_i=arrays["cls.ema_i"],
        bn_gamma=arrays["bn.gamma"],
        bn_beta=arrays["bn.beta"],
        bn_mean=arrays["bn.mean"],
        bn_var=arrays["bn.var"],
        r=cls_meta["r"],
        bn_momentum=cls_meta["bn_momentum"],
        bn_eps=cls_meta["bn_eps"],
        cross_consistency=cls_meta["cross_consistency"],
    )
    sampler = np.random.default_rng()
    sampler.bit_generator.state = manifest["sampler_state"]
    state = TrainState(
        encoder=encoder, bank=bank, cls=cls, opt=None, sampler=sampler, step=manifest["step"]  # type: ignore[arg-type]
    )
    opt_meta = manifest["opt"]
    state.opt = OptimizerState(
        m={k: arrays[f"opt.m.{k}"] for k in trainable_arrays(state)},
        v={k: arrays[f"opt.v.{k}"] for k in trainable_arrays(state)},
        step=opt_meta["step"],
        beta1=opt_meta["beta1"],
        beta2=opt_meta["beta2"],
        eps=opt_meta["eps"],
    )
    return state
