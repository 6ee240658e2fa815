"""Synthetic three-modality identity data.

Each identity owns a latent vector z.  A modality is an affine view
``transform @ z + shift`` plus isotropic Gaussian noise; the package uses
two such views, "v" (visible-like) and "i" (infrared-like).  The third
partition "g" is a transition view derived deterministically from each v
observation by pulling it back to latent space through the v view and
pushing it forward through the i view, interpolated by ``mix_t``:

    g = (1 - mix_t) * v + mix_t * (T_i @ pinv(T_v) @ (v - s_v) + s_i)

By construction g is instance-aligned with v (same identity, same
instance index, bit-exact function of v) and, for mix_t near 1, sits in
the i view's affine subspace, so it is distributionally closer to i.

Datasets are split train/test by identity and serialize to a single
file: a JSON header followed by a flat little-endian float64 block in
(identity, modality, instance, coordinate) order, modalities ordered
v, g, i.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .seeding import stream

MODALITIES = ("v", "g", "i")

_MAGIC = b"TRIMODS1"

# Modality construction constants: orthonormal-column transforms scaled
# per modality, shifts with per-coordinate std SHIFT_STD.  The i view is
# scaled differently from v so the raw modality gap is measurable.
V_SCALE = 1.0
I_SCALE = 1.3
SHIFT_STD = 0.5


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs for the synthetic dataset generator."""

    num_identities: int
    instances_per_modality: int
    latent_dim: int
    obs_dim: int
    noise_scale: float = 0.05
    mix_t: float = 0.7
    seed: int = 0
    train_fraction: float = 0.7

    def __post_init__(self):
        if self.num_identities < 0:
            raise ValueError("num_identities must be >= 0")
        if self.instances_per_modality < 0:
            raise ValueError("instances_per_modality must be >= 0")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.obs_dim < self.latent_dim:
            raise ValueError("obs_dim must be >= latent_dim")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if not 0.0 <= self.mix_t <= 1.0:
            raise ValueError("mix_t must be in [0, 1]")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must be in (0, 1]")


@dataclass
class ModalityParams:
    """Affine view of latent space: ``transform @ z + shift``.

    ``transform`` is (obs_dim, latent_dim) and must have full column rank
    (checked with tolerance 1e-9); ``shift`` is (obs_dim,).
    """

    transform: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        self.transform = np.asarray(self.transform, dtype=np.float64)
        self.shift = np.asarray(self.shift, dtype=np.float64)
        if self.transform.ndim != 2:
            raise ValueError("transform must be a 2-D matrix")
        if self.shift.shape != (self.transform.shape[0],):
            raise ValueError("shift length must match transform rows")
        rank = np.linalg.matrix_rank(self.transform, tol=1e-9)
        if rank < self.transform.shape[1]:
            raise ValueError("transform must have full column rank")


@dataclass
class SyntheticDataset:
    """Observations indexed by (identity, modality, instance).

    ``observations`` has shape (num_identities, 3, instances, obs_dim)
    with the modality axis ordered v, g, i.  For every identity and
    instance index j, the g observation equals the transition transform
    of the v observation with the same (identity, j).
    """

    config: GeneratorConfig
    observations: np.ndarray
    train_ids: np.ndarray
    test_ids: np.ndarray

    @property
    def num_identities(self) -> int:
        return self.observations.shape[0]

    @property
    def instances_per_modality(self) -> int:
        return self.observations.shape[2]

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[3]

    def modality_index(self, name: str) -> int:
        if name not in MODALITIES:
            raise ValueError(f"unknown modality {name!r}; expected one of {MODALITIES}")
        return MODALITIES.index(name)

    def get(self, identity: int, modality: str, instance: int) -> np.ndarray:
        return self.observations[identity, self.modality_index(modality), instance]


def make_identity_latents(cfg: GeneratorConfig) -> np.ndarray:
    """Per-identity latent vectors, (num_identities, latent_dim)."""
    rng = stream(cfg.seed, "latents")
    return rng.standard_normal((cfg.num_identities, cfg.latent_dim))


def make_modality_params(cfg: GeneratorConfig) -> tuple[ModalityParams, ModalityParams]:
    """The v and i affine views for this config's seed."""
    rng = stream(cfg.seed, "modality-params")

    def one(scale):
        q, _ = np.linalg.qr(rng.standard_normal((cfg.obs_dim, cfg.latent_dim)))
        shift = SHIFT_STD * rng.standard_normal(cfg.obs_dim)
        return ModalityParams(scale * q, shift)

    return one(V_SCALE), one(I_SCALE)


def sample_instance(
    latent: np.ndarray,
    mp: ModalityParams,
    noise_scale: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """One noisy observation of ``latent`` under the given view.

    Always draws one standard-normal vector from ``rng`` (scaled by
    ``noise_scale``), so stream positions do not depend on the noise
    setting.
    """
    latent = np.asarray(latent, dtype=np.float64)
    if latent.shape != (mp.transform.shape[1],):
        raise ValueError(
            f"latent dimension {latent.shape} does not match transform columns "
            f"({mp.transform.shape[1]})"
        )
    noise = rng.standard_normal(mp.transform.shape[0])
    return mp.transform @ latent + mp.shift + noise_scale * noise


def transition_transform(
    v_obs: np.ndarray,
    mp_v: ModalityParams,
    mp_i: ModalityParams,
    mix_t: float,
) -> np.ndarray:
    """Deterministic transition view of one or more v observations.

    Accepts a single (obs_dim,) vector or an (n, obs_dim) matrix; the
    output has the same shape.  mix_t=0 returns v_obs; mix_t=1 returns
    the i-view reconstruction of the latent code recovered from v_obs.
    """
    if not 0.0 <= mix_t <= 1.0:
        raise ValueError("mix_t must be in [0, 1]")
    v_obs = np.asarray(v_obs, dtype=np.float64)
    pinv = np.linalg.pinv(mp_v.transform)
    recon = (v_obs - mp_v.shift) @ pinv.T @ mp_i.transform.T + mp_i.shift
    return (1.0 - mix_t) * v_obs + mix_t * recon


def generate_dataset(cfg: GeneratorConfig) -> SyntheticDataset:
    """Full dataset: v/g/i observations plus a by-identity train/test split."""
    latents = make_identity_latents(cfg)
    mp_v, mp_i = make_modality_params(cfg)
    rng_v = stream(cfg.seed, "v-noise")
    rng_i = stream(cfg.seed, "i-noise")

    n_id, n_inst = cfg.num_identities, cfg.instances_per_modality
    obs = np.zeros((n_id, 3, n_inst, cfg.obs_dim))
    for ident in range(n_id):
        for j in range(n_inst):
            obs[ident, 0, j] = sample_instance(latents[ident], mp_v, cfg.noise_scale, rng_v)
        obs[ident, 1] = transition_transform(obs[ident, 0], mp_v, mp_i, cfg.mix_t)
        for j in range(n_inst):
            obs[ident, 2, j] = sample_instance(latents[ident], mp_i, cfg.noise_scale, rng_i)

    rng_split = stream(cfg.seed, "split")
    perm = rng_split.permutation(n_id)
    if n_id == 0:
        n_train = 0
    else:
        n_train = min(n_id, max(1, round(cfg.train_fraction * n_id)))
    train_ids = np.sort(perm[:n_train])
    test_ids = np.sort(perm[n_train:])
    return SyntheticDataset(cfg, obs, train_ids, test_ids)


# --------------------------------------------------------------------------
# File format: magic, u64-LE header length, JSON header, float64-LE block
# in C order over (identity, modality, instance, coordinate).
# --------------------------------------------------------------------------


def save_dataset(ds: SyntheticDataset, path) -> None:
    header = {
        "format": "trimodal-dataset",
        "version": 1,
        "config": asdict(ds.config),
        "num_identities": int(ds.num_identities),
        "modalities": list(MODALITIES),
        "instances_per_modality": int(ds.instances_per_modality),
        "obs_dim": int(ds.obs_dim),
        "train_ids": [int(x) for x in ds.train_ids],
        "test_ids": [int(x) for x in ds.test_ids],
        "order": "identity, modality, instance, coordinate",
        "dtype": "<f8",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    data = np.ascontiguousarray(ds.observations, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(data)


def load_dataset(path) -> SyntheticDataset:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a trimodal dataset file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = fh.read()
    cfg = GeneratorConfig(**header["config"])
    shape = (
        header["num_identities"],
        len(header["modalities"]),
        header["instances_per_modality"],
        header["obs_dim"],
    )
    expected = int(np.prod(shape)) * 8
    if len(data) != expected:
        raise ValueError(f"{path}: payload has {len(data)} bytes, expected {expected}")
    obs = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
    return SyntheticDataset(
        cfg,
        obs,
        np.asarray(header["train_ids"], dtype=np.int64),
        np.asarray(header["test_ids"], dtype=np.int64),
    )
