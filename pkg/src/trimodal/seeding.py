"""Named random streams derived from a single master seed.

Every source of randomness in the package draws from a stream obtained
via ``stream(master_seed, name)``.  The name is hashed (CRC32) into the
spawn key of a ``SeedSequence``, so streams are independent of each
other, stable across runs and platforms, and insensitive to the order
in which they are created.
"""

from __future__ import annotations

import zlib

import numpy as np

# Stream names used across the package (documented here, not enforced):
#   dataset          -> default generator seed when the config omits one
#   latents          -> identity latent vectors (relative to dataset seed)
#   modality-params  -> modality transforms and shifts
#   v-noise, i-noise -> per-modality observation noise
#   split            -> train/test identity split
#   encoder-init, center-init, classifier-init -> parameter init
#   sampling         -> batch sampling during training
#   eval-gallery     -> gallery draws during evaluation


def sequence(seed: int, name: str) -> np.random.SeedSequence:
    """SeedSequence for the named child stream of ``seed``."""
    return np.random.SeedSequence(entropy=seed, spawn_key=(zlib.crc32(name.encode("utf-8")),))


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for the named child stream of ``seed``."""
    return np.random.default_rng(sequence(seed, name))


def derive_seed(seed: int, name: str) -> int:
    """64-bit integer seed for the named child stream (for nested configs)."""
    return int(sequence(seed, name).generate_state(1, dtype=np.uint64)[0])
