"""Identity-balanced batch sampling and the three-partition batch types.

A batch holds P identities with N instances per identity per modality.
The v and g partitions are row-aligned: row r of g is the transition
view of the v instance in row r.  The i partition is sampled
independently, mirroring the fact that real infrared captures have no
per-instance alignment with visible ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synthgen import SyntheticDataset


@dataclass(frozen=True)
class BatchSpec:
    """P identities per batch, N instances per identity per modality."""

    p: int
    n: int

    def __post_init__(self):
        if self.p < 2:
            raise ValueError("p must be >= 2 (the negative loss needs two identities)")
        if self.n < 1:
            raise ValueError("n must be >= 1")


def _check_partitions(v, g, i, labels):
    if not (v.shape == g.shape == i.shape):
        raise ValueError(f"partition shapes disagree: {v.shape}, {g.shape}, {i.shape}")
    if labels.shape != (v.shape[0],):
        raise ValueError("labels length must match partition rows")
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 1 or counts.min() != counts.max():
        raise ValueError("each identity must appear the same number of times")


@dataclass
class ObservationBatch:
    """Raw observations for one batch, partitioned by modality."""

    v: np.ndarray
    g: np.ndarray
    i: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        _check_partitions(self.v, self.g, self.i, self.labels)


@dataclass
class EmbeddingBatch:
    """Encoded features for one batch, partitioned by modality.

    ``g_detached`` records whether the g partition was produced without a
    gradient path; when true, no loss gradient through g may reach
    encoder parameters.
    """

    v: np.ndarray
    g: np.ndarray
    i: np.ndarray
    labels: np.ndarray
    g_detached: bool = True

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        _check_partitions(self.v, self.g, self.i, self.labels)

    @property
    def rows(self) -> int:
        return self.v.shape[0]


def pk_sample(
    dataset: SyntheticDataset,
    spec: BatchSpec,
    rng: np.random.Generator,
) -> ObservationBatch:
    """Draw P train identities and N instances each, without replacement.

    The g rows are taken by index from the sampled v instances (keeping
    the instance alignment); i instances are drawn independently.
    """
    train = dataset.train_ids
    if len(train) < spec.p:
        raise ValueError(
            f"batch needs {spec.p} identities but the train split has {len(train)}"
        )
    n_inst = dataset.instances_per_modality
    if n_inst < spec.n:
        raise ValueError(
            f"batch needs {spec.n} instances per identity but the dataset has {n_inst}"
        )

    ids = rng.choice(train, size=spec.p, replace=False)
    v_rows, g_rows, i_rows = [], [], []
    for ident in ids:
        v_idx = rng.choice(n_inst, size=spec.n, replace=False)
        i_idx = rng.choice(n_inst, size=spec.n, replace=False)
        v_rows.append(dataset.observations[ident, 0, v_idx])
        g_rows.append(dataset.observations[ident, 1, v_idx])
        i_rows.append(dataset.observations[ident, 2, i_idx])
    return ObservationBatch(
        v=np.vstack(v_rows),
        g=np.vstack(g_rows),
        i=np.vstack(i_rows),
        labels=np.repeat(ids, spec.n),
    )


def reindex_by_identity(batch) -> dict[int, np.ndarray]:
    """Row indices grouped by identity, in first-appearance order.

    Labels are shared across modalities, so one index set per identity
    applies to each of the three partitions.
    """
    groups: dict[int, list[int]] = {}
    for row, label in enumerate(np.asarray(batch.labels)):
        groups.setdefault(int(label), []).append(row)
    return {ident: np.asarray(rows, dtype=np.intp) for ident, rows in groups.items()}
