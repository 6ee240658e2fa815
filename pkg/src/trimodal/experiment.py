"""End-to-end experiment plumbing shared by the CLI and the tests:
dataset generation, training runs with run records, retrieval
evaluation with single-shot gallery trials, the six-row ablation grid,
and atomic file output.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .config import EvalConfig, ExperimentConfig, config_from_dict, config_to_dict
from .evalkit import MetricsReport, RetrievalSet, cmc_map, distance_gap, k_reciprocal_rerank, pca2d
from .geometry import pairwise_euclidean
from .model import TrainState, encode, save_checkpoint, train
from .seeding import stream
from .synthgen import SyntheticDataset, generate_dataset, save_dataset

# The six ablation rows: which optional terms join the identity loss.
# Order mirrors the reference ablation protocol: baseline, each single
# addition, the contrast+query pair, then everything.
ABLATION_ROWS = (
    ("id", ()),
    ("id+contrast", ("contrast",)),
    ("id+center", ("center",)),
    ("id+query", ("query_align",)),
    ("id+contrast+query", ("contrast", "query_align")),
    ("full", ("contrast", "center", "query_align")),
)


def atomic_write_bytes(path, data: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class RunRecord:
    """Everything needed to reproduce and inspect one training run."""

    config: dict
    trace: list[dict] = field(default_factory=list)
    metrics: dict | None = None
    wall_clock: float = 0.0
    artifacts: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "trace": self.trace,
            "metrics": self.metrics,
            "wall_clock": self.wall_clock,
            "artifacts": self.artifacts,
        }


def atomic_save(save_fn, obj, path) -> None:
    """Run a file writer against a temp path, then rename into place."""
    tmp = f"{path}.tmp.{os.getpid()}"
    save_fn(obj, tmp)
    os.replace(tmp, path)


def generate_to_file(cfg: ExperimentConfig, out_path) -> SyntheticDataset:
    """Generate the configured dataset and write it atomically."""
    ds = generate_dataset(cfg.generator)
    atomic_save(save_dataset, ds, out_path)
    return ds


def _check_dims(cfg: ExperimentConfig, dataset: SyntheticDataset) -> None:
    if dataset.obs_dim != cfg.generator.obs_dim:
        raise ValueError(
            f"dataset obs_dim {dataset.obs_dim} does not match config "
            f"obs_dim {cfg.generator.obs_dim}"
        )


def run_train(cfg: ExperimentConfig, dataset: SyntheticDataset, out_dir=None) -> tuple[TrainState, RunRecord]:
    """Train per config; optionally write checkpoint + run record."""
    _check_dims(cfg, dataset)
    started = time.monotonic()
    state, trace = train(
        dataset,
        cfg.batch,
        cfg.model,
        cfg.weights,
        cfg.schedule,
        steps=cfg.train.steps,
        k=cfg.resolved_k,
        seed=cfg.seed,
        stopgrad=cfg.train.stopgrad,
        use_contrast=cfg.train.use_contrast,
        use_center=cfg.train.use_center,
        use_query_align=cfg.train.use_query_align,
        cross_consistency=cfg.train.cross_consistency,
    )
    record = RunRecord(config=config_to_dict(cfg), trace=trace, wall_clock=time.monotonic() - started)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt = os.path.join(out_dir, "checkpoint.tmck")
        atomic_save(
            lambda st, p: save_checkpoint(st, p, config=record.config, seed=cfg.seed),
            state,
            ckpt,
        )
        record.artifacts["checkpoint"] = ckpt
        run_path = os.path.join(out_dir, "run.json")
        write_json(run_path, record.to_dict())
        record.artifacts["run_record"] = run_path
    return state, record


def encode_test_split(state_encoder, dataset: SyntheticDataset) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Encoder features for the test split, per modality, with labels."""
    test_ids = dataset.test_ids
    if len(test_ids) == 0:
        raise ValueError("dataset has no test identities")
    n_inst = dataset.instances_per_modality
    out = {}
    for name, m_idx in (("v", 0), ("g", 1), ("i", 2)):
        obs = dataset.observations[test_ids, m_idx].reshape(-1, dataset.obs_dim)
        out[name] = (encode(state_encoder, obs), np.repeat(test_ids, n_inst))
    return out


def evaluate_encoder(
    state_encoder,
    dataset: SyntheticDataset,
    eval_cfg: EvalConfig,
    master_seed: int,
) -> MetricsReport:
    """Single-shot retrieval over ``trials`` seeded gallery draws.

    Queries are every test instance of the query modality; each trial's
    gallery holds one instance per test identity from the other
    modality.  Reported metrics are means over trials; the distance-gap
    statistics come from the same trial retrieval sets.
    """
    feats = encode_test_split(state_encoder, dataset)
    if eval_cfg.direction == "i2v":
        (qf, ql), (gf, gl) = feats["i"], feats["v"]
    else:
        (qf, ql), (gf, gl) = feats["v"], feats["i"]

    n_inst = dataset.instances_per_modality
    n_ids = len(dataset.test_ids)
    rng = stream(master_seed, "eval-gallery")
    rank_sums: dict[int, float] = {}
    ap_sum = 0.0
    pos_sum = neg_sum = gap_sum = 0.0
    base = None
    for _ in range(eval_cfg.trials):
        pick = rng.integers(n_inst, size=n_ids)
        gallery_rows = np.arange(n_ids) * n_inst + pick
        rs = RetrievalSet(qf, ql, gf[gallery_rows], gl[gallery_rows])
        distances = None
        if eval_cfg.rerank:
            k1 = min(eval_cfg.rerank_k1, len(gallery_rows) - 1)
            k2 = min(eval_cfg.rerank_k2, max(k1 - 1, 1))
            distances = k_reciprocal_rerank(
                rs.q_feats, rs.g_feats, k1=k1, k2=k2, lambda_rr=eval_cfg.rerank_lambda
            )
        rep = cmc_map(rs, distances=distances)
        mean_pos, mean_neg, gap = distance_gap(rs)
        for r, val in rep.ranks.items():
            rank_sums[r] = rank_sums.get(r, 0.0) + val
        ap_sum += rep.mean_ap
        pos_sum += mean_pos
        neg_sum += mean_neg
        gap_sum += gap
        base = rep
    t = eval_cfg.trials
    return MetricsReport(
        ranks={r: s / t for r, s in rank_sums.items()},
        mean_ap=ap_sum / t,
        n_query=base.n_query,
        n_gallery=base.n_gallery,
        n_skipped=base.n_skipped,
        mean_pos=pos_sum / t,
        mean_neg=neg_sum / t,
        gap=gap_sum / t,
        trials=t,
    )


def export_eval_artifacts(state_encoder, dataset, eval_cfg: EvalConfig, out_dir) -> dict[str, str]:
    """Write the distance histogram and 2-D projection CSVs.

    histogram.csv: bin_left,bin_right,pos_count,neg_count over all
    query-gallery distances (full galleries, no single-shot draw).
    pca.csv: x,y,identity,modality for the test features of the two real
    modalities.
    """
    os.makedirs(out_dir, exist_ok=True)
    feats = encode_test_split(state_encoder, dataset)
    if eval_cfg.direction == "i2v":
        (qf, ql), (gf, gl) = feats["i"], feats["v"]
    else:
        (qf, ql), (gf, gl) = feats["v"], feats["i"]
    dist = pairwise_euclidean(qf, gf)
    pos_mask = ql[:, None] == gl[None, :]
    pos = dist[pos_mask]
    neg = dist[~pos_mask]
    edges = np.histogram_bin_edges(dist.ravel(), bins=50)
    pos_counts, _ = np.histogram(pos, bins=edges)
    neg_counts, _ = np.histogram(neg, bins=edges)

    hist_path = os.path.join(out_dir, "histogram.csv")
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["bin_left", "bin_right", "pos_count", "neg_count"])
    for left, right, pc, nc in zip(edges[:-1], edges[1:], pos_counts, neg_counts):
        writer.writerow([f"{left:.10g}", f"{right:.10g}", int(pc), int(nc)])
    atomic_write_text(hist_path, buf.getvalue())

    stacked = np.vstack([qf, gf])
    coords = pca2d(stacked)
    labels = np.concatenate([ql, gl])
    modality = ["i" if eval_cfg.direction == "i2v" else "v"] * len(ql) + [
        "v" if eval_cfg.direction == "i2v" else "i"
    ] * len(gl)
    pca_path = os.path.join(out_dir, "pca.csv")
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["x", "y", "identity", "modality"])
    for (x, y), ident, mod in zip(coords, labels, modality):
        writer.writerow([f"{x:.10g}", f"{y:.10g}", int(ident), mod])
    atomic_write_text(pca_path, buf.getvalue())
    return {"histogram": hist_path, "pca": pca_path}


def run_eval(
    cfg: ExperimentConfig,
    state: TrainState,
    dataset: SyntheticDataset,
    out_dir=None,
) -> MetricsReport:
    """Evaluate a trained state; optionally write metrics + CSV artifacts."""
    report = evaluate_encoder(state.encoder, dataset, cfg.eval, cfg.seed)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_json(os.path.join(out_dir, "metrics.json"), report.to_dict())
        export_eval_artifacts(state.encoder, dataset, cfg.eval, out_dir)
    return report


def _row_config(cfg: ExperimentConfig, terms: tuple[str, ...], master_seed: int) -> ExperimentConfig:
    data = config_to_dict(cfg)
    data["seed"] = master_seed
    data["generator"].pop("seed", None)
    data["train"]["use_contrast"] = "contrast" in terms
    data["train"]["use_center"] = "center" in terms
    data["train"]["use_query_align"] = "query_align" in terms
    return config_from_dict(data)


@dataclass
class AblationRow:
    label: str
    terms: tuple[str, ...]
    rank1: list[float] = field(default_factory=list)
    mean_ap: list[float] = field(default_factory=list)
    gap: list[float] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    def mean(self, values: list[float]) -> float:
        return float(np.mean(values)) if values else float("nan")


def run_ablation(cfg: ExperimentConfig, n_seeds: int, out_dir=None) -> list[AblationRow]:
    """The six-row term-ablation grid over ``n_seeds`` master seeds.

    Within one seed every row trains on the same dataset.  Per-cell
    failures are recorded in the row and do not abort the grid.
    """
    rows = [AblationRow(label, terms) for label, terms in ABLATION_ROWS]
    for s in range(n_seeds):
        master = cfg.seed + s
        dataset = generate_dataset(_row_config(cfg, (), master).generator)
        for row in rows:
            row_cfg = _row_config(cfg, row.terms, master)
            try:
                state, _ = run_train(row_cfg, dataset)
                report = run_eval(row_cfg, state, dataset)
            except Exception as exc:  # noqa: BLE001 - cell errors are data
                row.errors.append(f"seed {master}: {exc}")
                continue
            row.rank1.append(report.ranks[1])
            row.mean_ap.append(report.mean_ap)
            row.gap.append(report.gap)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_ablation_csv(os.path.join(out_dir, "ablation.csv"), rows, n_seeds)
        write_json(
            os.path.join(out_dir, "ablation.json"),
            [
                {
                    "label": r.label,
                    "terms": list(r.terms),
                    "rank1": r.rank1,
                    "mean_ap": r.mean_ap,
                    "gap": r.gap,
                    "errors": r.errors,
                }
                for r in rows
            ],
        )
    return rows


def _write_ablation_csv(path, rows: list[AblationRow], n_seeds: int) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        [
            "label",
            "contrast",
            "center",
            "query_align",
            "seeds",
            "rank1_mean",
            "map_mean",
            "gap_mean",
            "errors",
        ]
    )
    for row in rows:
        writer.writerow(
            [
                row.label,
                int("contrast" in row.terms),
                int("center" in row.terms),
                int("query_align" in row.terms),
                n_seeds,
                f"{row.mean(row.rank1):.6f}",
                f"{row.mean(row.mean_ap):.6f}",
                f"{row.mean(row.gap):.6f}",
                " | ".join(row.errors),
            ]
        )
    atomic_write_text(path, buf.getvalue())
