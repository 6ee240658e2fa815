"""Command-line entry point: generate, train, eval, ablate, gradcheck."""

from __future__ import annotations

import sys

import click

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config, reference_config
from .experiment import (
    generate_to_file,
    run_ablation,
    run_eval,
    run_train,
)
from .gradcheck import run_suite
from .model import load_checkpoint
from .synthgen import load_dataset


def _load(config_path, seed) -> ExperimentConfig:
    try:
        if config_path is None:
            return reference_config(0 if seed is None else seed)
        return load_config(config_path, seed_override=seed)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from exc


@click.group()
@click.version_option(version=__version__, prog_name="trimodal")
def main():
    """Cross-modal metric learning sandbox: synthetic data, training,
    retrieval evaluation, ablations, and gradient checks."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Override the master seed.")
def generate(config_path, out, seed):
    """Generate a synthetic dataset file."""
    cfg = _load(config_path, seed)
    ds = generate_to_file(cfg, out)
    click.echo(
        f"wrote {out}: {ds.num_identities} identities x 3 modalities x "
        f"{ds.instances_per_modality} instances (obs_dim {ds.obs_dim}), "
        f"{len(ds.train_ids)} train / {len(ds.test_ids)} test"
    )


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Override the master seed.")
@click.option("--steps", type=int, default=None, help="Override the step count.")
@click.option("--no-stopgrad", is_flag=True, help="Let the g partition update the encoder.")
def train(config_path, dataset_path, out, seed, steps, no_stopgrad):
    """Train an encoder; writes checkpoint.tmck and run.json."""
    cfg = _load(config_path, seed)
    if steps is not None or no_stopgrad:
        from dataclasses import replace

        train_cfg = cfg.train
        if steps is not None:
            train_cfg = replace(train_cfg, steps=steps)
        if no_stopgrad:
            train_cfg = replace(train_cfg, stopgrad=False)
        cfg = replace(cfg, train=train_cfg)
    dataset = load_dataset(dataset_path)
    try:
        state, record = run_train(cfg, dataset, out_dir=out)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    last = record.trace[-1]["total"] if record.trace else float("nan")
    click.echo(
        f"trained {cfg.train.steps if steps is None else steps} steps "
        f"in {record.wall_clock:.2f}s; final total loss {last:.6f}; "
        f"artifacts in {out}"
    )


@main.command("eval")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Override the master seed.")
@click.option("--direction", type=click.Choice(["i2v", "v2i"]), default=None)
@click.option("--rerank/--no-rerank", default=None)
def eval_cmd(config_path, checkpoint_path, dataset_path, out, seed, direction, rerank):
    """Evaluate a checkpoint; writes metrics.json, histogram.csv, pca.csv."""
    cfg = _load(config_path, seed)
    if direction is not None or rerank is not None:
        from dataclasses import replace

        eval_cfg = cfg.eval
        if direction is not None:
            eval_cfg = replace(eval_cfg, direction=direction)
        if rerank is not None:
            eval_cfg = replace(eval_cfg, rerank=rerank)
        cfg = replace(cfg, eval=eval_cfg)
    dataset = load_dataset(dataset_path)
    state = load_checkpoint(checkpoint_path)
    try:
        report = run_eval(cfg, state, dataset, out_dir=out)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(
        f"direction {cfg.eval.direction} rerank {cfg.eval.rerank}: "
        f"rank-1 {report.ranks[1]:.4f} mAP {report.mean_ap:.4f} "
        f"gap {report.gap:.4f} ({report.trials} trials); metrics in {out}"
    )


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Override the master seed.")
@click.option("--seeds", "n_seeds", type=int, default=3, show_default=True)
def ablate(config_path, out, seed, n_seeds):
    """Run the six-row loss-term ablation grid across seeds."""
    cfg = _load(config_path, seed)
    rows = run_ablation(cfg, n_seeds, out_dir=out)
    click.echo(f"{'row':<20} {'rank1':>8} {'mAP':>8} {'gap':>8}")
    for row in rows:
        click.echo(
            f"{row.label:<20} {row.mean(row.rank1):>8.4f} "
            f"{row.mean(row.mean_ap):>8.4f} {row.mean(row.gap):>8.4f}"
            + (f"  [{len(row.errors)} errors]" if row.errors else "")
        )
    click.echo(f"table written to {out}/ablation.csv")


@main.command()
@click.option("--batches", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--corrupt", "corrupt_term", type=str, default=None, hidden=True)
def gradcheck(batches, seed, corrupt_term):
    """Finite-difference check of every loss term's analytic gradient."""
    checks = run_suite(n_batches=batches, base_seed=seed, corrupt_term=corrupt_term)
    failed = [c for c in checks if not c.passed]
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        click.echo(f"{status}  {c.term:<15} max relative error {c.max_rel_err:.3e}")
    if failed:
        click.echo(f"{len(failed)} term(s) exceeded tolerance {checks[0].tolerance:g}")
        sys.exit(1)


if __name__ == "__main__":
    main()
