"""Command-line interface: train, attack, probe, analyze, plot, run."""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click

from .config import ExperimentConfig
from .errors import ConfigError, DataError, StageFailure

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_STAGE = 4


def _load_config(config_path, out, seed, limit, precision) -> ExperimentConfig:
    cfg = ExperimentConfig.load(config_path)
    if out is not None:
        cfg = cfg.replace(output_dir=str(out))
    if seed is not None:
        cfg = cfg.replace(master_seed=seed)
    if limit is not None:
        cfg = cfg.replace(sample_limit=limit)
    if precision is not None:
        cfg = cfg.replace(precision=precision)
    return cfg


def _common(f):
    f = click.option("--config", "config_path", required=True,
                     type=click.Path(), help="experiment JSON config")(f)
    f = click.option("--out", default=None, type=click.Path(),
                     help="override output_dir")(f)
    f = click.option("--seed", default=None, type=int, help="override master_seed")(f)
    f = click.option("--limit", default=None, type=int, help="override sample_limit")(f)
    f = click.option("--precision", default=None,
                     type=click.Choice(["f32", "f64"]), help="override precision")(f)
    return f


@click.group()
def main():
    """Robustness experiments for bottleneck-injected classifiers."""


def _run_guarded(fn):
    try:
        fn()
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except DataError as e:
        click.echo(f"data error: {e}", err=True)
        sys.exit(EXIT_DATA)
    except StageFailure as e:
        click.echo(f"stage failure: {e}", err=True)
        sys.exit(EXIT_STAGE)


@main.command()
@_common
def run(config_path, out, seed, limit, precision):
    """Full pipeline: train, attack, analyze, plot."""

    def go():
        from .harness import run_experiment

        cfg = _load_config(config_path, out, seed, limit, precision)
        report, root = run_experiment(cfg)
        click.echo(f"report written to {root}")
        for key in sorted(report.rows):
            r = report.rows[key]
            click.echo(f"  {r.tier:3s} {r.objective:5s} {r.attack:8s} "
                       f"clean {r.clean_acc:.3f} adv {r.adv_acc:.3f} "
                       f"drop {r.drop_points:6.2f}")

    _run_guarded(go)


@main.command()
@_common
def train(config_path, out, seed, limit, precision):
    """Train (or resume) every configured model; no attacks."""

    def go():
        from .harness import StageManifests, load_dataset, stage_train

        cfg = _load_config(config_path, out, seed, limit, precision)
        root = Path(cfg.output_dir)
        root.mkdir(parents=True, exist_ok=True)
        try:
            dataset = load_dataset(cfg)
        except (ConfigError, DataError):
            raise
        stack = stage_train(cfg, dataset, StageManifests(root, cfg.hash()), root)
        for (tier, objective), model in sorted(stack.models.items()):
            from .objectives import accuracy

            acc = accuracy(model, dataset.test_x[:2000], dataset.test_y[:2000])
            click.echo(f"  {tier} {objective}: test acc {acc:.4f}")

    _run_guarded(go)


@main.command()
@_common
def attack(config_path, out, seed, limit, precision):
    """Run the configured attacks against already-trained models."""

    def go():
        from .harness import (
            StageManifests, load_dataset, stage_attacks, stage_tabacof, stage_train,
        )

        cfg = _load_config(config_path, out, seed, limit, precision)
        root = Path(cfg.output_dir)
        root.mkdir(parents=True, exist_ok=True)
        dataset = load_dataset(cfg)
        manifests = StageManifests(root, cfg.hash())
        stack = stage_train(cfg, dataset, manifests, root)
        stage_attacks(cfg, dataset, stack, manifests, root)
        stage_tabacof(cfg, dataset, stack, manifests, root)
        click.echo(f"attack outputs under {root / 'attacks'}")

    _run_guarded(go)


@main.command()
@_common
@click.option("--tier", default="D1", type=click.Choice(["D1", "D2", "D3"]))
@click.option("--objective", default="dvib",
              type=click.Choice(["base", "svbi", "dvib"]))
@click.option("--layers", default=None,
              help="comma-separated trunk layer indices (default: spread)")
@click.option("--epochs", default=5, type=int, help="probe training epochs")
def probe(config_path, out, seed, limit, precision, tier, objective, layers, epochs):
    """Train per-layer reconstruction probes on a trained model."""

    def go():
        from .harness import StageManifests, load_dataset, stage_train
        from .objectives import train_layer_probe
        from .plots import plot_probe_curve

        cfg = _load_config(config_path, out, seed, limit, precision)
        root = Path(cfg.output_dir)
        root.mkdir(parents=True, exist_ok=True)
        dataset = load_dataset(cfg)
        manifests = StageManifests(root, cfg.hash())
        stack = stage_train(cfg, dataset, manifests, root)
        model = stack.get(tier, objective)
        n_layers = len(model.trunk)
        if layers:
            idx = [int(v) for v in layers.split(",")]
        else:
            idx = sorted({0, n_layers // 3, 2 * n_layers // 3, n_layers})
        rows = []
        for layer in idx:
            _, stats = train_layer_probe(model, layer, dataset, epochs=epochs,
                                         seed=cfg.master_seed)
            rows.append({"layer": layer, "mse": stats["mse"], "psnr": stats["psnr"]})
            click.echo(f"  layer {layer:3d}: mse {stats['mse']:.5f} "
                       f"psnr {stats['psnr']:.2f}")
        probe_csv = root / f"probe_{tier}_{objective}.csv"
        with open(probe_csv, "w", newline="") as f:
            f.write(f"# config_hash={cfg.hash()}\n")
            writer = csv.DictWriter(f, fieldnames=["layer", "mse", "psnr"],
                                    lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        plot_probe_curve(rows, root, cfg.hash())
        click.echo(f"probe results in {probe_csv}")

    _run_guarded(go)


@main.command()
@_common
def analyze(config_path, out, seed, limit, precision):
    """Aggregate attack outputs into report.json + CSV tables."""

    def go():
        from .harness import StageManifests, load_dataset, stage_analyze, stage_train

        cfg = _load_config(config_path, out, seed, limit, precision)
        root = Path(cfg.output_dir)
        dataset = load_dataset(cfg)
        manifests = StageManifests(root, cfg.hash())
        stack = stage_train(cfg, dataset, manifests, root)
        stage_analyze(cfg, dataset, stack, manifests, root)
        click.echo(f"report written to {root / 'report.json'}")

    _run_guarded(go)


@main.command()
@_common
def plot(config_path, out, seed, limit, precision):
    """Render SVG figures from an existing report.json."""

    def go():
        from .harness import load_report
        from .plots import emit_plots

        cfg = _load_config(config_path, out, seed, limit, precision)
        root = Path(cfg.output_dir)
        report = load_report(root)
        try:
            paths = emit_plots(report, root, cfg.hash())
        except Exception as e:
            raise StageFailure("plot", str(e)) from e
        for p in paths:
            click.echo(f"  wrote {p}")

    _run_guarded(go)


if __name__ == "__main__":
    main()
