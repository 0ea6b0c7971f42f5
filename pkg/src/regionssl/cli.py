"""Command-line entry point.

Subcommands share one layered config: built-in defaults, then an optional
YAML file, then ``--set section.key=value`` overrides. The resolved config
is stored inside every checkpoint; evaluation commands read it back from
there so reports always describe the run that produced them.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from .config import RunConfig, config_to_yaml, resolve_config
from .data import (SyntheticFaceSpec, make_source, synth_batch,
                   synth_labeled_dataset)
from .errors import CheckpointError, ConfigurationError, DatasetError
from .evaluate import export_heatmaps, linear_probe, score_discovery
from .networks import build_model_pair
from .trainer import Trainer, restore_pair


def _resolved(config_path: str | None, overrides: tuple[str, ...],
              seed: int | None) -> RunConfig:
    cfg = resolve_config(config_path, list(overrides))
    if seed is not None:
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, seed=seed))
    cfg.validate()
    return cfg


def _restore(ckpt: str, seed: int | None):
    pair, cfg, step = restore_pair(ckpt)
    if seed is not None:
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, seed=seed))
    return pair, cfg, step


@click.group()
@click.option("--seed", type=int, default=None,
              help="Override the configured seed for this invocation.")
@click.pass_context
def cli(ctx: click.Context, seed: int | None) -> None:
    """Self-supervised facial region pre-training toolkit."""
    ctx.obj = {"seed": seed}


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="YAML config file; omitted fields keep their defaults.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Dotted-path override, e.g. loss.lambda_r=0.2.")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Output directory (checkpoints, scalar log).")
@click.option("--resume", type=click.Path(exists=True), default=None,
              help="Checkpoint to continue from.")
@click.pass_context
def pretrain(ctx, config_path, overrides, out_dir, resume):
    """Run the two-branch pre-training loop."""
    cfg = _resolved(config_path, overrides, ctx.obj["seed"])
    trainer = Trainer(cfg, output_dir=out_dir)
    trainer.output_dir.mkdir(parents=True, exist_ok=True)
    (trainer.output_dir / "config.yaml").write_text(config_to_yaml(cfg))
    source = make_source(cfg.data, cfg.train.seed)
    final = trainer.fit(source, resume=resume)
    click.echo(f"final checkpoint: {final}")


@cli.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Where to write the JSON report (default: stdout only).")
@click.option("--random-baseline", is_flag=True,
              help="Also probe a freshly initialized encoder for comparison.")
@click.pass_context
def probe(ctx, ckpt, out_path, random_baseline):
    """Linear probe on frozen pooled features, mouth-state task."""
    pair, cfg, _ = _restore(ckpt, ctx.obj["seed"])
    seed = cfg.train.seed
    spec = SyntheticFaceSpec.from_data_config(cfg.data)
    train_x, train_y = synth_labeled_dataset(spec, cfg.eval.probe_train_size, seed)
    test_x, test_y = synth_labeled_dataset(spec, cfg.eval.probe_test_size, seed + 1)
    report = linear_probe(pair.online, train_x, train_y, test_x, test_y,
                          cfg.eval, cfg.augmentation, seed=seed,
                          task="mouth-state")
    payload = {"pretrained": dataclasses.asdict(report)}
    if random_baseline:
        fresh = build_model_pair(cfg.model, seed=seed + 17)
        baseline = linear_probe(fresh.online, train_x, train_y, test_x, test_y,
                                cfg.eval, cfg.augmentation, seed=seed,
                                task="mouth-state/random-encoder")
        payload["random_baseline"] = dataclasses.asdict(baseline)
    text = json.dumps(payload, indent=2)
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(text)
    click.echo(text)


@cli.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--images", "image_dir", type=click.Path(exists=True), default=None,
              help="Directory of input images; defaults to synthetic faces.")
@click.option("--count", type=int, default=4, help="Images to export.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_context
def heatmaps(ctx, ckpt, image_dir, count, out_dir):
    """Export per-region heatmap PNGs, overlays, and raw arrays."""
    pair, cfg, _ = _restore(ckpt, ctx.obj["seed"])
    if image_dir is not None:
        data_cfg = dataclasses.replace(cfg.data, source="folder",
                                       folder_path=image_dir)
        source = make_source(data_cfg, cfg.train.seed)
    else:
        source = make_source(cfg.data, cfg.train.seed)
    count = min(count, source.n_items)
    batch = source.batch(range(count))
    written = export_heatmaps(pair.online, batch, out_dir, cfg.augmentation,
                              cfg.loss.assign_temperature)
    click.echo(f"wrote {len(written)} files to {out_dir}")


@cli.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Where to write the JSON report (default: stdout only).")
@click.pass_context
def discover(ctx, ckpt, out_path):
    """Score heatmaps against synthetic ground-truth part masks."""
    pair, cfg, _ = _restore(ckpt, ctx.obj["seed"])
    source = make_source(dataclasses.replace(cfg.data, source="synthetic"),
                         cfg.train.seed)
    report = score_discovery(pair.online, source, cfg.eval, cfg.augmentation,
                             cfg.loss.assign_temperature)
    text = report.to_json()
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(text)
    click.echo(text)


@cli.command("synth-data")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--count", type=int, default=64)
@click.option("--image-size", type=int, default=96)
@click.option("--parts", "n_parts", type=int, default=7)
@click.pass_context
def synth_data(ctx, out_dir, count, image_size, n_parts):
    """Render synthetic faces to PNG files (plus a manifest)."""
    if count < 1:
        raise click.UsageError("--count must be >= 1")
    seed = ctx.obj["seed"] if ctx.obj["seed"] is not None else 0
    spec = SyntheticFaceSpec(canvas_size=image_size, n_parts=n_parts)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, _ = synth_batch(spec, count, seed)
    names = []
    for i in range(count):
        array = (images[i].permute(1, 2, 0).numpy() * 255.0 + 0.5).astype(np.uint8)
        name = f"face{i:05d}.png"
        Image.fromarray(array).save(out / name)
        names.append(name)
    (out / "manifest.json").write_text(json.dumps(
        {"count": count, "image_size": image_size, "seed": seed,
         "files": names}, indent=2))
    click.echo(f"wrote {count} images to {out}")


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except ConfigurationError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        return 1
    except (DatasetError, CheckpointError, OSError, RuntimeError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
