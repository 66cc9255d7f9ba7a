"""
Command-line interface.

    mcdnet synth     generate a synthetic dataset + manifest
    mcdnet stats     class proportions and moraine size histograms
    mcdnet train     train from a run config, write checkpoint + history
    mcdnet eval      metrics row for a checkpoint on a split
    mcdnet xregion   bidirectional cross-region table
    mcdnet ablation  MobileNetV2 vs MobileNetV2 + CBAM table
    mcdnet infer     mask + overlay PNG for one image
    mcdnet gradcam   Grad-CAM heatmap PNG for one image
    mcdnet flops     parameter / MAC / FLOP counts and per-layer CSV

Exit codes: 0 success, 2 usage or config error, 1 runtime error.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Optional

import click
import colorama

from version import VERSION

from .checkpoint import Checkpoint, load_checkpoint, restore_model, save_checkpoint
from .complexity import profile
from .config import RunConfig, Settings, load_run_config, load_settings
from .data import Sample, compute_stats, generate_synthetic, load_dataset, random_split, write_dataset
from .errors import ConfigError, McdNetError
from .gradcam import CAM_LAYERS, grad_cam
from .metrics import evaluate
from .model import build_model, predict_image
from .report import (
    metrics_row,
    plot_area_histogram,
    plot_history,
    plot_pixel_distribution,
    write_area_histogram_csv,
    write_heatmap_png,
    write_history_csv,
    write_layers_csv,
    write_metrics_csv,
    write_overlay_png,
    write_resolved_config,
    write_stats_csv,
    write_xregion_csv,
)
from .tensor import checked_mode
from .training import carve_validation, train_loop
from .utils import ensure_dir, read_rgb_png, write_mask_png
from .xregion import cross_region_eval

logger = logging.getLogger("mcdnet.cli")

CHECKPOINT_NAME = "checkpoint.mcdn"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class McdNetGroup(click.Group):
    """Maps library errors onto exit codes: ConfigError -> 2, other failures -> 1."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except ConfigError as e:
            raise click.UsageError(f"{type(e).__name__}: {e}", ctx) from e
        except (McdNetError, OSError) as e:
            raise click.ClickException(f"{type(e).__name__}: {e}") from e


def _settings(ctx: click.Context) -> Settings:
    return ctx.find_object(Settings) or load_settings()


def _run_config(path: Path) -> RunConfig:
    cfg = load_run_config(path)
    logger.info("Loaded run config %s (output_dir=%s)", path, cfg.output_dir)
    return cfg


def _resolution(cfg: RunConfig, settings: Settings, res: Optional[int]) -> int:
    if res is not None:
        return res
    return cfg.report_resolution if "report_resolution" in cfg.model_fields_set else settings.report_resolution


def _splits(cfg: RunConfig) -> tuple[List[Sample], List[Sample]]:
    samples = load_dataset(cfg.data.manifest)
    return random_split(samples, cfg.data.split_ratio, cfg.seed)


@click.group(cls=McdNetGroup)
@click.version_option(VERSION, prog_name="mcdnet")
@click.pass_context
def cli(ctx: click.Context) -> None:
    """Moraine segmentation: data, training, evaluation and reports."""
    colorama.just_fix_windows_console()
    settings = load_settings()
    logging.basicConfig(level=settings.log_level, format=LOG_FORMAT)
    ctx.obj = settings
    if settings.checked:
        ctx.with_resource(checked_mode(True))
    logger.info("Starting mcdnet v%s", VERSION)


@cli.command()
@click.option("--n", "n", type=click.IntRange(min=1), default=16, show_default=True)
@click.option("--size", type=click.IntRange(min=16), default=64, show_default=True)
@click.option("--fraction", type=click.FloatRange(0.0, 1.0, min_open=True, max_open=True), default=0.1,
              show_default=True, help="Target moraine fraction per sample.")
@click.option("--tolerance", type=click.FloatRange(0.0, 0.5), default=0.05, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True)
def synth(n: int, size: int, fraction: float, tolerance: float, seed: int, out: Path) -> None:
    """Generate a synthetic dataset with PNG pairs and manifest.csv."""
    fraction_range = (fraction - tolerance, fraction + tolerance)
    samples = generate_synthetic(n, size, fraction_range, seed)
    manifest = write_dataset(samples, out)
    write_resolved_config({"command": "synth", "n": n, "size": size, "fraction": fraction,
                           "tolerance": tolerance, "seed": seed}, out)
    click.echo(f"wrote {len(samples)} samples to {manifest}")


@cli.command()
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--bins", type=click.IntRange(min=1), default=10, show_default=True)
@click.pass_context
def stats(ctx: click.Context, manifest: Path, out: Optional[Path], bins: int) -> None:
    """Class proportions, coverage and size histograms."""
    out = ensure_dir(out or Path(_settings(ctx).output_dir) / "stats")
    result = compute_stats(load_dataset(manifest), bins=bins)
    write_stats_csv(result, out / "stats.csv")
    write_area_histogram_csv(result, out / "area_histogram.csv")
    plot_pixel_distribution(result, out / "pixel_distribution.svg")
    plot_area_histogram(result, out / "area_histogram.svg")
    write_resolved_config({"command": "stats", "manifest": str(manifest.resolve()), "bins": bins}, out)
    bg, fg = result.proportions
    click.echo(f"samples={result.n_samples} background={bg:.4f} moraine={fg:.4f}")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
def train(config_path: Path) -> None:
    """Train on the configured training split."""
    cfg = _run_config(config_path)
    out = ensure_dir(cfg.output_dir)
    train_set, _ = _splits(cfg)
    model = build_model(cfg.model, seed=cfg.seed)
    ckpt, history = train_loop(model, train_set, cfg.train, cfg.augment)
    save_checkpoint(ckpt, out / CHECKPOINT_NAME)
    write_history_csv(history, out / "history.csv")
    plot_history(history, out / "training_curves.svg")
    write_resolved_config(cfg, out)
    click.echo(f"best epoch {ckpt.epoch}: val mIoU {ckpt.best_miou:.4f} ({len(history)} epochs)")


@cli.command("eval")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--split", type=click.Choice(["train", "val", "test", "all"]), default="test", show_default=True,
              help="val is the validation carve of the training split that train scored epochs on.")
@click.pass_context
def eval_cmd(ctx: click.Context, config_path: Path, checkpoint_path: Path, split: str) -> None:
    """Write a metrics row for a checkpoint."""
    cfg = _run_config(config_path)
    out = ensure_dir(cfg.output_dir)
    model = restore_model(load_checkpoint(checkpoint_path))
    train_set, test_set = _splits(cfg)
    if split == "val":
        samples = carve_validation(train_set, cfg.train.val_fraction, cfg.train.seed)[1]
    else:
        samples = {"train": train_set, "test": test_set, "all": train_set + test_set}[split]
    metrics = evaluate(model, samples, cfg.train.eval_batch_size)
    res = _resolution(cfg, _settings(ctx), None)
    complexity = profile(model, res, res)
    write_metrics_csv([metrics_row(model.config.label, complexity, metrics)], out / f"metrics_{split}.csv")
    write_resolved_config(cfg, out)
    click.echo(f"{split}: mIoU={metrics.miou:.6f} dice={metrics.dice:.6f} "
               f"precision={metrics.precision:.6f} recall={metrics.recall:.6f} PA={metrics.pixel_acc:.6f}")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
def xregion(config_path: Path) -> None:
    """Train per region and test within and across regions."""
    cfg = _run_config(config_path)
    out = ensure_dir(cfg.output_dir)
    rows = cross_region_eval(load_dataset(cfg.data.manifest), cfg.data.regions, cfg.model, cfg.train,
                             cfg.augment, cfg.seed, cfg.data.split_ratio)
    write_xregion_csv(rows, out / "xregion.csv")
    write_resolved_config(cfg, out)
    for r in rows:
        click.echo(f"{r.train_region} -> {r.test_region}: mIoU={r.metrics.miou:.4f} delta={r.delta_miou:+.4f}")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.pass_context
def ablation(ctx: click.Context, config_path: Path) -> None:
    """Train both backbone variants under one seed and tabulate them."""
    cfg = _run_config(config_path)
    out = ensure_dir(cfg.output_dir)
    train_set, test_set = _splits(cfg)
    res = _resolution(cfg, _settings(ctx), None)
    rows = []
    for use_cbam in (False, True):
        model_cfg = cfg.model.model_copy(update={"use_cbam": use_cbam})
        model = build_model(model_cfg, seed=cfg.seed)
        train_loop(model, train_set, cfg.train, cfg.augment)
        metrics = evaluate(model, test_set, cfg.train.eval_batch_size)
        rows.append(metrics_row(model_cfg.label, profile(model, res, res), metrics))
        click.echo(f"{model_cfg.label}: params={rows[-1][1]} mIoU={metrics.miou:.4f}")
    write_metrics_csv(rows, out / "ablation.csv")
    write_resolved_config(cfg, out)


@cli.command()
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--image", "image_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True)
def infer(checkpoint_path: Path, image_path: Path, out: Path) -> None:
    """Predicted mask ({0,255}) and colour overlay for one image."""
    out = ensure_dir(out)
    ckpt = load_checkpoint(checkpoint_path)
    model = restore_model(ckpt)
    image = read_rgb_png(image_path)
    mask = predict_image(model, image)
    stem = image_path.stem
    write_mask_png(out / f"{stem}_mask.png", mask)
    write_overlay_png(out / f"{stem}_overlay.png", image, mask)
    _write_checkpoint_provenance(ckpt, checkpoint_path, out, command="infer", image=str(image_path.resolve()))
    click.echo(f"moraine pixels: {int(mask.sum())} / {mask.size}")


@cli.command()
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--image", "image_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--class", "target_class", type=click.IntRange(min=0), default=1, show_default=True)
@click.option("--layer", type=click.Choice(CAM_LAYERS), default=None, help="Defaults to F_att, or F_base without CBAM.")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True)
def gradcam(checkpoint_path: Path, image_path: Path, target_class: int, layer: Optional[str], out: Path) -> None:
    """Grad-CAM heatmap PNG for one image."""
    out = ensure_dir(out)
    ckpt = load_checkpoint(checkpoint_path)
    model = restore_model(ckpt)
    image = read_rgb_png(image_path)
    cam = grad_cam(model, image, target_class, layer)
    write_heatmap_png(out / f"{image_path.stem}_gradcam.png", cam.heatmap, image)
    _write_checkpoint_provenance(ckpt, checkpoint_path, out, command="gradcam", image=str(image_path.resolve()),
                                 target_class=target_class, layer=cam.target_layer)
    click.echo(f"layer {cam.target_layer}, class {cam.target_class}: peak {float(cam.heatmap.max()):.3f}")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--res", type=click.IntRange(min=16), default=None, help="Square input resolution.")
@click.pass_context
def flops(ctx: click.Context, config_path: Path, res: Optional[int]) -> None:
    """Parameter, MAC and FLOP counts with a per-layer CSV."""
    cfg = _run_config(config_path)
    out = ensure_dir(cfg.output_dir)
    res = _resolution(cfg, _settings(ctx), res)
    report = profile(build_model(cfg.model, seed=cfg.seed), res, res)
    write_layers_csv(report, out / f"layers_{res}.csv")
    write_resolved_config(cfg, out)
    click.echo(f"{cfg.model.label} @ {res}x{res}: params={report.params} macs={report.macs} "
               f"flops={report.flops} conv_macs={report.conv_macs}")


def _write_checkpoint_provenance(ckpt: Checkpoint, path: Path, out: Path, **extra) -> None:
    write_resolved_config({**extra, "checkpoint": str(path.resolve()), "epoch": ckpt.epoch,
                           "best_miou": ckpt.best_miou, "model": ckpt.config}, out)


def main() -> None:
    cli(prog_name="mcdnet")
