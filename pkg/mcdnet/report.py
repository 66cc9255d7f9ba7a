"""
Report artifacts: schema-stable CSV tables, SVG figures and PNG rasters.

CSV headers:
    history.csv            epoch,loss,val_miou,lr
    metrics.csv            model,params,macs,flops,miou,recall,precision,dice,pixel_acc
    xregion.csv            train_region,test_region,miou,mrecall,mprecision,mf1,pixel_acc,delta_miou
    stats.csv              class,pixels,proportion
    area_histogram.csv     quantity,bin_lo,bin_hi,samples
    layers.csv             name,kind,macs,output_shape,spatial
"""
from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from pydantic import BaseModel  # noqa: E402

from .complexity import ComplexityReport  # noqa: E402
from .config import config_to_yaml  # noqa: E402
from .data import DatasetStats  # noqa: E402
from .metrics import MetricsReport  # noqa: E402
from .training import TrainHistory  # noqa: E402
from .utils import ensure_dir, to_bytes_image, write_png  # noqa: E402
from .xregion import XREGION_COLUMNS, CrossRegionRow  # noqa: E402

logger = logging.getLogger("mcdnet.report")

HISTORY_COLUMNS = ("epoch", "loss", "val_miou", "lr")
METRICS_COLUMNS = ("model", "params", "macs", "flops", "miou", "recall", "precision", "dice", "pixel_acc")
STATS_COLUMNS = ("class", "pixels", "proportion")
HISTOGRAM_COLUMNS = ("quantity", "bin_lo", "bin_hi", "samples")
LAYER_COLUMNS = ("name", "kind", "macs", "output_shape", "spatial")
CLASS_NAMES = ("background", "moraine")
RESOLVED_CONFIG = "config.resolved.yaml"
OVERLAY_COLOR = np.array([255, 64, 0], dtype=np.float64)

# byte-stable SVG output
plt.rcParams["svg.hashsalt"] = "mcdnet"
plt.rcParams["svg.fonttype"] = "path"


def fmt(value: float) -> str:
    return format(float(value), ".10g")


def _write_csv(path: Path | str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    ensure_dir(path.parent)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    logger.info("Wrote %s", path)
    return path


def write_history_csv(history: TrainHistory, path: Path | str) -> Path:
    return _write_csv(path, HISTORY_COLUMNS, history.rows())


def metrics_row(label: str, complexity: ComplexityReport, metrics: MetricsReport) -> tuple:
    return (label, complexity.params, complexity.macs, complexity.flops, metrics.miou,
            metrics.recall, metrics.precision, metrics.dice, metrics.pixel_acc)


def write_metrics_csv(rows: Sequence[tuple], path: Path | str) -> Path:
    return _write_csv(path, METRICS_COLUMNS, rows)


def write_xregion_csv(rows: Sequence[CrossRegionRow], path: Path | str) -> Path:
    return _write_csv(path, XREGION_COLUMNS, [r.as_row() for r in rows])


def write_stats_csv(stats: DatasetStats, path: Path | str) -> Path:
    rows = [(name, int(stats.class_counts[i]), float(stats.proportions[i])) for i, name in enumerate(CLASS_NAMES)]
    return _write_csv(path, STATS_COLUMNS, rows)


def write_area_histogram_csv(stats: DatasetStats, path: Path | str) -> Path:
    rows = []
    for quantity, counts, edges in (("fraction", stats.histogram, stats.bin_edges),
                                    ("pixels", stats.size_histogram, stats.size_bin_edges)):
        rows.extend((quantity, float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts))
    return _write_csv(path, HISTOGRAM_COLUMNS, rows)


def write_layers_csv(report: ComplexityReport, path: Path | str) -> Path:
    rows = [(r.name, r.kind, r.macs, "x".join(str(s) for s in r.output_shape), int(r.spatial))
            for r in report.layers]
    return _write_csv(path, LAYER_COLUMNS, rows)


def write_resolved_config(cfg: BaseModel | Mapping[str, Any], out_dir: Path | str) -> Path:
    """Provenance copy of the fully resolved configuration."""
    path = ensure_dir(out_dir) / RESOLVED_CONFIG
    path.write_text(config_to_yaml(cfg), encoding="utf-8")
    return path


# ---------- SVG figures ----------

def _save_svg(fig, path: Path | str) -> Path:
    path = Path(path)
    ensure_dir(path.parent)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info("Wrote %s", path)
    return path


def plot_pixel_distribution(stats: DatasetStats, path: Path | str) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    bars = ax.bar(CLASS_NAMES, stats.proportions * 100.0, color=["#4c72b0", "#dd8452"])
    for bar, p in zip(bars, stats.proportions):
        ax.annotate(f"{p * 100:.1f}%", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("pixels (%)")
    ax.set_ylim(0, 105)
    ax.set_title("Pixel distribution across classes")
    fig.tight_layout()
    return _save_svg(fig, path)


def plot_area_histogram(stats: DatasetStats, path: Path | str) -> Path:
    fig, (left, right) = plt.subplots(1, 2, figsize=(8, 3.5))
    left.stairs(stats.histogram, stats.bin_edges * 100.0, fill=True, color="#dd8452")
    left.set_xlabel("moraine coverage (%)")
    left.set_ylabel("samples")
    right.stairs(stats.size_histogram, stats.size_bin_edges, fill=True, color="#4c72b0")
    right.set_xlabel("moraine size (pixels)")
    fig.suptitle("Histogram of moraine sizes")
    fig.tight_layout()
    return _save_svg(fig, path)


def plot_history(history: TrainHistory, path: Path | str) -> Path:
    fig, (ax_loss, ax_lr) = plt.subplots(1, 2, figsize=(8, 3.5))
    ax_loss.plot(history.epochs, history.loss, marker="o", ms=3, label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    twin = ax_loss.twinx()
    twin.plot(history.epochs, history.val_miou, color="#55a868", marker="s", ms=3, label="val mIoU")
    twin.set_ylabel("val mIoU")
    ax_lr.plot(history.epochs, history.lr, color="#c44e52")
    ax_lr.set_xlabel("epoch")
    ax_lr.set_ylabel("learning rate")
    fig.tight_layout()
    return _save_svg(fig, path)


# ---------- rasters ----------

def overlay(image: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a highlight colour over moraine pixels; returns uint8 [H,W,3]."""
    rgb = to_bytes_image(image).astype(np.float64)
    sel = np.asarray(mask) != 0
    rgb[sel] = (1.0 - alpha) * rgb[sel] + alpha * OVERLAY_COLOR
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def write_overlay_png(path: Path | str, image: np.ndarray, mask: np.ndarray) -> Path:
    return write_png(path, overlay(image, mask))


def write_heatmap_png(path: Path | str, heatmap: np.ndarray, image: Optional[np.ndarray] = None) -> Path:
    """Heatmap in [0,1] as 8-bit gray; a max of 1.0 always maps to 255."""
    gray = np.clip(np.rint(np.asarray(heatmap) * 255.0), 0, 255).astype(np.uint8)
    written = write_png(path, gray)
    if image is not None:
        cmap = plt.get_cmap("jet")
        colored = cmap(gray)[..., :3] * 255.0
        blend = 0.5 * to_bytes_image(image) + 0.5 * colored
        write_png(Path(path).with_name(Path(path).stem + "_overlay.png"),
                  np.clip(np.rint(blend), 0, 255).astype(np.uint8))
    return written
