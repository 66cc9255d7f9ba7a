"""
Pixel-level confusion accumulation and segmentation metrics.

Counts are accumulated globally over a dataset (one confusion matrix, not a
per-image average). Classes whose union is empty drop out of the mIoU mean;
precision and recall with a zero denominator are 0.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .data import Sample, iterate_batches, stack_batch
from .errors import DataError, ShapeError
from .model import predict
from .tensor import Tensor, no_grad

logger = logging.getLogger("mcdnet.metrics")

NUM_CLASSES = 2
MORAINE = 1


@dataclass
class ConfusionCounts:
    """matrix[gt, pred] pixel counts."""
    matrix: np.ndarray = field(default_factory=lambda: np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64))

    def tp(self, cls: int) -> int:
        return int(self.matrix[cls, cls])

    def fp(self, cls: int) -> int:
        return int(self.matrix[:, cls].sum() - self.matrix[cls, cls])

    def fn(self, cls: int) -> int:
        return int(self.matrix[cls, :].sum() - self.matrix[cls, cls])

    def tn(self, cls: int) -> int:
        return self.total - self.tp(cls) - self.fp(cls) - self.fn(cls)

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.matrix + other.matrix)

    @classmethod
    def from_moraine(cls, tp: int, fp: int, fn: int, tn: int) -> "ConfusionCounts":
        """Build binary counts from the moraine-class tp/fp/fn/tn."""
        return cls(np.array([[tn, fp], [fn, tp]], dtype=np.int64))


def accumulate_confusion(pred: np.ndarray, gt: np.ndarray,
                         counts: Optional[ConfusionCounts] = None) -> ConfusionCounts:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= NUM_CLASSES):
            raise DataError(f"{name} labels outside {{0,1}}")
    idx = NUM_CLASSES * gt.astype(np.int64).ravel() + pred.astype(np.int64).ravel()
    batch = np.bincount(idx, minlength=NUM_CLASSES ** 2).reshape(NUM_CLASSES, NUM_CLASSES)
    counts = counts if counts is not None else ConfusionCounts()
    counts.matrix += batch
    return counts


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


@dataclass
class MetricsReport:
    iou: List[float]  # per class, index 0 background
    miou: float
    dice: float  # moraine class
    precision: float
    recall: float
    pixel_acc: float
    mean_precision: float
    mean_recall: float
    mean_dice: float

    def as_dict(self) -> Dict[str, float]:
        return {
            "miou": self.miou, "recall": self.recall, "precision": self.precision, "dice": self.dice,
            "pixel_acc": self.pixel_acc, "mrecall": self.mean_recall,
            "mprecision": self.mean_precision, "mf1": self.mean_dice,
        }


def compute_metrics(counts: ConfusionCounts) -> MetricsReport:
    if counts.total == 0:
        raise DataError("cannot compute metrics from all-zero confusion counts")
    iou, present, prec, rec, dice = [], [], [], [], []
    for c in range(NUM_CLASSES):
        tp, fp, fn = counts.tp(c), counts.fp(c), counts.fn(c)
        union = tp + fp + fn
        iou.append(_ratio(tp, union))
        if union:
            present.append(iou[-1])
        else:
            logger.warning("Class %d has empty union; excluded from mIoU", c)
        prec.append(_ratio(tp, tp + fp))
        rec.append(_ratio(tp, tp + fn))
        dice.append(_ratio(2 * tp, 2 * tp + fp + fn))
    return MetricsReport(
        iou=iou,
        miou=float(np.mean(present)),
        dice=dice[MORAINE],
        precision=prec[MORAINE],
        recall=rec[MORAINE],
        pixel_acc=_ratio(int(np.trace(counts.matrix)), counts.total),
        mean_precision=float(np.mean(prec)),
        mean_recall=float(np.mean(rec)),
        mean_dice=float(np.mean(dice)),
    )


def confusion_over(model: Callable[[Tensor], Tensor], samples: Sequence[Sample],
                   batch_size: int = 4) -> ConfusionCounts:
    """Global confusion of model predictions over `samples`, no augmentation, no graph."""
    if not samples:
        raise DataError("cannot evaluate on an empty dataset")
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    dtype = getattr(model, "dtype", np.float32)
    counts = ConfusionCounts()
    try:
        with no_grad():
            for batch in iterate_batches(samples, batch_size):
                images, masks = stack_batch(batch, dtype=dtype)
                accumulate_confusion(predict(model(Tensor(images))), masks, counts)
    finally:
        if was_training:
            model.train()
    return counts


def evaluate(model: Callable[[Tensor], Tensor], samples: Sequence[Sample], batch_size: int = 4) -> MetricsReport:
    report = compute_metrics(confusion_over(model, samples, batch_size))
    logger.info("Evaluated %d samples: mIoU=%.4f dice=%.4f PA=%.4f",
                len(samples), report.miou, report.dice, report.pixel_acc)
    return report
