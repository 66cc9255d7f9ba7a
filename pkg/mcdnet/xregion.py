"""
Bidirectional cross-region evaluation.

Each region is split 9:1. A model trained on a region's training part is
tested on its own held-out part (within-region) and on the whole other
region (cross-region); delta_miou is within minus cross for that training region.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .config import AugmentConfig, ModelConfig, RegionBox, TrainConfig
from .data import Sample, random_split, region_split
from .errors import DataError
from .metrics import MetricsReport, evaluate
from .model import build_model
from .training import train_loop
from .utils import derive_seed

logger = logging.getLogger("mcdnet.xregion")

XREGION_COLUMNS = ("train_region", "test_region", "miou", "mrecall", "mprecision", "mf1", "pixel_acc", "delta_miou")


@dataclass
class CrossRegionRow:
    train_region: str
    test_region: str
    metrics: MetricsReport
    delta_miou: float

    def as_row(self) -> Tuple:
        m = self.metrics
        return (self.train_region, self.test_region, m.miou, m.mean_recall, m.mean_precision,
                m.mean_dice, m.pixel_acc, self.delta_miou)


def cross_region_eval(samples: Sequence[Sample], regions: Sequence[RegionBox], model_config: ModelConfig,
                      train_config: TrainConfig, augment_config: Optional[AugmentConfig] = None,
                      seed: int = 0, split_ratio: Tuple[int, int] = (9, 1)) -> List[CrossRegionRow]:
    """Four rows: (A,A), (A,B), (B,B), (B,A) for regions A, B."""
    if len(regions) != 2:
        raise DataError(f"cross-region evaluation needs exactly two regions, got {len(regions)}")
    assignment = region_split(samples, regions)
    names = [r.name for r in regions]
    for name in names:
        if len(assignment.regions[name]) < 2:
            raise DataError(f"region {name} has {len(assignment.regions[name])} samples; need at least 2")

    splits: Dict[str, Tuple[List[Sample], List[Sample]]] = {
        name: random_split(assignment.regions[name], split_ratio, derive_seed(seed, i))
        for i, name in enumerate(names)
    }
    rows: List[CrossRegionRow] = []
    for i, home in enumerate(names):
        away = names[1 - i]
        train, test = splits[home]
        model = build_model(model_config, seed=seed)
        logger.info("Cross-region: training on %s (%d samples)", home, len(train))
        train_loop(model, train, train_config, augment_config)
        within = evaluate(model, test, train_config.eval_batch_size)
        cross = evaluate(model, assignment.regions[away], train_config.eval_batch_size)
        delta = within.miou - cross.miou
        logger.info("%s -> %s: mIoU %.4f (within %.4f, delta %.4f)", home, away, cross.miou, within.miou, delta)
        rows.append(CrossRegionRow(home, home, within, 0.0))
        rows.append(CrossRegionRow(home, away, cross, delta))
    return rows
