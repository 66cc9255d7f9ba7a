"""
Optimisation loop: weighted cross-entropy, AdamW with decoupled weight decay,
cosine-annealed learning rate and early stopping on validation mIoU.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .checkpoint import Checkpoint
from .config import AugmentConfig, TrainConfig
from .data import Sample, augment, iterate_batches, stack_batch
from .errors import ConfigError, DataError, DivergenceError, ShapeError
from .metrics import evaluate
from .model import McdNetModel
from .nn import Parameter, recalibrate_batch_norm
from .tensor import Tensor
from .utils import derive_seed

logger = logging.getLogger("mcdnet.training")

IMPROVEMENT_EPS = 1e-6

# derive_seed stream tags
_VAL_STREAM, _SHUFFLE_STREAM, _AUGMENT_STREAM = 1, 2, 3

Evaluator = Callable[[McdNetModel, Sequence[Sample]], float]


def loss(logits: Tensor, mask: np.ndarray, class_weights: Sequence[float] = (0.5, 0.5)) -> Tensor:
    """Class-weighted pixel cross-entropy, averaged over N*H*W."""
    return F.softmax_ce(logits, mask, class_weights)


@dataclass
class OptimizerState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def create(cls, params: Sequence[Parameter]) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params: Sequence[Parameter], grads: Sequence[Optional[np.ndarray]], state: OptimizerState,
               lr: float, config: TrainConfig) -> OptimizerState:
    """
    One in-place AdamW update:
        m <- b1 m + (1 - b1) g ;  v <- b2 v + (1 - b2) g^2
        p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p
    Parameters whose gradient is None are left untouched.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("params, grads and optimizer state differ in length")
    b1, b2 = config.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        decay = lr * config.weight_decay * p.data
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps) - decay).astype(p.dtype, copy=False)
    return state


def cosine_lr(epoch: float, T: float, lr0: float, lr_min: float = 0.0) -> float:
    if T <= 0:
        raise ConfigError(f"cosine schedule length must be positive, got {T}")
    if not 0 <= epoch <= T:
        raise ConfigError(f"epoch {epoch} outside [0, {T}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch / T))


@dataclass
class TrainHistory:
    epochs: List[int] = field(default_factory=list)
    loss: List[float] = field(default_factory=list)
    val_miou: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False

    def append(self, epoch: int, loss: float, val_miou: float, lr: float) -> None:
        self.epochs.append(epoch)
        self.loss.append(loss)
        self.val_miou.append(val_miou)
        self.lr.append(lr)

    def rows(self) -> List[Tuple[int, float, float, float]]:
        return list(zip(self.epochs, self.loss, self.val_miou, self.lr))

    @property
    def best_epoch(self) -> int:
        return self.epochs[int(np.argmax(self.val_miou))] if self.val_miou else 0

    def __len__(self) -> int:
        return len(self.epochs)


def carve_validation(samples: Sequence[Sample], fraction: float, seed: int) -> Tuple[List[Sample], List[Sample]]:
    """Seeded (train, val) carve; fraction 0 validates on the training set itself."""
    samples = list(samples)
    if fraction <= 0.0 or len(samples) < 2:
        return samples, samples
    n_val = min(len(samples) - 1, max(1, int(round(len(samples) * fraction))))
    order = np.random.default_rng(derive_seed(seed, _VAL_STREAM)).permutation(len(samples))
    return [samples[i] for i in order[n_val:]], [samples[i] for i in order[:n_val]]


def _default_evaluator(batch_size: int) -> Evaluator:
    return lambda model, samples: evaluate(model, samples, batch_size).miou


def train_loop(model: McdNetModel, samples: Sequence[Sample], config: TrainConfig,
               augment_config: Optional[AugmentConfig] = None,
               evaluator: Optional[Evaluator] = None) -> Tuple[Checkpoint, TrainHistory]:
    """
    Train until max_epochs, max_steps or `patience` epochs without a validation
    mIoU gain above 1e-6. Before each validation the batch norm running
    estimates are recomputed over the training set unless `recalibrate_bn` is
    off. The model ends up holding the best weights, which are also returned
    as a Checkpoint.
    """
    if not samples:
        raise DataError("training set is empty")
    if len(config.class_weights) != model.config.num_classes:
        raise ConfigError(f"{len(config.class_weights)} class weights for {model.config.num_classes} classes")
    train_set, val_set = carve_validation(samples, config.val_fraction, config.seed)
    aug = (augment_config or AugmentConfig()) if config.augment else None
    evaluator = evaluator or _default_evaluator(config.eval_batch_size)
    logger.info("Training %s on %d samples, validating on %d (batch %d, max %d epochs)",
                model.config.label, len(train_set), len(val_set), config.batch_size, config.max_epochs)

    params = model.parameters()
    state = OptimizerState.create(params)
    history = TrainHistory()
    best: Optional[Checkpoint] = None
    best_miou, stagnant = -math.inf, 0
    dtype = model.dtype

    for epoch in range(1, config.max_epochs + 1):
        lr = cosine_lr(epoch - 1, config.max_epochs, config.lr0, config.lr_min)
        order = np.random.default_rng(derive_seed(config.seed, _SHUFFLE_STREAM, epoch)).permutation(len(train_set))
        epoch_samples = [train_set[i] for i in order]
        if aug is not None:
            epoch_samples = [augment(s, aug, derive_seed(config.seed, _AUGMENT_STREAM, epoch, int(i)))
                             for s, i in zip(epoch_samples, order)]
        model.train()
        losses = []
        for batch in iterate_batches(epoch_samples, config.batch_size):
            images, masks = stack_batch(batch, dtype=dtype)
            batch_loss = loss(model(Tensor(images)), masks, config.class_weights)
            value = batch_loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}, step {history.steps + 1} (lr={lr:.3g})")
            model.zero_grad()
            batch_loss.backward()
            adamw_step(params, [p.grad for p in params], state, lr, config)
            losses.append(value)
            history.steps += 1
            logger.debug("epoch %d step %d loss %.6f", epoch, history.steps, value)
            if config.max_steps is not None and history.steps >= config.max_steps:
                break

        if config.recalibrate_bn:
            recalibrate_batch_norm(model, (Tensor(stack_batch(batch, dtype=dtype)[0])
                                           for batch in iterate_batches(train_set, config.batch_size)))
        val_miou = float(evaluator(model, val_set))
        epoch_loss = float(np.mean(losses))
        history.append(epoch, epoch_loss, val_miou, lr)
        logger.info("epoch %d: loss=%.5f val_mIoU=%.4f lr=%.3g", epoch, epoch_loss, val_miou, lr)

        if val_miou > best_miou + IMPROVEMENT_EPS:
            best_miou, stagnant = val_miou, 0
            best = Checkpoint.from_model(model, epoch, val_miou)
        else:
            stagnant += 1
            if stagnant >= config.patience:
                history.stopped_early = True
                logger.info("Early stop at epoch %d: no improvement for %d epochs", epoch, stagnant)
                break
        if config.max_steps is not None and history.steps >= config.max_steps:
            logger.info("Reached max_steps=%d at epoch %d", config.max_steps, epoch)
            break

    if best is None:
        raise DivergenceError(f"validation mIoU never became a finite number ({history.val_miou[-1]})")
    model.load_state_dict(best.tensors)
    logger.info("Best checkpoint: epoch %d, val mIoU %.4f", best.epoch, best.best_miou)
    return best, history
