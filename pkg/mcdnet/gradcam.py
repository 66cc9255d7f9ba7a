"""Grad-CAM heatmaps over named feature maps of the segmentation network."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import functional as F
from .errors import ShapeError
from .model import pad_to_stride
from .tensor import Tensor, no_grad

logger = logging.getLogger("mcdnet.gradcam")

CAM_LAYERS = ("F_low", "F_base", "F_att", "F_aspp")


@dataclass
class CamHeatmap:
    heatmap: np.ndarray  # [H,W] in [0,1]
    target_class: int
    target_layer: str


def default_layer(model) -> str:
    return "F_att" if getattr(model, "cbam", None) is not None else "F_base"


def grad_cam(model, image: np.ndarray, target_class: int = 1, target_layer: Optional[str] = None) -> CamHeatmap:
    """
    Weights each channel of `target_layer` by the spatial mean of d(sum of
    target-class logits)/d(feature), sums, applies ReLU, upsamples to the
    input size and divides by the maximum.
    """
    layer = target_layer or default_layer(model)
    if layer not in CAM_LAYERS:
        raise ShapeError(f"unknown layer {layer!r}; expected one of {', '.join(CAM_LAYERS)}")
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"expected a single [3,H,W] image, got {image.shape}")
    h, w = image.shape[1:]
    padded = pad_to_stride(image, getattr(getattr(model, "config", None), "output_stride", 1))
    dtype = getattr(model, "dtype", np.float32)
    was_training = getattr(model, "training", None)
    if hasattr(model, "eval"):
        model.eval()
    try:
        taps: Dict[str, Tensor] = {}
        logits = model(Tensor(padded[None].astype(dtype), requires_grad=True), taps=taps)
        if layer not in taps:
            raise ShapeError(f"model did not expose feature map {layer!r}")
        if not 0 <= target_class < logits.shape[1]:
            raise ShapeError(f"target class {target_class} outside [0, {logits.shape[1]})")
        features = taps[layer].retain_grad()
        logits[:, target_class].sum().backward()
        grad = features.grad if features.grad is not None else np.zeros_like(features.data)
    finally:
        if hasattr(model, "zero_grad"):
            model.zero_grad()
        if was_training is not None and hasattr(model, "train"):
            model.train(was_training)

    weights = grad.mean(axis=(2, 3), keepdims=True)
    cam = np.maximum((weights * features.data).sum(axis=1, keepdims=True), 0.0)
    with no_grad():
        cam = F.upsample_bilinear(Tensor(cam), *padded.shape[1:]).data[0, 0, :h, :w]
    cam = np.maximum(cam, 0.0)
    peak = float(cam.max())
    if peak > 0.0:
        cam = np.clip(cam / peak, 0.0, 1.0)
    else:
        logger.warning("Grad-CAM for class %d at %s has no positive evidence", target_class, layer)
    return CamHeatmap(cam.astype(np.float32), int(target_class), layer)
