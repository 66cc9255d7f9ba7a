"""
MCD-Net: MobileNetV2 encoder, optional CBAM on the deepest features, ASPP
context module and a DeepLabV3+ style decoder.

    F_base, F_low = backbone(I)
    F_att         = cbam(F_base)            (identity when CBAM is off)
    F_aspp        = aspp(F_att)
    logits        = decoder(F_aspp, F_low)
"""
from __future__ import annotations

import logging
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from . import functional as F
from .cbam import Cbam
from .config import CbamConfig, ModelConfig
from .errors import ConfigError, ShapeError
from .nn import Conv2d, ConvBNAct, Module, Sequential, Shape, Tracer, _join, init_parameters
from .tensor import Tensor, concat, no_grad

logger = logging.getLogger("mcdnet.model")

# expansion t, channels c, repeats n, stride s
MOBILENETV2_STAGES: Tuple[Tuple[int, int, int, int], ...] = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)
STEM_CHANNELS = 32
LAST_CHANNELS = 1280
LOW_LEVEL_STAGE = 1  # end of the (6, 24, 2, 2) stage, stride 4
FEATURE_NAMES = ("F_low", "F_base", "F_att", "F_aspp", "logits")


def make_divisible(value: float, divisor: int = 8, min_value: Optional[int] = None) -> int:
    min_value = divisor if min_value is None else min_value
    new_value = max(min_value, int(value + divisor / 2) // divisor * divisor)
    if new_value < 0.9 * value:
        new_value += divisor
    return new_value


class InvertedResidual(Module):
    """1x1 expand -> 3x3 depthwise -> 1x1 linear projection, residual when shapes match."""

    def __init__(self, in_channels: int, out_channels: int, stride: int, dilation: int, expand_ratio: int):
        super().__init__()
        hidden = int(round(in_channels * expand_ratio))
        self.use_residual = stride == 1 and in_channels == out_channels
        layers: List[Module] = []
        if expand_ratio != 1:
            layers.append(ConvBNAct(in_channels, hidden, kernel_size=1))
        layers.append(ConvBNAct(hidden, hidden, kernel_size=3, stride=stride, dilation=dilation, groups=hidden))
        layers.append(ConvBNAct(hidden, out_channels, kernel_size=1, activation=None))
        self.block = Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        y = self.block(x)
        return x + y if self.use_residual else y

    def trace(self, shape: Shape, tracer: Tracer, name: str = "") -> Shape:
        return self.block.trace(shape, tracer, _join(name, "block"))


class MobileNetV2Backbone(Module):
    def __init__(self, width: float, channel_scale: float, output_stride: int):
        super().__init__()
        scale = width * channel_scale
        in_ch = make_divisible(STEM_CHANNELS * scale)
        layers: List[Module] = [ConvBNAct(3, in_ch, kernel_size=3, stride=2)]
        current_stride, dilation = 2, 1
        self.low_level_index = -1
        for stage, (t, c, n, s) in enumerate(MOBILENETV2_STAGES):
            out_ch = make_divisible(c * scale)
            if current_stride >= output_stride and s > 1:
                # keep resolution, widen receptive field instead
                stride, dilation = 1, dilation * s
            else:
                stride = s
                current_stride *= s
            for i in range(n):
                layers.append(InvertedResidual(in_ch, out_ch, stride if i == 0 else 1, dilation, t))
                in_ch = out_ch
            if stage == LOW_LEVEL_STAGE:
                self.low_level_index = len(layers) - 1
                self.low_level_channels = out_ch
        self.out_channels = make_divisible(LAST_CHANNELS * max(1.0, width) * channel_scale)
        layers.append(ConvBNAct(in_ch, self.out_channels, kernel_size=1))
        self.features = Sequential(*layers)

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        low = None
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i == self.low_level_index:
                low = x
        return x, low

    def trace(self, shape: Shape, tracer: Tracer, name: str = "") -> Tuple[Shape, Shape]:
        low = None
        for i, (key, layer) in enumerate(self.features._modules.items()):
            shape = layer.trace(shape, tracer, _join(name, f"features.{key}"))
            if i == self.low_level_index:
                low = shape
        return shape, low


class AsppPooling(Module):
    """Global average pool -> 1x1 conv/BN/ReLU -> bilinear broadcast back to H x W."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.project = ConvBNAct(in_channels, out_channels, kernel_size=1, activation="relu")

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        return F.upsample_bilinear(self.project(F.global_avg_pool(x)), h, w)

    def trace(self, shape: Shape, tracer: Tracer, name: str = "") -> Shape:
        n, c, h, w = shape
        with tracer.pooled():
            out = self.project.trace((n, c, 1, 1), tracer, _join(name, "project"))
        return n, out[1], h, w


class Aspp(Module):
    def __init__(self, in_channels: int, out_channels: int, rates: Tuple[int, int, int]):
        super().__init__()
        self.b0 = ConvBNAct(in_channels, out_channels, kernel_size=1, activation="relu")
        self.b1 = ConvBNAct(in_channels, out_channels, kernel_size=3, dilation=rates[0], activation="relu")
        self.b2 = ConvBNAct(in_channels, out_channels, kernel_size=3, dilation=rates[1], activation="relu")
        self.b3 = ConvBNAct(in_channels, out_channels, kernel_size=3, dilation=rates[2], activation="relu")
        self.pool = AsppPooling(in_channels, out_channels)
        self.project = ConvBNAct(5 * out_channels, out_channels, kernel_size=1, activation="relu")
        self.out_channels = out_channels

    def branches(self) -> List[Module]:
        return [self.b0, self.b1, self.b2, self.b3, self.pool]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] < 1 or x.shape[3] < 1:
            raise ShapeError(f"ASPP input has empty spatial extent {x.shape[2:]}")
        return self.project(concat([b(x) for b in self.branches()], axis=1))

    def trace(self, shape: Shape, tracer: Tracer, name: str = "") -> Shape:
        names = ("b0", "b1", "b2", "b3", "pool")
        outs = [b.trace(shape, tracer, _join(name, key)) for key, b in zip(names, self.branches())]
        n, _, h, w = outs[0]
        return self.project.trace((n, sum(o[1] for o in outs), h, w), tracer, _join(name, "project"))


class Decoder(Module):
    def __init__(self, aspp_channels: int, low_in: int, low_channels: int, num_classes: int, low_factor: int):
        super().__init__()
        self.low_factor = low_factor
        self.low_project = ConvBNAct(low_in, low_channels, kernel_size=1, activation="relu")
        self.refine = Sequential(
            ConvBNAct(aspp_channels + low_channels, aspp_channels, kernel_size=3, activation="relu"),
            ConvBNAct(aspp_channels, aspp_channels, kernel_size=3, activation="relu"),
        )
        self.classifier = Conv2d(aspp_channels, num_classes, kernel_size=1, bias=True)

    def forward(self, f_aspp: Tensor, f_low: Tensor) -> Tensor:
        lh, lw = f_low.shape[2:]
        if (lh, lw) != (f_aspp.shape[2] * self.low_factor, f_aspp.shape[3] * self.low_factor):
            raise ShapeError(f"decoder stride mismatch: F_aspp {f_aspp.shape[2:]} vs F_low {f_low.shape[2:]}")
        up = F.upsample_bilinear(f_aspp, lh, lw)
        x = self.refine(concat([up, self.low_project(f_low)], axis=1))
        logits = self.classifier(x)
        return F.upsample_bilinear(logits, lh * 4, lw * 4)

    def trace(self, aspp_shape: Shape, low_shape: Shape, tracer: Tracer, name: str = "") -> Shape:
        n, _, lh, lw = low_shape
        low = self.low_project.trace(low_shape, tracer, _join(name, "low_project"))
        x = self.refine.trace((n, aspp_shape[1] + low[1], lh, lw), tracer, _join(name, "refine"))
        out = self.classifier.trace(x, tracer, _join(name, "classifier"))
        return n, out[1], lh * 4, lw * 4


def _cbam_config(config: ModelConfig, channels: int) -> CbamConfig:
    try:
        return CbamConfig(channels=channels, reduction_ratio=config.cbam_reduction,
                          spatial_kernel=config.cbam_kernel)
    except ValidationError as e:
        reason = "; ".join(err["msg"] for err in e.errors())
        raise ConfigError(f"CBAM on {channels} backbone channels: {reason}") from e


class McdNetModel(Module):
    in_channels = 3

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = MobileNetV2Backbone(config.width_multiplier, config.channel_scale, config.output_stride)
        aspp_ch = make_divisible(config.aspp_channels * config.channel_scale)
        low_ch = make_divisible(config.decoder_lowlevel_channels * config.channel_scale)
        self.aspp = Aspp(self.backbone.out_channels, aspp_ch, config.aspp_rates)
        self.decoder = Decoder(aspp_ch, self.backbone.low_level_channels, low_ch, config.num_classes,
                               config.output_stride // 4)
        # registered last so shared parameters initialise identically with and without attention
        self.cbam: Optional[Cbam] = None
        if config.use_cbam:
            self.cbam = Cbam(_cbam_config(config, self.backbone.out_channels))

    def check_input_shape(self, shape: Shape) -> None:
        if len(shape) != 4 or shape[1] != self.in_channels:
            raise ShapeError(f"expected images of shape [N,3,H,W], got {tuple(shape)}")
        stride = self.config.output_stride
        if shape[2] < stride or shape[3] < stride or shape[2] % stride or shape[3] % stride:
            raise ShapeError(f"input size {tuple(shape[2:])} not divisible by output stride {stride}")

    def forward(self, images: Tensor, taps: Optional[Dict[str, Tensor]] = None,
                use_attention: Optional[bool] = None) -> Tensor:
        """Logits [N,num_classes,H,W]; intermediate maps are stored in `taps` when given."""
        f_base, f_low = backbone_forward(self, images)
        attend = self.cbam is not None if use_attention is None else use_attention
        if attend and self.cbam is None:
            raise ShapeError("model was built without CBAM")
        f_att = self.cbam(f_base) if attend else f_base
        f_aspp = aspp_forward(self, f_att)
        logits = decoder_forward(self, f_aspp, f_low)
        if taps is not None:
            taps.update(F_low=f_low, F_base=f_base, F_att=f_att, F_aspp=f_aspp, logits=logits)
        return logits

    def trace(self, shape: Shape, tracer: Tracer, name: str = "") -> Shape:
        base, low = self.backbone.trace(shape, tracer, _join(name, "backbone"))
        if self.cbam is not None:
            base = self.cbam.trace(base, tracer, _join(name, "cbam"))
        aspp = self.aspp.trace(base, tracer, _join(name, "aspp"))
        return self.decoder.trace(aspp, low, tracer, _join(name, "decoder"))


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> McdNetModel:
    """Assemble and initialise MCD-Net; the same seed gives bitwise-identical parameters."""
    model = McdNetModel(config)
    init_parameters(model, np.random.default_rng(seed))
    model.to_dtype(dtype)
    n_params = sum(p.size for p in model.parameters())
    logger.info("Built %s (channel_scale=%s, output_stride=%d): %d parameters",
                config.label, config.channel_scale, config.output_stride, n_params)
    return model


def backbone_forward(model: McdNetModel, images: Tensor) -> Tuple[Tensor, Tensor]:
    """(F_base at the output stride, F_low at stride 4)."""
    model.check_input_shape(images.shape)
    return model.backbone(images)


def aspp_forward(model: McdNetModel, f_att: Tensor) -> Tensor:
    return model.aspp(f_att)


def decoder_forward(model: McdNetModel, f_aspp: Tensor, f_low: Tensor) -> Tensor:
    return model.decoder(f_aspp, f_low)


def model_forward(model: McdNetModel, images: Tensor) -> Tensor:
    return model(images)


def predict(logits: Tensor | np.ndarray) -> np.ndarray:
    """Per-pixel argmax over classes; ties go to class 0 (background)."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1).astype(np.uint8)


def pad_to_stride(image: np.ndarray, stride: int) -> np.ndarray:
    """Zero-pad a [C,H,W] image on the bottom/right up to multiples of `stride`."""
    h, w = image.shape[1:]
    ph, pw = -h % stride, -w % stride
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, 0), (0, ph), (0, pw)))


def predict_image(model: McdNetModel, image: np.ndarray) -> np.ndarray:
    """Binary mask [H,W] for one [3,H,W] image of any size."""
    h, w = image.shape[1:]
    padded = pad_to_stride(image, model.config.output_stride)
    model.eval()
    with no_grad():
        logits = model(Tensor(padded[None].astype(model.dtype)))
    return predict(logits)[0, :h, :w]
