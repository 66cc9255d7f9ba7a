"""
Convolutional Block Attention Module.

Channel gate first, spatial gate on the channel-refined map:
    F'    = M_c(F)  * F
    F_att = M_s(F') * F'
The channel MLP is linear(C -> C/r, no bias), ReLU, linear(C/r -> C, bias),
shared between the average- and max-pooled descriptors. The spatial gate is a
single-output k x k conv (with bias, padding k//2) over [mean_c; max_c].
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .config import CbamConfig
from .errors import ShapeError
from .nn import Conv2d, Linear, Module, Shape, Tracer, _join, init_parameters
from .tensor import Tensor, concat

logger = logging.getLogger("mcdnet.cbam")


@dataclass
class AttentionMaps:
    channel: Tensor  # [N,C,1,1]
    spatial: Tensor  # [N,1,H,W]


class ChannelGate(Module):
    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.channels = channels
        self.fc1 = Linear(channels, hidden, bias=False)
        self.fc2 = Linear(hidden, channels, bias=True)

    def mlp(self, descriptor: Tensor) -> Tensor:
        return self.fc2(F.relu(self.fc1(descriptor)))

    def forward(self, features: Tensor) -> Tensor:
        n, c = features.shape[:2]
        if c != self.channels:
            raise ShapeError(f"channel attention configured for {self.channels} channels, got {c}")
        avg = F.global_avg_pool(features).reshape(n, c)
        mx = F.global_max_pool(features).reshape(n, c)
        return F.sigmoid(self.mlp(avg) + self.mlp(mx)).reshape(n, c, 1, 1)

    def trace(self, shape: Shape, tracer: Tracer, name: str = "") -> Shape:
        n, c = shape[:2]
        tracer.record(_join(name, "pool"), "attention", 2 * c, (n, c, 1, 1))
        with tracer.pooled():
            for descriptor in ("avg", "max"):
                h = self.fc1.trace((n, c), tracer, _join(name, f"fc1.{descriptor}"))
                self.fc2.trace(h, tracer, _join(name, f"fc2.{descriptor}"))
        return n, c, 1, 1


class SpatialGate(Module):
    def __init__(self, kernel_size: int):
        super().__init__()
        self.conv = Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=True)

    def forward(self, features: Tensor) -> Tensor:
        pooled = concat([F.channelwise_avg(features), F.channelwise_max(features)], axis=1)
        return F.sigmoid(self.conv(pooled))

    def trace(self, shape: Shape, tracer: Tracer, name: str = "") -> Shape:
        n, _, h, w = shape
        tracer.record(_join(name, "pool"), "attention", 2 * h * w, (n, 2, h, w))
        return self.conv.trace((n, 2, h, w), tracer, _join(name, "conv"))


class Cbam(Module):
    def __init__(self, config: CbamConfig):
        super().__init__()
        self.config = config
        self.channel_gate = ChannelGate(config.channels, config.hidden)
        self.spatial_gate = SpatialGate(config.spatial_kernel)

    def attention_maps(self, features: Tensor) -> AttentionMaps:
        m_c = self.channel_gate(features)
        refined = features * m_c
        return AttentionMaps(channel=m_c, spatial=self.spatial_gate(refined))

    def forward(self, features: Tensor) -> Tensor:
        refined = features * self.channel_gate(features)
        return refined * self.spatial_gate(refined)

    def trace(self, shape: Shape, tracer: Tracer, name: str = "") -> Shape:
        n, c, h, w = shape
        self.channel_gate.trace(shape, tracer, _join(name, "channel_gate"))
        tracer.record(_join(name, "channel_refine"), "attention", c * h * w, shape)
        self.spatial_gate.trace(shape, tracer, _join(name, "spatial_gate"))
        tracer.record(_join(name, "spatial_refine"), "attention", c * h * w, shape)
        return shape


def build_cbam(config: CbamConfig, rng: np.random.Generator | None = None) -> Cbam:
    module = Cbam(config)
    init_parameters(module, rng if rng is not None else np.random.default_rng(0))
    return module


def channel_attention(features: Tensor, cbam: Cbam) -> Tensor:
    """M_c = sigmoid(MLP(avgpool(F)) + MLP(maxpool(F))), shape [N,C,1,1]."""
    return cbam.channel_gate(features)


def spatial_attention(features: Tensor, cbam: Cbam) -> Tensor:
    """M_s = sigmoid(conv_kxk([mean_c(F); max_c(F)])), shape [N,1,H,W]."""
    return cbam.spatial_gate(features)


def cbam_refine(features: Tensor, cbam: Cbam) -> Tensor:
    """F_att via the sequential channel-then-spatial gating."""
    return cbam(features)
