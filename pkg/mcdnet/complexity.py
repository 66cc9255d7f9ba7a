"""
Parameter and multiply-accumulate accounting.

MACs come from Module.trace(), which pushes shapes (not activations) through
the network, so a 1024x1024 count costs no more memory than a 16x16 one.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional

from .nn import LayerCost, Module, Tracer

logger = logging.getLogger("mcdnet.complexity")


@dataclass
class ComplexityReport:
    params: int
    macs: int
    height: int
    width: int
    layers: List[LayerCost]

    @property
    def flops(self) -> int:
        return 2 * self.macs

    @property
    def conv_macs(self) -> int:
        """MACs of convolutions on full feature maps; excludes pooled-branch and attention terms."""
        return sum(r.macs for r in self.layers if r.kind == "conv" and r.spatial)


def count_params(model: Module) -> int:
    """Learnable element count; running statistics are buffers and are not counted."""
    return int(sum(p.size for p in model.parameters()))


def trace_layers(model: Module, H: int, W: int, in_channels: Optional[int] = None, batch: int = 1) -> List[LayerCost]:
    c = in_channels if in_channels is not None else getattr(model, "in_channels", None)
    if c is None:
        raise ValueError("in_channels is required for modules without an in_channels attribute")
    check = getattr(model, "check_input_shape", None)
    if check is not None:
        check((batch, c, H, W))
    tracer = Tracer()
    model.trace((batch, c, H, W), tracer)
    return tracer.rows


def count_macs(model: Module, H: int, W: int, in_channels: Optional[int] = None) -> int:
    return int(sum(r.macs for r in trace_layers(model, H, W, in_channels)))


def profile(model: Module, H: int, W: int, in_channels: Optional[int] = None) -> ComplexityReport:
    rows = trace_layers(model, H, W, in_channels)
    report = ComplexityReport(count_params(model), sum(r.macs for r in rows), H, W, rows)
    for r in rows:
        logger.debug("%s %s macs=%d out=%s", r.name, r.kind, r.macs, r.output_shape)
    logger.info("Complexity at %dx%d: %.3fM params, %.3f GMACs, %.3f GFLOPs",
                H, W, report.params / 1e6, report.macs / 1e9, report.flops / 1e9)
    return report
