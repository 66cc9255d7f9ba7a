"""
Module system: parameter registry, layers and the shape tracer used for
complexity accounting.
"""
from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from . import functional as F
from .errors import CheckpointMismatchError, ShapeError
from .tensor import Tensor, no_grad

logger = logging.getLogger("mcdnet.nn")

Shape = Tuple[int, ...]


class Parameter(Tensor):
    """Learnable leaf tensor."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


# ---------- complexity tracing ----------

@dataclass
class LayerCost:
    name: str
    kind: str  # conv | linear | attention
    macs: int
    output_shape: Shape
    spatial: bool  # False for layers acting on globally pooled maps


@dataclass
class Tracer:
    """Collects per-layer MACs while shapes flow through Module.trace()."""
    rows: List[LayerCost] = field(default_factory=list)
    spatial: bool = True

    def record(self, name: str, kind: str, macs: int, output_shape: Shape) -> None:
        self.rows.append(LayerCost(name, kind, int(macs), tuple(int(s) for s in output_shape), self.spatial))

    @contextmanager
    def pooled(self) -> Iterator[None]:
        prev = self.spatial
        self.spatial = False
        try:
            yield
        finally:
            self.spatial = prev


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


class Module:
    """Base class; Parameters and Modules assigned as attributes are registered in order."""

    def __init__(self) -> None:
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value) -> None:
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif name in self._buffers:
            self._buffers[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def trace(self, shape: Shape, tracer: Tracer, name: str = "") -> Shape:
        raise NotImplementedError(f"{type(self).__name__} has no shape trace")

    # ---- registry ----

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(_join(prefix, name))

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, p in mod._parameters.items():
                yield _join(mod_name, name), p

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, b in mod._buffers.items():
                yield _join(mod_name, name), b

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to_dtype(self, dtype) -> "Module":
        dtype = np.dtype(dtype)
        for _, mod in self.named_modules():
            for p in mod._parameters.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            for name, b in list(mod._buffers.items()):
                mod.register_buffer(name, b.astype(dtype))
        return self

    @property
    def dtype(self) -> np.dtype:
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float32)

    # ---- persistence ----

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """Strict load; any name or shape difference raises CheckpointMismatchError."""
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        shapes = {n: p.shape for n, p in params.items()}
        shapes.update({n: b.shape for n, b in buffers.items()})
        missing = set(shapes) - set(state)
        unexpected = set(state) - set(shapes)
        mismatched = [n for n in set(shapes) & set(state) if tuple(np.shape(state[n])) != tuple(shapes[n])]
        if missing or unexpected or mismatched:
            raise CheckpointMismatchError(missing, unexpected, mismatched)
        for name, p in params.items():
            p.data = np.array(state[name], dtype=p.dtype, copy=True)
            p.grad = None
        for mod_name, mod in self.named_modules():
            for name, b in list(mod._buffers.items()):
                mod.register_buffer(name, np.array(state[_join(mod_name, name)], dtype=b.dtype, copy=True))


class Sequential(Module):
    def __init__(self, *modules: Module):
        super().__init__()
        for i, m in enumerate(modules):
            setattr(self, str(i), m)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._modules.values())

    def __len__(self) -> int:
        return len(self._modules)

    def __getitem__(self, i: int) -> Module:
        return list(self._modules.values())[i]

    def forward(self, x: Tensor) -> Tensor:
        for m in self:
            x = m(x)
        return x

    def trace(self, shape: Shape, tracer: Tracer, name: str = "") -> Shape:
        for key, m in self._modules.items():
            shape = m.trace(shape, tracer, _join(name, key))
        return shape


# ---------- layers ----------

class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: Optional[int] = None, dilation: int = 1, groups: int = 1, bias: bool = False):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ShapeError(f"groups={groups} must divide {in_channels} and {out_channels}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = (kernel_size - 1) // 2 * dilation if padding is None else padding
        self.dilation = dilation
        self.groups = groups
        self.weight = Parameter(np.zeros((out_channels, in_channels // groups, kernel_size, kernel_size), np.float32))
        self.bias = Parameter(np.zeros(out_channels, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)

    def output_shape(self, shape: Shape) -> Shape:
        n, c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} channels, got {c}")
        k = self.kernel_size
        oh = F._conv_output_size(h, k, self.stride, self.padding, self.dilation)
        ow = F._conv_output_size(w, k, self.stride, self.padding, self.dilation)
        return n, self.out_channels, oh, ow

    def trace(self, shape: Shape, tracer: Tracer, name: str = "") -> Shape:
        out = self.output_shape(shape)
        k = self.kernel_size
        macs = out[2] * out[3] * self.out_channels * (self.in_channels // self.groups) * k * k
        tracer.record(name, "conv", macs, out)
        return out


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(np.zeros((out_features, in_features), np.float32))
        self.bias = Parameter(np.zeros(out_features, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)

    def trace(self, shape: Shape, tracer: Tracer, name: str = "") -> Shape:
        out = tuple(shape[:-1]) + (self.out_features,)
        rows = int(np.prod(shape[1:-1])) if len(shape) > 2 else 1
        tracer.record(name, "linear", rows * self.out_features * self.in_features, out)
        return out


class _Moments:
    """Per-channel running sums of x and x^2 over every pixel seen."""

    def __init__(self, channels: int) -> None:
        self.count = 0
        self.total = np.zeros(channels, np.float64)
        self.squares = np.zeros(channels, np.float64)

    def add(self, x: np.ndarray) -> None:
        v = x.astype(np.float64)
        self.count += v.shape[0] * v.shape[2] * v.shape[3]
        self.total += v.sum(axis=(0, 2, 3))
        self.squares += (v * v).sum(axis=(0, 2, 3))

    def result(self) -> Tuple[np.ndarray, np.ndarray]:
        mean = self.total / self.count
        return mean, np.maximum(self.squares / self.count - mean * mean, 0.0)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = F.BN_MOMENTUM, eps: float = F.BN_EPS):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels, np.float32))
        self.bias = Parameter(np.zeros(channels, np.float32))
        self.register_buffer("running_mean", np.zeros(channels, np.float32))
        self.register_buffer("running_var", np.ones(channels, np.float32))
        self._moments: Optional[_Moments] = None

    def forward(self, x: Tensor) -> Tensor:
        if self.training and self._moments is not None:
            self._moments.add(x.data)
        return F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)

    def trace(self, shape: Shape, tracer: Tracer, name: str = "") -> Shape:
        return shape


def recalibrate_batch_norm(model: Module, batches: Iterable[Tensor]) -> int:
    """
    Overwrite every BatchNorm2d running estimate with the exact mean and biased
    variance of that layer's input over `batches`, forwarded in training mode
    with the current weights. When the batches match the training batches, eval
    mode then reproduces the training-mode forward. Returns the layer count.
    """
    layers = [m for _, m in model.named_modules() if isinstance(m, BatchNorm2d)]
    if not layers:
        return 0
    was_training = model.training
    for layer in layers:
        layer._moments = _Moments(layer.channels)
    try:
        model.train()
        with no_grad():
            for x in batches:
                model(x)
        seen = [layer for layer in layers if layer._moments.count]
        if not seen:
            raise ShapeError("batch norm recalibration needs at least one non-empty batch")
        for layer in seen:
            mean, var = layer._moments.result()
            layer.running_mean[...] = mean
            layer.running_var[...] = var
    finally:
        for layer in layers:
            layer._moments = None
        model.train(was_training)
    logger.debug("Recalibrated %d of %d batch norm layers", len(seen), len(layers))
    return len(seen)


_ACTIVATIONS = {"relu": F.relu, "relu6": F.relu6, None: None}


class ConvBNAct(Module):
    """conv -> batch norm -> optional activation."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 dilation: int = 1, groups: int = 1, activation: Optional[str] = "relu6"):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.conv = Conv2d(in_channels, out_channels, kernel_size, stride, dilation=dilation, groups=groups)
        self.bn = BatchNorm2d(out_channels)
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        act = _ACTIVATIONS[self.activation]
        return act(y) if act else y

    def trace(self, shape: Shape, tracer: Tracer, name: str = "") -> Shape:
        return self.conv.trace(shape, tracer, _join(name, "conv"))


# ---------- initialization ----------

def init_parameters(module: Module, rng: np.random.Generator) -> None:
    """Kaiming fan-out normal for convs, N(0, 0.01) for linear weights, zero biases, BN gamma 1 / beta 0."""
    for _, m in module.named_modules():
        if isinstance(m, Conv2d):
            fan_out = m.out_channels * m.kernel_size * m.kernel_size // m.groups
            m.weight.data = rng.normal(0.0, np.sqrt(2.0 / fan_out), m.weight.shape).astype(m.weight.dtype)
            if m.bias is not None:
                m.bias.data = np.zeros_like(m.bias.data)
        elif isinstance(m, Linear):
            m.weight.data = rng.normal(0.0, 0.01, m.weight.shape).astype(m.weight.dtype)
            if m.bias is not None:
                m.bias.data = np.zeros_like(m.bias.data)
        elif isinstance(m, BatchNorm2d):
            m.weight.data = np.ones_like(m.weight.data)
            m.bias.data = np.zeros_like(m.bias.data)
