"""
Differentiable operators used by the MCD-Net graph.

Conventions:
  - Layout is NCHW everywhere.
  - Max reductions route their subgradient to the lowest-index maximum.
  - Bilinear resizing uses half-pixel centres unless align_corners is set.
  - Batch norm uses eps 1e-5 and momentum 0.1 by default.
"""
from __future__ import annotations

import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, make_op

logger = logging.getLogger("mcdnet.functional")

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LOG_FLOOR = -30.0


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _require_4d(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} expects an NCHW tensor, got shape {x.shape}")


# ---------- activations ----------

def relu(x: Tensor) -> Tensor:
    return x.relu()


def relu6(x: Tensor) -> Tensor:
    """Clamp to [0, 6]; gradient is zero outside the open interval."""
    inside = (x.data > 0) & (x.data < 6)
    out = np.clip(x.data, 0, 6)
    return make_op(out, (x,), lambda g: (g * inside,), "relu6")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function; saturated outputs stay strictly inside (0, 1)."""
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    info = np.finfo(x.dtype)
    out = np.clip(out, info.tiny, 1.0 - info.epsneg)
    return make_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---------- convolution ----------

def _conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: Tuple[int, int], dilation: Tuple[int, int],
            out_h: int, out_w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sh, sw = stride
    dh, dw = dilation
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i * dh: i * dh + sh * (out_h - 1) + 1: sh,
                                  j * dw: j * dw + sw * (out_w - 1) + 1: sw]
    return cols


def _col2im(cols: np.ndarray, padded_shape, stride, dilation) -> np.ndarray:
    kh, kw, out_h, out_w = cols.shape[2:]
    sh, sw = stride
    dh, dw = dilation
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i * dh: i * dh + sh * (out_h - 1) + 1: sh,
                j * dw: j * dw + sw * (out_w - 1) + 1: sw] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1, padding=0, dilation=1,
           groups: int = 1) -> Tensor:
    """2-d cross-correlation with zero padding, dilation and channel groups."""
    _require_4d(x, "conv2d")
    if w.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-d, got {w.shape}")
    n, cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    stride, padding, dilation = _pair(stride), _pair(padding), _pair(dilation)
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(f"groups={groups} must divide in_channels={cin} and out_channels={cout}")
    if cin // groups != cpg:
        raise ShapeError(f"weight expects {cpg * groups} input channels, input has {cin}")
    if min(dilation) < 1 or min(stride) < 1 or min(padding) < 0:
        raise ShapeError("stride and dilation must be >= 1 and padding >= 0")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} != ({cout},)")
    out_h = _conv_output_size(h, kh, stride[0], padding[0], dilation[0])
    out_w = _conv_output_size(wd, kw, stride[1], padding[1], dilation[1])
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"kernel {kh}x{kw} (dilation {dilation}) does not fit padded input {h}x{wd}")

    ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    cols = _im2col(xp, kh, kw, stride, dilation, out_h, out_w)
    g_count = groups
    cols_g = cols.reshape(n, g_count, cpg, kh, kw, out_h, out_w)
    w_g = w.data.reshape(g_count, cout // g_count, cpg, kh, kw)
    if g_count == 1:
        out = np.tensordot(w.data, cols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
    else:
        out = np.einsum("gocij,ngcijhw->ngohw", w_g, cols_g).reshape(n, cout, out_h, out_w)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def backward(g):
        gx = gw = gb = None
        g_g = g.reshape(n, g_count, cout // g_count, out_h, out_w)
        if w.requires_grad:
            if g_count == 1:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
            else:
                gw = np.einsum("ngohw,ngcijhw->gocij", g_g, cols_g).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            if g_count == 1:
                gcols = np.tensordot(g, w.data, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
            else:
                gcols = np.einsum("ngohw,gocij->ngcijhw", g_g, w_g).reshape(cols.shape)
            gxp = _col2im(np.ascontiguousarray(gcols), xp.shape, stride, dilation)
            gx = gxp[:, :, ph: ph + h, pw: pw + wd]
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_op(out, parents, backward, "conv2d")


# ---------- affine ----------

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last dimension: x @ w.T + b."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input last dim {x.shape[-1]} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.reshape(-1, w.shape[0]).T @ x.data.reshape(-1, w.shape[1]) if w.requires_grad else None
        gb = g.reshape(-1, w.shape[0]).sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_op(out.astype(x.dtype, copy=False), parents, backward, "linear")


# ---------- pooling ----------

def _check_spatial(x: Tensor, name: str) -> None:
    _require_4d(x, name)
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"{name}: empty spatial extent {x.shape[2:]}")


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C,1,1] mean over H*W."""
    _check_spatial(x, "global_avg_pool")
    return x.mean(axis=(2, 3), keepdims=True)


def _max_over_last(x: Tensor, flat: np.ndarray, out_shape, restore, name: str) -> Tensor:
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0].reshape(out_shape)

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
        return (restore(gflat),)

    return make_op(out, (x,), backward, name)


def global_max_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C,1,1] max over H*W."""
    _check_spatial(x, "global_max_pool")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    return _max_over_last(x, flat, (n, c, 1, 1), lambda gf: gf.reshape(x.shape), "global_max_pool")


def channelwise_avg(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,1,H,W] mean over channels."""
    _check_spatial(x, "channelwise_avg")
    return x.mean(axis=1, keepdims=True)


def channelwise_max(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,1,H,W] max over channels."""
    _check_spatial(x, "channelwise_max")
    n, c, h, w = x.shape
    flat = np.moveaxis(x.data, 1, -1)
    return _max_over_last(x, flat, (n, 1, h, w), lambda gf: np.moveaxis(gf, -1, 1), "channelwise_max")


def _windows(x: Tensor, kernel, stride) -> Tuple[np.ndarray, int, int, Tuple[int, int], Tuple[int, int]]:
    _check_spatial(x, "pool2d")
    kh, kw = _pair(kernel)
    stride = _pair(stride if stride is not None else kernel)
    out_h = _conv_output_size(x.shape[2], kh, stride[0], 0, 1)
    out_w = _conv_output_size(x.shape[3], kw, stride[1], 0, 1)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"pool window {kh}x{kw} larger than input {x.shape[2:]}")
    cols = _im2col(x.data, kh, kw, stride, (1, 1), out_h, out_w)
    return cols, out_h, out_w, (kh, kw), stride


def max_pool2d(x: Tensor, kernel, stride=None) -> Tensor:
    cols, out_h, out_w, (kh, kw), st = _windows(x, kernel, stride)
    n, c = x.shape[:2]
    flat = cols.reshape(n, c, kh * kw, out_h, out_w)
    idx = np.argmax(flat, axis=2)
    out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[:, :, None], g[:, :, None], axis=2)
        return (_col2im(gflat.reshape(cols.shape), x.shape, st, (1, 1)),)

    return make_op(out, (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, kernel, stride=None) -> Tensor:
    cols, out_h, out_w, (kh, kw), st = _windows(x, kernel, stride)
    out = cols.mean(axis=(2, 3))

    def backward(g):
        gcols = np.broadcast_to(g[:, :, None, None] / (kh * kw), cols.shape)
        return (_col2im(np.ascontiguousarray(gcols), x.shape, st, (1, 1)),)

    return make_op(out.astype(x.dtype, copy=False), (x,), backward, "avg_pool2d")


# ---------- normalization ----------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization; training mode updates running stats in place."""
    _require_4d(x, "batch_norm")
    n, c, h, w = x.shape
    count = n * h * w
    shape = (1, c, 1, 1)
    if training:
        if count == 0:
            raise ShapeError("batch_norm in training mode needs a non-empty batch")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shape)
            if training:
                m1 = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                m2 = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = inv_std.reshape(shape) * (gxhat - m1 - xhat * m2)
            else:
                gx = gxhat * inv_std.reshape(shape)
        return gx, ggamma, gbeta

    return make_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


# ---------- resizing ----------

def _interp_matrix(size_in: int, size_out: int, align_corners: bool, dtype) -> np.ndarray:
    m = np.zeros((size_out, size_in), dtype=np.float64)
    dst = np.arange(size_out, dtype=np.float64)
    if align_corners:
        src = dst * ((size_in - 1) / (size_out - 1)) if size_out > 1 else np.zeros_like(dst)
    else:
        src = np.maximum((dst + 0.5) * (size_in / size_out) - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), size_in - 1)
    i1 = np.minimum(i0 + 1, size_in - 1)
    frac = src - i0
    rows = np.arange(size_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, out_h: int, out_w: int, align_corners: bool = False) -> Tensor:
    """Bilinear resize to (out_h, out_w); the gradient applies the transposed weights."""
    _require_4d(x, "upsample_bilinear")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"upsample target must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    if out_h < h or out_w < w:
        raise ShapeError(f"upsample target {out_h}x{out_w} smaller than input {h}x{w}")
    if (out_h, out_w) == (h, w):
        return x * 1.0
    mh = _interp_matrix(h, out_h, align_corners, x.dtype)
    mw = _interp_matrix(w, out_w, align_corners, x.dtype)
    out = np.einsum("oh,nchw,pw->ncop", mh, x.data, mw, optimize=True)

    def backward(g):
        return (np.einsum("oh,ncop,pw->nchw", mh, g, mw, optimize=True),)

    return make_op(out.astype(x.dtype, copy=False), (x,), backward, "upsample_bilinear")


# ---------- loss ----------

def softmax_ce(logits: Tensor, target: np.ndarray, class_weights: Sequence[float]) -> Tensor:
    """Mean over pixels of -sum_c w_c * y_c * log softmax(logits)_c."""
    _require_4d(logits, "softmax_ce")
    n, c, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} != {(n, h, w)}")
    if target.size and (target.min() < 0 or target.max() >= c):
        raise ShapeError(f"target values must lie in [0, {c})")
    weights = np.asarray(class_weights, dtype=logits.dtype)
    if weights.shape != (c,) or np.any(weights < 0):
        raise ShapeError(f"class_weights must be {c} non-negative values")
    target = target.astype(np.int64)

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - log_norm
    picked = np.take_along_axis(logp, target[:, None], axis=1)[:, 0]
    active = picked >= LOG_FLOOR
    picked = np.maximum(picked, LOG_FLOOR)
    pix_w = weights[target]
    count = n * h * w
    loss = -(pix_w * picked).sum() / count

    def backward(g):
        prob = np.exp(logp)
        onehot = np.zeros_like(prob)
        np.put_along_axis(onehot, target[:, None], 1.0, axis=1)
        scale = (pix_w * active / count)[:, None]
        return (g * scale * (prob - onehot),)

    return make_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_ce")
