"""Central finite-difference verification of autodiff gradients."""
from __future__ import annotations

import logging
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import GraphError
from .tensor import Tensor, no_grad

logger = logging.getLogger("mcdnet.gradcheck")


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    floor: float = 1e-8,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Compare autodiff gradients of scalar f(*inputs) against central differences.

    Returns the worst relative error |a - n| / max(|a|, |n|, floor) over the
    sampled coordinates. With max_coords set, that many coordinates per input
    are drawn (seeded) instead of sweeping every element.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise GraphError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
    out.backward()
    rng = np.random.default_rng(seed)

    worst = 0.0
    for k, t in enumerate(inputs):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        if not np.shares_memory(flat, t.data):
            raise GraphError("finite_diff_check needs contiguous input tensors")
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = analytic.reshape(-1)
        for idx in coords:
            orig = flat[idx]
            with no_grad():
                flat[idx] = orig + eps
                f_plus = float(f(*inputs).data)
                flat[idx] = orig - eps
                f_minus = float(f(*inputs).data)
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = relative_error(float(a_flat[idx]), numeric, floor)
            if err > worst:
                worst = err
                logger.debug("input %d coord %d: analytic=%g numeric=%g err=%g", k, idx, a_flat[idx], numeric, err)
    return worst
