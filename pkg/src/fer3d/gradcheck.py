"""Central finite-difference gradient checking.

The numeric side only ever calls the loss forward, so it stays independent
of the autodiff path it is used to verify. Checks are meaningful at
float64 only; the relative error is unit-floored
(|a-n| / max(1, |a|, |n|)) so near-zero gradients compare on an absolute
scale instead of blowing up the ratio.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_gradient(loss_fn: Callable[[], Tensor], wrt: Tensor,
                       step: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. every element of ``wrt``.

    ``loss_fn`` must rebuild the loss from current buffer contents; the
    buffer is perturbed in place and restored afterwards.
    """
    if wrt.dtype != np.float64:
        raise ValueError("finite differences need float64 buffers")
    flat = wrt.data.reshape(-1)
    grad = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn().item()
            flat[i] = orig - step
            lo = loss_fn().item()
            flat[i] = orig
            grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(wrt.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max unit-floored relative error between two gradient arrays."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(loss_fn: Callable[[], Tensor], wrt: Sequence[Tensor],
                    step: float = 1e-5) -> float:
    """Compare autodiff gradients of ``loss_fn`` against central differences.

    Returns the worst relative error over all checked tensors.
    """
    for t in wrt:
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in wrt]
    worst = 0.0
    for t, a in zip(wrt, analytic):
        n = numerical_gradient(loss_fn, t, step=step)
        worst = max(worst, relative_error(a, n))
    return worst
