"""Central finite-difference gradient checks, run in 64-bit."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                      max_per_tensor: int | None = None, seed: int = 0) -> float:
    """Max over checked entries of |analytic - numeric| / max(1, |analytic|).

    ``params`` are float64 leaves read by ``loss_fn``; they are perturbed in place
    and restored. ``max_per_tensor`` limits the check to a seeded subset of entries.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("gradient checks need float64 tensors")
        p.grad = None
    loss = loss_fn()
    if loss.data.size != 1:
        raise T.ShapeError("gradient check needs a scalar function")
    T.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            idx = rng.choice(flat.size, size=max_per_tensor, replace=False)
        a_flat = analytic.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            with T.no_grad():
                up = loss_fn().item()
            flat[i] = orig - step
            with T.no_grad():
                down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst


def grad_check(fn: Callable[..., Tensor], point: Sequence[np.ndarray], step: float = 1e-5) -> float:
    """Check ``fn(*tensors)`` at ``point`` (one array per argument)."""
    if step <= 0:
        raise ValueError("step must be positive")
    with T.precision(np.float64):
        leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in point]
        return grad_check_params(lambda: fn(*leaves), leaves, step)
