"""Finite-difference gradient checking in float64."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-3,
                   indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``t`` (flat indices)."""
    flat = t.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size, dtype=np.float64)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(t.shape)


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Max-norm relative error; ``floor`` bounds the denominator from below."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / denom)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-3,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst relative error between analytic and numerical gradients over ``tensors``.

    Tensors must be float64 leaves with requires_grad. With ``max_entries``
    only a random subset of each tensor's entries is differenced. A tensor
    whose true gradient vanishes (a bias feeding batch norm, say) is judged
    against 1e-3 of the largest gradient seen, not against its own noise.
    """
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("gradient checks run in float64")
        t.grad = None
    backward(fn())
    rng = rng or np.random.default_rng(0)
    pairs = []
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        if max_entries is not None and t.size > max_entries:
            idx = rng.choice(t.size, size=max_entries, replace=False)
            num = numerical_grad(fn, t, h, idx).reshape(-1)[idx]
            pairs.append((analytic.reshape(-1)[idx], num))
        else:
            pairs.append((analytic, numerical_grad(fn, t, h)))
    scale = max(max(np.max(np.abs(a)), np.max(np.abs(n))) for a, n in pairs)
    return max(rel_error(a, n, floor=max(1e-3 * scale, 1e-12)) for a, n in pairs)
