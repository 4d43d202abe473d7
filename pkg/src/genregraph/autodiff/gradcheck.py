from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def numerical_gradient(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                       coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``; only ``coords`` (flat indices) if given."""
    x.data = np.ascontiguousarray(x.data)
    base = x.data.copy()
    flat = x.data.reshape(-1)
    g = np.zeros(x.size)
    idx = range(x.size) if coords is None else coords
    try:
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(x).item()
            flat[i] = orig - eps
            lo = f(x).item()
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * eps)
    finally:
        x.data[...] = base
    return g.reshape(x.shape)


def check_gradient(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                   coords=None) -> float:
    """Worst per-coordinate relative error between autodiff and finite differences.

    rel = |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|). ``f`` must build a fresh
    graph on every call. ``coords`` restricts the comparison to a subset of
    flat indices for large inputs.
    """
    x.requires_grad = True
    x.grad = None
    f(x).backward()
    g_ad = x.grad.reshape(-1) if x.grad is not None else np.zeros(x.size)
    x.grad = None
    g_fd = numerical_gradient(f, x, eps, coords).reshape(-1)
    idx = np.arange(x.size) if coords is None else np.asarray(coords)
    a, b = g_ad[idx], g_fd[idx]
    rel = np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))
    return float(rel.max()) if rel.size else 0.0
