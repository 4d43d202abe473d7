from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are not modified."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    ms = state.m or [np.zeros_like(p) for p in params]
    vs = state.v or [np.zeros_like(p) for p in params]
    for p, g, m in zip(params, grads, ms):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"adam: shapes {p.shape}, {g.shape}, {m.shape} disagree")
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, ms, vs):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.eps)


class Adam:
    """Stateful wrapper applying :func:`adam_step` to Tensor parameters in place."""

    def __init__(self, params: list[Tensor], lr: float = 3e-4):
        self.params = params
        self.lr = lr
        self.state = AdamState()

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adam_step([p.data for p in self.params], grads, self.state, self.lr)
        for p, arr in zip(self.params, new):
            p.data = arr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
