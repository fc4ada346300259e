"""Adam with decoupled weight decay, over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .numerics import Matrix


class AdamState:
    """First/second moment estimates and the shared step counter."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One in-place Adam update.  Parameters missing from `grads` are left
    untouched (their moments do not advance)."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        if isinstance(g, Matrix):
            g = g.data
        g = np.asarray(g, dtype=np.float64)
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for parameter {name!r}")
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * mhat / (np.sqrt(vhat) + state.eps)
