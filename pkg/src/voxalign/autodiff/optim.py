"""Classical momentum SGD."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch


def sgd_momentum_step(params: dict, grads: dict, state: dict, lr: float, mu: float) -> dict:
    """One in-place update ``v <- mu*v + g; p <- p - lr*v``.

    ``params`` maps names to :class:`Tensor`, ``grads`` names to arrays (a
    missing or ``None`` gradient counts as zero) and ``state`` names to
    velocity arrays; velocities are created on first use. Returns ``state``.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient for {name!r} has shape {g.shape}, parameter {p.data.shape}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise ShapeMismatch(f"velocity for {name!r} has shape {v.shape}, parameter {p.data.shape}")
        v = mu * v + g.astype(p.data.dtype, copy=False)
        state[name] = v
        p.data -= lr * v
    return state


class MomentumSGD:
    def __init__(self, params: dict, lr: float = 1e-4, momentum: float = 0.9):
        if not lr >= 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.state: dict = {}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {name: p.grad for name, p in self.params.items()}
        sgd_momentum_step(self.params, grads, self.state, self.lr, self.momentum)
