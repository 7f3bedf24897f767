"""Central finite-difference checks of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def grad_check(fn, inputs, eps: float = 1e-5, n_samples: int | None = 20, rng=None) -> float:
    """Max relative error between analytic and numeric gradients.

    ``fn`` maps the tensors in ``inputs`` to a scalar tensor. Every input with
    ``requires_grad`` is checked at up to ``n_samples`` random coordinates
    (all of them when ``None``). The error at a coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``. Inputs must be float64.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    inputs = list(inputs)
    for t in inputs:
        if t.requires_grad and t.dtype != np.float64:
            raise TypeError("grad_check needs float64 inputs")
        t.grad = None
    out = fn(*inputs)
    out.backward()
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        if n_samples is None or n_samples >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=n_samples, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            hi = fn(*inputs).item()
            flat[c] = orig - eps
            lo = fn(*inputs).item()
            flat[c] = orig
            numeric = (hi - lo) / (2 * eps)
            a = analytic.reshape(-1)[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
