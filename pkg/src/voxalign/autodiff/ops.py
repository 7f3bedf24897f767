"""Differentiable primitives.

Volumes are laid out ``(batch, channel, d, h, w)``. Each primitive computes
its forward value with numpy and returns a closure for the vector-Jacobian
product. Shape errors name the node id that would have been created.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch
from .tensor import Tensor, as_tensor, next_node_id


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b, nid):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"node {nid} ({op}): cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    nid = next_node_id()
    _check_broadcast("add", a, b, nid)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, "add", (a, b), bw, nid)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    nid = next_node_id()
    _check_broadcast("sub", a, b, nid)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, "sub", (a, b), bw, nid)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    nid = next_node_id()
    _check_broadcast("mul", a, b, nid)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, "mul", (a, b), bw, nid)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    nid = next_node_id()
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"node {nid} (matmul): {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(out, "matmul", (a, b), bw, nid)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(np.asarray(out), "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    nid = next_node_id()
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"node {nid} (reshape): cannot reshape {a.shape} to {shape}") from None

    def bw(g):
        return (g.reshape(a.shape),)

    return Tensor._from_op(out, "reshape", (a,), bw, nid)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return Tensor._from_op(np.transpose(a.data, axes), "transpose", (a,), bw)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return Tensor._from_op(np.array(out), "getitem", (a,), bw)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    nid = next_node_id()
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeMismatch(f"node {nid} (concat): {[x.shape for x in tensors]} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors), bw, nid)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return Tensor._from_op(a.data * mask, "relu", (a,), bw)


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)

    def bw(g):
        return (g * scale,)

    return Tensor._from_op(a.data * scale, "leaky_relu", (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, "softmax", (a,), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fully connected layer ``x @ w.T + b`` with ``w`` shaped ``(out, in)``."""
    nid = next_node_id()
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"node {nid} (linear): input {x.shape}, weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeMismatch(f"node {nid} (linear): bias {b.shape} for weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ w.data
        gw = g.T @ x.data
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, "linear", parents, bw, nid)


def _im2col(xp, k, stride, out_sp):
    n, c = xp.shape[:2]
    do, ho, wo = out_sp
    cols = np.empty((n, c, k, k, k, do, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                cols[:, :, i, j, l] = xp[
                    :, :, i : i + stride * do : stride, j : j + stride * ho : stride, l : l + stride * wo : stride
                ]
    return cols.reshape(n, c * k**3, do * ho * wo)


def _col2im(cols, xp_shape, k, stride, out_sp):
    n, c = xp_shape[:2]
    do, ho, wo = out_sp
    cols = cols.reshape(n, c, k, k, k, do, ho, wo)
    gx = np.zeros(xp_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                gx[:, :, i : i + stride * do : stride, j : j + stride * ho : stride, l : l + stride * wo : stride] += cols[
                    :, :, i, j, l
                ]
    return gx


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int | None = None) -> Tensor:
    """3D cross-correlation with a cubic kernel and zero padding.

    ``x``: ``(N, Cin, D, H, W)``; ``w``: ``(Cout, Cin, k, k, k)``. Padding
    defaults to ``k // 2`` so stride 1 keeps the size and stride 2 halves even
    sizes.
    """
    nid = next_node_id()
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1] or len(set(w.shape[2:])) != 1:
        raise ShapeMismatch(f"node {nid} (conv3d): input {x.shape}, weight {w.shape}")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    cout, cin, k = w.shape[:3]
    if b is not None and b.shape != (cout,):
        raise ShapeMismatch(f"node {nid} (conv3d): bias {b.shape} for {cout} output channels")
    pad = k // 2 if padding is None else padding
    sp = x.shape[2:]
    out_sp = tuple((s + 2 * pad - k) // stride + 1 for s in sp)
    if min(out_sp) < 1:
        raise ShapeMismatch(f"node {nid} (conv3d): input {x.shape} too small for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, out_sp)
    w2 = w.data.reshape(cout, -1)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data[:, None]
    n = x.shape[0]
    out = out.reshape(n, cout, *out_sp)

    def bw(g):
        g2 = g.reshape(n, cout, -1)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gcols = np.matmul(w2.T, g2)
        gxp = _col2im(gcols, xp.shape, k, stride, out_sp)
        gx = gxp[:, :, pad : pad + sp[0], pad : pad + sp[1], pad : pad + sp[2]] if pad else gxp
        grads = (np.ascontiguousarray(gx), gw)
        if b is not None:
            grads += (g2.sum(axis=(0, 2)),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, "conv3d", parents, bw, nid)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling of the three spatial axes."""
    nid = next_node_id()
    if x.ndim != 5:
        raise ShapeMismatch(f"node {nid} (upsample2): expected 5D input, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)
    n, c, d, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7)),)

    return Tensor._from_op(out, "upsample2", (x,), bw, nid)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all axes after the channel axis: ``(N, C, ...) -> (N, C)``."""
    nid = next_node_id()
    if x.ndim < 3:
        raise ShapeMismatch(f"node {nid} (global_avg_pool): expected (N, C, ...), got {x.shape}")
    axes = tuple(range(2, x.ndim))
    count = int(np.prod(x.shape[2:]))

    def bw(g):
        g = g.reshape(g.shape + (1,) * len(axes)) / count
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return Tensor._from_op(x.data.mean(axis=axes), "global_avg_pool", (x,), bw, nid)
