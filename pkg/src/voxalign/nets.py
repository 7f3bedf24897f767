"""Attention links, residual blocks and the five regression architectures.

Architectures
-------------
``ME``       one encoder over the channel-concatenated pair.
``SE``       Siamese encoder (weight-shared branches) + regression head.
``SED``      SE + a decoder of ``n_up`` Res-up blocks fed by encoder skips.
``SNL_SED``  SED with self non-local attention inside each branch.
``DNET``     SED with mutual non-local attention across the branches.

Wiring of a linked Res-down block: the attention output is added to the
block's input stream, that stream is the block's skip output, and the block
then downsamples it. The last ``n_link`` blocks are linked and the decoder
consumes the skips of the last ``n_up`` blocks, deepest first, so a 1^3
bottleneck is upsampled back through every linked resolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    conv3d,
    global_avg_pool,
    leaky_relu,
    linear,
    matmul,
    softmax,
    transpose,
    upsample2,
)
from .errors import BadConfig, ShapeMismatch
from .geom import TransformParams
from .volume import Volume3

KINDS = ("ME", "SE", "SED", "SNL_SED", "DNET")
_ALIASES = {"me": "ME", "se": "SE", "sed": "SED", "snl-sed": "SNL_SED", "snl_sed": "SNL_SED", "dnet": "DNET", "d-net": "DNET"}
SLOPE = 0.1


def normalize_kind(kind: str) -> str:
    k = _ALIASES.get(str(kind).lower(), str(kind).upper())
    if k not in KINDS:
        raise BadConfig(f"unknown architecture {kind!r}; expected one of {KINDS}")
    return k


@dataclass(frozen=True)
class ArchConfig:
    kind: str
    d: tuple
    h: tuple
    w: tuple
    channels: tuple
    n_up: int = 0
    n_link: int = 0
    head_hidden: int = 128
    head_out: int = 12
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", normalize_kind(self.kind))
        for name in ("d", "h", "w", "channels"):
            object.__setattr__(self, name, tuple(int(x) for x in getattr(self, name)))
        self.validate()

    @property
    def n_down(self) -> int:
        return len(self.channels) - 1

    @property
    def siamese(self) -> bool:
        return self.kind != "ME"

    @property
    def has_decoder(self) -> bool:
        return self.kind in ("SED", "SNL_SED", "DNET")

    @property
    def input_shape(self) -> tuple:
        return (self.d[0], self.h[0], self.w[0])

    def validate(self):
        n = len(self.channels)
        if n < 2:
            raise BadConfig("need at least one down block (two channel entries)")
        if not (len(self.d) == len(self.h) == len(self.w) == n):
            raise BadConfig("size sequences and channel sequence must have equal length")
        for seq in (self.d, self.h, self.w):
            for a, b in zip(seq[:-1], seq[1:]):
                if a != 2 * b:
                    raise BadConfig(f"sizes must halve at each step, got {seq}")
        if min(self.channels) < 1:
            raise BadConfig("channel counts must be positive")
        if self.has_decoder:
            if not 1 <= self.n_up <= self.n_down:
                raise BadConfig(f"n_up must be in [1, {self.n_down}] for {self.kind}")
        elif self.n_up:
            raise BadConfig(f"{self.kind} has no decoder; n_up must be 0")
        if self.kind in ("SNL_SED", "DNET"):
            if not 1 <= self.n_link <= self.n_down:
                raise BadConfig(f"n_link must be in [1, {self.n_down}] for {self.kind}")
        elif self.n_link:
            raise BadConfig(f"{self.kind} has no attention links; n_link must be 0")
        if self.head_hidden < 1 or self.head_out != 12:
            raise BadConfig("head must have a positive hidden width and 12 outputs")

    def linked(self, block: int) -> bool:
        """Whether 1-based down block ``block`` carries an attention link."""
        return self.kind in ("SNL_SED", "DNET") and block > self.n_down - self.n_link

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "d": list(self.d),
            "h": list(self.h),
            "w": list(self.w),
            "channels": list(self.channels),
            "n_up": self.n_up,
            "n_link": self.n_link,
            "head_hidden": self.head_hidden,
            "head_out": self.head_out,
            "bias": self.bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d.pop("seed", None)
        sizes = d.pop("sizes", None)
        if sizes is not None:
            sizes = [s if isinstance(s, (list, tuple)) else (s, s, s) for s in sizes]
            d.setdefault("d", [s[0] for s in sizes])
            d.setdefault("h", [s[1] for s in sizes])
            d.setdefault("w", [s[2] for s in sizes])
        kind = normalize_kind(d.get("kind", ""))
        d["kind"] = kind
        n_down = len(d.get("channels", ())) - 1
        if kind in ("SED", "SNL_SED", "DNET"):
            d.setdefault("n_up", max(1, n_down - 2))
        if kind in ("SNL_SED", "DNET"):
            d.setdefault("n_link", max(1, n_down - 2))
        try:
            return cls(**d)
        except TypeError as exc:
            raise BadConfig(str(exc)) from None


def full_config(kind: str) -> ArchConfig:
    """Full-scale 64^3 configurations."""
    kind = normalize_kind(kind)
    if kind == "ME":
        s = (64, 32, 16, 8, 4)
        return ArchConfig("ME", s, s, s, (1, 16, 32, 64, 128))
    s = (64, 32, 16, 8, 4, 2, 1)
    c = (1, 16, 32, 64, 64, 64, 64)
    if kind == "SE":
        return ArchConfig("SE", s, s, s, c)
    return ArchConfig(kind, s, s, s, c, n_up=4, n_link=4 if kind != "SED" else 0)


def toy_config(kind: str, size: int = 16) -> ArchConfig:
    """Desk-scale configurations (16^3 by default; 8^3 for gradient checks)."""
    kind = normalize_kind(kind)
    n = int(np.log2(size))
    if 2**n != size or n < 2:
        raise BadConfig("toy size must be a power of two >= 4")
    if kind == "ME":
        s = tuple(size >> i for i in range(n))
        c = (1,) + tuple(min(8 << i, 32) for i in range(n - 1))
        return ArchConfig("ME", s, s, s, c)
    s = tuple(size >> i for i in range(n + 1))
    c = (1,) + tuple(min(8 << i, 16) for i in range(n))
    if kind == "SE":
        return ArchConfig("SE", s, s, s, c)
    k = max(1, n - 2)
    return ArchConfig(kind, s, s, s, c, n_up=k, n_link=k if kind != "SED" else 0)


def load_arch_config(path) -> tuple[ArchConfig, int]:
    """Read an architecture JSON file; returns the config and its seed (default 0)."""
    raw = json.loads(Path(path).read_text())
    return ArchConfig.from_dict(raw), int(raw.get("seed", 0))


# ---------------------------------------------------------------------------
# attention links


def _flatten(x: Tensor) -> Tensor:
    n, c = x.shape[:2]
    return x.reshape(n, c, -1)


def mnl_scores(Xf: Tensor, Xm: Tensor, W: Tensor):
    """Embedded features and score matrices of both link directions.

    Returns ``(theta_f, theta_m, E, E_t)`` where ``theta = W x`` per position
    (``(N, C, n)``), ``E[k, j] = theta_f[k] . theta_m[j]`` scores fixed
    position ``k`` against moving position ``j`` and ``E_t`` is its exact
    transpose, the moving-to-fixed scores.
    """
    if Xf.shape != Xm.shape:
        raise ShapeMismatch(f"link inputs differ in shape: {Xf.shape} vs {Xm.shape}")
    c = Xf.shape[1]
    if W.shape != (c, c):
        raise ShapeMismatch(f"link weight {W.shape} does not match {c} channels")
    tf = matmul(W, _flatten(Xf))
    tm = matmul(W, _flatten(Xm))
    E = matmul(transpose(tf, (0, 2, 1)), tm)
    return tf, tm, E, transpose(E, (0, 2, 1))


def mnl_link(Xf: Tensor, Xm: Tensor, W: Tensor, return_attention: bool = False):
    """Mutual non-local link with embedded-Gaussian similarity.

    ``Ym2f[k] = sum_j softmax_j(E[k, j]) W Xm[j]`` and symmetrically
    ``Yf2m[k] = sum_j softmax_j(E^T[k, j]) W Xf[j]``; outputs have the input
    shape.
    """
    tf, tm, E, Et = mnl_scores(Xf, Xm, W)
    A_m2f = softmax(E, axis=-1)
    A_f2m = softmax(Et, axis=-1)
    y_m2f = transpose(matmul(A_m2f, transpose(tm, (0, 2, 1))), (0, 2, 1)).reshape(Xf.shape)
    y_f2m = transpose(matmul(A_f2m, transpose(tf, (0, 2, 1))), (0, 2, 1)).reshape(Xm.shape)
    if return_attention:
        return y_m2f, y_f2m, A_m2f, A_f2m
    return y_m2f, y_f2m


def snl_link(X: Tensor, W: Tensor, return_attention: bool = False):
    """Self non-local link: every position attends over its own feature map."""
    if X.ndim < 3:
        raise ShapeMismatch(f"expected (N, C, ...) features, got {X.shape}")
    c = X.shape[1]
    if W.shape != (c, c):
        raise ShapeMismatch(f"link weight {W.shape} does not match {c} channels")
    t = matmul(W, _flatten(X))
    E = matmul(transpose(t, (0, 2, 1)), t)
    A = softmax(E, axis=-1)
    y = transpose(matmul(A, transpose(t, (0, 2, 1))), (0, 2, 1)).reshape(X.shape)
    return (y, A) if return_attention else y


# ---------------------------------------------------------------------------
# residual blocks


def res_down(x: Tensor, p: dict, slope: float = SLOPE) -> Tensor:
    """Stride-2 projection conv plus a two-conv residual branch on its output."""
    if any(s % 2 for s in x.shape[2:]):
        raise ShapeMismatch(f"res_down needs even spatial dims, got {x.shape}")
    y = conv3d(x, p["proj_w"], p.get("proj_b"), stride=2)
    r = conv3d(leaky_relu(y, slope), p["res1_w"], p.get("res1_b"))
    r = conv3d(leaky_relu(r, slope), p["res2_w"], p.get("res2_b"))
    return y + r


def res_up(x: Tensor, skip: Tensor, p: dict, slope: float = SLOPE) -> Tensor:
    """Nearest x2 upsample + conv, concatenate the skip, fuse, then a residual pair."""
    if x.ndim != 5 or skip.ndim != 5 or x.shape[0] != skip.shape[0]:
        raise ShapeMismatch(f"res_up inputs {x.shape}, skip {skip.shape}")
    if tuple(2 * s for s in x.shape[2:]) != skip.shape[2:]:
        raise ShapeMismatch(f"skip spatial dims {skip.shape[2:]} must be twice {x.shape[2:]}")
    u = conv3d(upsample2(x), p["up_w"], p.get("up_b"))
    y = conv3d(concat([u, skip], axis=1), p["fuse_w"], p.get("fuse_b"))
    r = conv3d(leaky_relu(y, slope), p["res1_w"], p.get("res1_b"))
    r = conv3d(leaky_relu(r, slope), p["res2_w"], p.get("res2_b"))
    return y + r


# ---------------------------------------------------------------------------
# parameters


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _conv_param(params, rng, name, cout, cin, dtype, bias, k=3):
    params[name + "_w"] = Tensor(_he_uniform(rng, (cout, cin, k, k, k), cin * k**3, dtype), True, name + "_w")
    if bias:
        params[name + "_b"] = Tensor(np.zeros(cout, dtype), True, name + "_b")


def _down_params(params, rng, prefix, cin, cout, dtype, bias):
    _conv_param(params, rng, prefix + ".proj", cout, cin, dtype, bias)
    _conv_param(params, rng, prefix + ".res1", cout, cout, dtype, bias)
    _conv_param(params, rng, prefix + ".res2", cout, cout, dtype, bias)


def _up_params(params, rng, prefix, cin, cskip, cout, dtype, bias):
    _conv_param(params, rng, prefix + ".up", cout, cin, dtype, bias)
    _conv_param(params, rng, prefix + ".fuse", cout, cout + cskip, dtype, bias)
    _conv_param(params, rng, prefix + ".res1", cout, cout, dtype, bias)
    _conv_param(params, rng, prefix + ".res2", cout, cout, dtype, bias)


def _block(params: dict, prefix: str) -> dict:
    cut = len(prefix) + 1
    return {k[cut:].replace(".", "_"): v for k, v in params.items() if k.startswith(prefix + ".")}


@dataclass
class Model:
    """A built architecture: config plus named parameters.

    The two Siamese branches read the very same ``enc.*`` tensors, so they
    are identical by construction and are stored (and counted) once.
    """

    config: ArchConfig
    params: dict = field(default_factory=dict)
    seed: int = 0
    # momentum velocities of the last training run, keyed like ``params``
    opt_state: dict | None = field(default=None, repr=False, compare=False)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def forward(self, fixed, moving) -> Tensor:
        """Map batches ``(N, 1, d, h, w)`` of fixed/moving volumes to ``(N, 12)``."""
        fixed = fixed if isinstance(fixed, Tensor) else Tensor(np.asarray(fixed, dtype=self.dtype))
        moving = moving if isinstance(moving, Tensor) else Tensor(np.asarray(moving, dtype=self.dtype))
        cfg = self.config
        expect = (1,) + cfg.input_shape
        if fixed.shape != moving.shape or fixed.ndim != 5 or fixed.shape[1:] != expect:
            raise ShapeMismatch(f"expected inputs (N, {expect}), got {fixed.shape} and {moving.shape}")
        if cfg.kind == "ME":
            x = concat([fixed, moving], axis=1)
            for i in range(1, cfg.n_down + 1):
                x = res_down(x, _block(self.params, f"enc.{i}"))
            feat = global_avg_pool(x)
        else:
            feat = self._siamese(fixed, moving)
        h = leaky_relu(linear(feat, self.params["head.fc1_w"], self.params.get("head.fc1_b")), SLOPE)
        return linear(h, self.params["head.fc2_w"], self.params.get("head.fc2_b"))

    __call__ = forward

    def _siamese(self, fixed: Tensor, moving: Tensor) -> Tensor:
        cfg = self.config
        n = fixed.shape[0]
        # both branches run as one batch through the shared weights
        x = concat([fixed, moving], axis=0)
        skips = {}
        for i in range(1, cfg.n_down + 1):
            if cfg.linked(i):
                W = self.params[f"link.{i}.W"]
                if cfg.kind == "DNET":
                    xf, xm = x[:n], x[n:]
                    y_m2f, y_f2m = mnl_link(xf, xm, W)
                    x = concat([xf + y_m2f, xm + y_f2m], axis=0)
                else:
                    x = x + snl_link(x, W)
            if cfg.has_decoder and i > cfg.n_down - cfg.n_up:
                skips[i] = x
            x = res_down(x, _block(self.params, f"enc.{i}"))
        z = concat([x[:n], x[n:]], axis=1)
        if cfg.has_decoder:
            for k in range(1, cfg.n_up + 1):
                s = skips[cfg.n_down - k + 1]
                z = res_up(z, concat([s[:n], s[n:]], axis=1), _block(self.params, f"dec.{k}"))
        return global_avg_pool(z)

    def predict(self, fixed: Volume3, moving: Volume3) -> TransformParams:
        """Estimate the parameters of the transform mapping fixed to moving."""
        if fixed.shape != self.config.input_shape or moving.shape != self.config.input_shape:
            raise ShapeMismatch(f"model expects {self.config.input_shape} volumes, got {fixed.shape} and {moving.shape}")
        f = fixed.data.astype(self.dtype)[None, None]
        m = moving.data.astype(self.dtype)[None, None]
        out = self.forward(Tensor(f), Tensor(m))
        return TransformParams.from_vector(out.data[0].astype(np.float64))

    def predict_batch(self, fixed: np.ndarray, moving: np.ndarray) -> np.ndarray:
        return self.forward(Tensor(fixed.astype(self.dtype)), Tensor(moving.astype(self.dtype))).data


def build(config: ArchConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Allocate and initialise parameters for ``config`` deterministically from ``seed``.

    Convolutions and linear layers use He-uniform fan-in initialisation with
    zero biases; link matrices are uniform with standard deviation ``1/c``.
    """
    if not isinstance(config, ArchConfig):
        raise BadConfig("build() needs an ArchConfig")
    rng = np.random.default_rng(seed)
    params: dict = {}
    c = config.channels
    bias = config.bias
    if config.kind == "ME":
        cin = 2 * c[0]
        for i in range(1, config.n_down + 1):
            _down_params(params, rng, f"enc.{i}", cin if i == 1 else c[i - 1], c[i], dtype, bias)
        feat = c[-1]
    else:
        for i in range(1, config.n_down + 1):
            if config.linked(i):
                # std 1/c keeps the initial embedded-Gaussian logits O(1)
                bound = np.sqrt(3.0) / c[i - 1]
                params[f"link.{i}.W"] = Tensor(
                    rng.uniform(-bound, bound, size=(c[i - 1], c[i - 1])).astype(dtype), True, f"link.{i}.W"
                )
            _down_params(params, rng, f"enc.{i}", c[i - 1], c[i], dtype, bias)
        feat = 2 * c[-1]
        if config.has_decoder:
            for k in range(1, config.n_up + 1):
                j = config.n_down - k + 1
                cout = c[j - 1]
                _up_params(params, rng, f"dec.{k}", feat, 2 * c[j - 1], cout, dtype, bias)
                feat = cout
    hidden, out = config.head_hidden, config.head_out
    params["head.fc1_w"] = Tensor(_he_uniform(rng, (hidden, feat), feat, dtype), True, "head.fc1_w")
    if bias:
        params["head.fc1_b"] = Tensor(np.zeros(hidden, dtype), True, "head.fc1_b")
    params["head.fc2_w"] = Tensor(_he_uniform(rng, (out, hidden), hidden, dtype), True, "head.fc2_w")
    if bias:
        params["head.fc2_b"] = Tensor(np.zeros(out, dtype), True, "head.fc2_b")
    return Model(config, params, seed)


def param_count(model) -> int:
    """Total scalar parameters; shared tensors are counted once."""
    params = model.params if hasattr(model, "params") else model
    seen, total = set(), 0
    for p in params.values():
        if id(p) not in seen:
            seen.add(id(p))
            total += p.data.size
    return total


def predict(model: Model, fixed: Volume3, moving: Volume3) -> TransformParams:
    return model.predict(fixed, moving)
