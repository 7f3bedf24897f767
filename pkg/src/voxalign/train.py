"""Loss, momentum-SGD training loop, learning curves and checkpoints.

Translations enter the loss in millimetres; the ``epsilon`` of the relative
translation term is therefore in mm^2.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import MomentumSGD, Tensor
from .errors import BadConfig, CorruptCheckpoint, DegenerateInput, DivergenceDetected
from .geom import orthogonalize6d, rotation_error, translation_error
from .nets import ArchConfig, Model, build
from .synthgen import SynthConfig, gen_phantom, make_pair, sample_rng

logger = logging.getLogger(__name__)

CURVE_HEADER = ("iteration", "loss", "te_mm", "re_rad")
CKPT_MAGIC = b"DNCK"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.5
    epsilon: float = 0.01

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or not self.epsilon > 0:
            raise ValueError("need alpha, beta >= 0 and epsilon > 0")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    momentum: float = 0.9
    iterations: int = 120_000
    batch_size: int = 4
    seed: int = 0
    checkpoint_interval: int = 0
    val_interval: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise BadConfig(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)


def loss(theta, theta_hat, cfg: LossConfig = LossConfig()) -> float:
    """Registration loss for one sample (numpy, float64).

    ``alpha * |t - t_hat|^2 / (|t|^2 + eps) + beta * |r - r_hat|^2`` over the
    3 translation and all 9 rotation entries.
    """
    theta = np.asarray(theta.as_vector() if hasattr(theta, "as_vector") else theta, dtype=np.float64)
    theta_hat = np.asarray(theta_hat, dtype=np.float64).reshape(-1)
    dr = theta[:9] - theta_hat[:9]
    dt = theta[9:] - theta_hat[9:]
    t = theta[9:]
    return float(cfg.alpha * (dt @ dt) / (t @ t + cfg.epsilon) + cfg.beta * (dr @ dr))


def loss_tensor(theta: np.ndarray, theta_hat: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """Batch-mean loss as a differentiable function of ``theta_hat`` ``(N, 12)``."""
    theta = np.asarray(theta, dtype=theta_hat.dtype).reshape(theta_hat.shape)
    diff = theta_hat - Tensor(theta)
    sq = diff * diff
    t = theta[:, 9:]
    # per-sample weights: alpha / (|t|^2 + eps) on translation, beta on rotation
    weights = np.empty_like(theta)
    weights[:, :9] = cfg.beta
    weights[:, 9:] = (cfg.alpha / ((t * t).sum(axis=1) + cfg.epsilon))[:, None]
    return (sq * Tensor(weights)).sum() * (1.0 / theta.shape[0])


@dataclass
class CurveRecord:
    iteration: int
    loss: float
    te_mm: float
    re_rad: float


@dataclass
class Curves:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)


def batch_errors(theta: np.ndarray, theta_hat: np.ndarray) -> tuple[float, float]:
    """Mean TE (mm) and RE (rad) over a batch of parameter vectors."""
    te, re = [], []
    for gt, pr in zip(np.asarray(theta, np.float64), np.asarray(theta_hat, np.float64)):
        te.append(translation_error(gt[9:], pr[9:]))
        try:
            re.append(rotation_error(orthogonalize6d(gt[:6]), pr[:6]))
        except DegenerateInput:
            re.append(float("nan"))
    return float(np.mean(te)), float(np.mean(re))


# ---------------------------------------------------------------------------
# data


class PairStream:
    """Deterministic stream of training batches built on the fly.

    Sample ``i`` draws everything from ``sample_rng(seed, i)``: which source
    volume (or a fresh phantom when ``sources`` is None), the transform, and
    the augmentation noise. Batch ``b`` holds samples ``b*B .. b*B+B-1`` so the
    stream can be restarted at any iteration.
    """

    def __init__(self, synth: SynthConfig, batch_size: int, sources=None, shape=(16, 16, 16), workers: int = 1,
                 phantom_contrast: float = 0.0, pose_jitter: float | None = None):
        self.synth = synth
        self.batch_size = batch_size
        self.sources = list(sources) if sources is not None else None
        self.shape = tuple(shape)
        self.workers = max(1, int(workers))
        self.phantom_contrast = phantom_contrast
        self.pose_jitter = pose_jitter

    def sample(self, index: int):
        rng = sample_rng(self.synth.seed, index)
        if self.sources is None:
            contrast = bool(rng.random() < self.phantom_contrast)
            v = gen_phantom(rng, self.shape, contrast=contrast, pose_jitter=self.pose_jitter)
        else:
            v = self.sources[int(rng.integers(len(self.sources)))]
        return make_pair(v, rng, self.synth)

    def batch(self, b: int):
        idx = range(b * self.batch_size, (b + 1) * self.batch_size)
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                pairs = list(pool.map(self.sample, idx))
        else:
            pairs = [self.sample(i) for i in idx]
        return stack_pairs(pairs)

    def iter_from(self, start: int = 0):
        b = start
        while True:
            yield self.batch(b)
            b += 1


def stack_pairs(pairs, dtype=np.float32):
    fixed = np.stack([f.data for f, _, _ in pairs])[:, None].astype(dtype)
    moving = np.stack([m.data for _, m, _ in pairs])[:, None].astype(dtype)
    theta = np.stack([t.as_vector() for _, _, t in pairs])
    return fixed, moving, theta


# ---------------------------------------------------------------------------
# training


def evaluate_batches(model: Model, batches, loss_cfg: LossConfig = LossConfig(), chunk: int = 16):
    """Mean loss, TE and RE of ``model`` over ``(fixed, moving, theta)`` arrays."""
    fixed, moving, theta = batches
    preds = []
    for s in range(0, len(theta), chunk):
        preds.append(model.predict_batch(fixed[s : s + chunk], moving[s : s + chunk]))
    pred = np.concatenate(preds).astype(np.float64)
    losses = [loss(t, p, loss_cfg) for t, p in zip(theta, pred)]
    te, re = batch_errors(theta, pred)
    return float(np.mean(losses)), te, re


def train(
    model: Model,
    data_stream,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig = LossConfig(),
    *,
    start_iteration: int = 0,
    opt_state: dict | None = None,
    checkpoint_path=None,
    val_set=None,
    log_every: int = 0,
):
    """Run momentum SGD for ``train_cfg.iterations`` total iterations.

    ``data_stream`` is either an iterable of ``(fixed, moving, theta)`` batches
    or a :class:`PairStream`; a stream is restarted at ``start_iteration`` so a
    resumed run consumes exactly the batches an uninterrupted one would.
    Returns ``(model, curves)``; ``curves.train`` holds one record per
    iteration and ``curves.val`` one per validation pass.
    """
    opt = MomentumSGD(model.params, lr=train_cfg.lr, momentum=train_cfg.momentum)
    if opt_state:
        opt.state = {k: v.copy() for k, v in opt_state.items()}
    batches = data_stream.iter_from(start_iteration) if isinstance(data_stream, PairStream) else iter(data_stream)
    curves = Curves()
    last_good = None
    for it in range(start_iteration, train_cfg.iterations):
        fixed, moving, theta = next(batches)
        opt.zero_grad()
        pred = model.forward(Tensor(fixed.astype(model.dtype)), Tensor(moving.astype(model.dtype)))
        L = loss_tensor(theta, pred, loss_cfg)
        value = L.item()
        if not np.isfinite(value):
            raise DivergenceDetected(it, value, last_good)
        L.backward()
        opt.step()
        te, re = batch_errors(theta, pred.data)
        curves.train.append(CurveRecord(it + 1, value, te, re))
        done = it + 1
        if log_every and done % log_every == 0:
            logger.info("iter %d loss %.5f te %.4f mm re %.3f rad", done, value, te, re)
        if val_set is not None and train_cfg.val_interval and done % train_cfg.val_interval == 0:
            curves.val.append(CurveRecord(done, *evaluate_batches(model, val_set, loss_cfg)))
        if checkpoint_path is not None and train_cfg.checkpoint_interval and done % train_cfg.checkpoint_interval == 0:
            save_checkpoint(model, opt.state, checkpoint_path, iteration=done)
            last_good = checkpoint_path
    model.opt_state = opt.state
    return model, curves


def write_curve(records, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_HEADER)
    for r in records:
        writer.writerow([r.iteration, repr(float(r.loss)), repr(float(r.te_mm)), repr(float(r.re_rad))])
    atomic_write(path, buf.getvalue().encode())


def read_curve(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [CurveRecord(int(r["iteration"]), float(r["loss"]), float(r["te_mm"]), float(r["re_rad"])) for r in rows]


# ---------------------------------------------------------------------------
# checkpoints


def atomic_write(path, payload: bytes) -> None:
    """Write ``payload`` to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _pack_table(table) -> bytes:
    out = [struct.pack("<I", len(table))]
    for name, arr in table:
        arr = np.asarray(arr)
        code = _DTYPE_CODES[arr.dtype]
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


def _unpack_table(buf: bytes, pos: int):
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    table = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + ln].decode()
        pos += ln
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape)
        pos += count * dt.itemsize
        table[name] = arr.astype(dt.newbyteorder("="))
    return table, pos


def checkpoint_bytes(model: Model, opt_state: dict | None, iteration: int = 0) -> bytes:
    blob = json.dumps({"arch": model.config.to_dict(), "seed": model.seed}, sort_keys=True).encode()
    opt_state = opt_state or {}
    body = b"".join(
        [
            CKPT_MAGIC,
            struct.pack("<IQ", CKPT_VERSION, iteration),
            struct.pack("<I", len(blob)),
            blob,
            _pack_table([(k, p.data) for k, p in model.params.items()]),
            _pack_table([(k, opt_state[k]) for k in model.params if k in opt_state]),
        ]
    )
    return body + hashlib.blake2b(body, digest_size=8).digest()


def save_checkpoint(model: Model, opt_state: dict | None, path, iteration: int = 0) -> None:
    """Binary checkpoint: magic, version, iteration, config JSON, parameters, velocities, checksum."""
    atomic_write(path, checkpoint_bytes(model, opt_state, iteration))


def load_checkpoint(path):
    """Returns ``(model, opt_state, iteration)``; raises :class:`CorruptCheckpoint`."""
    buf = Path(path).read_bytes()
    if len(buf) < 28 or buf[:4] != CKPT_MAGIC:
        raise CorruptCheckpoint(f"{path}: not a checkpoint (bad magic)")
    body, digest = buf[:-8], buf[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise CorruptCheckpoint(f"{path}: checksum mismatch")
    version, iteration = struct.unpack_from("<IQ", buf, 4)
    if version != CKPT_VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported version {version}")
    try:
        (ln,) = struct.unpack_from("<I", buf, 16)
        meta = json.loads(buf[20 : 20 + ln].decode())
        params, pos = _unpack_table(body, 20 + ln)
        velocities, pos = _unpack_table(body, pos)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: malformed body ({exc})") from None
    if pos != len(body):
        raise CorruptCheckpoint(f"{path}: trailing bytes")
    config = ArchConfig.from_dict(meta["arch"])
    dtype = next(iter(params.values())).dtype if params else np.float32
    model = build(config, seed=meta.get("seed", 0), dtype=dtype)
    if list(model.params) != list(params):
        raise CorruptCheckpoint(f"{path}: parameter table does not match architecture {config.kind}")
    for name, arr in params.items():
        if model.params[name].data.shape != arr.shape:
            raise CorruptCheckpoint(f"{path}: shape mismatch for {name}")
        model.params[name].data = arr.copy()
    return model, dict(velocities), int(iteration)
