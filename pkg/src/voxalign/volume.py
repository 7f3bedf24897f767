"""3D scalar volumes: preprocessing, rigid resampling, downsampling and overlap.

Voxel ``(i, j, k)`` has its centre at ``origin + (i, j, k) * spacing`` (mm).
Rigid transforms act about the physical centre of the volume, so
``T(p) = R (p - c) + c + t``.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadFactor, BadRange, BadVolumeFile, ShapeMismatch
from .geom import RigidTransform

VOL_MAGIC = b"VOL3"
VOL_VERSION = 1
_HEADER = struct.Struct("<4sI3I3f3f")
HEADER_SIZE = 64

DEFAULT_DSC_TAU = 0.3


def worker_count() -> int:
    """Thread count from ``VOXALIGN_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("VOXALIGN_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class Volume3:
    data: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeMismatch(f"volume data must be 3D and non-empty, got {self.data.shape}")
        if np.any(self.spacing <= 0):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def center(self) -> np.ndarray:
        return self.origin + (np.asarray(self.shape) - 1) * self.spacing / 2.0

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.shape) * self.spacing

    def with_data(self, data) -> "Volume3":
        return Volume3(data, self.spacing.copy(), self.origin.copy())


@dataclass
class BinaryMask3:
    data: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.data = np.asarray(self.data).astype(np.uint8)
        if self.data.ndim != 3:
            raise ShapeMismatch(f"mask must be 3D, got {self.data.shape}")
        if np.any(self.data > 1):
            raise ValueError("mask values must be 0 or 1")
        self.spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)

    @property
    def shape(self) -> tuple:
        return self.data.shape


def threshold_normalize(v: Volume3, x_th: float, x_max: float) -> Volume3:
    """``ReLU(x - x_th) / (x_max - x_th)``, clipped at 1 for values above ``x_max``."""
    if not x_max > x_th:
        raise BadRange(f"x_max ({x_max}) must exceed x_th ({x_th})")
    x = v.data.astype(np.float64)
    out = np.maximum(x - x_th, 0.0) / (x_max - x_th)
    # x_max is a dataset-wide constant; a single volume may still exceed it
    np.minimum(out, 1.0, out=out)
    return v.with_data(out.astype(v.data.dtype if v.data.dtype.kind == "f" else np.float64))


def _index_map(v: Volume3, T: RigidTransform, out_shape):
    """Affine map from output voxel index to input voxel index for ``T^-1``.

    Works in index space with ``A[i, j] = R^T[i, j] * s[j] / s[i]`` so that an
    identity rotation yields exactly unit diagonal entries.
    """
    s = v.spacing
    Rt = T.R.T
    A = Rt * (s[None, :] / s[:, None])
    c_in = (np.asarray(v.shape) - 1) / 2.0
    c_out = (np.asarray(out_shape) - 1) / 2.0
    shift = (Rt @ T.t) / s
    return A, c_in, c_out, shift


def _trilinear(data, qi, qj, qk, fill):
    d, h, w = data.shape
    inside = (qi >= 0) & (qi <= d - 1) & (qj >= 0) & (qj <= h - 1) & (qk >= 0) & (qk <= w - 1)
    qi = np.where(inside, qi, 0.0)
    qj = np.where(inside, qj, 0.0)
    qk = np.where(inside, qk, 0.0)
    i0 = np.floor(qi).astype(np.intp)
    j0 = np.floor(qj).astype(np.intp)
    k0 = np.floor(qk).astype(np.intp)
    fi, fj, fk = qi - i0, qj - j0, qk - k0
    i1 = np.minimum(i0 + 1, d - 1)
    j1 = np.minimum(j0 + 1, h - 1)
    k1 = np.minimum(k0 + 1, w - 1)
    c00 = data[i0, j0, k0] * (1 - fk) + data[i0, j0, k1] * fk
    c01 = data[i0, j1, k0] * (1 - fk) + data[i0, j1, k1] * fk
    c10 = data[i1, j0, k0] * (1 - fk) + data[i1, j0, k1] * fk
    c11 = data[i1, j1, k0] * (1 - fk) + data[i1, j1, k1] * fk
    c0 = c00 * (1 - fj) + c01 * fj
    c1 = c10 * (1 - fj) + c11 * fj
    val = c0 * (1 - fi) + c1 * fi
    return np.where(inside, val, fill)


def resample_rigid(
    v: Volume3,
    T: RigidTransform,
    out_shape=None,
    fill: float = 0.0,
    workers: int | None = None,
) -> Volume3:
    """Warp ``v`` by ``T`` about its centre: ``out(p) = v(T^-1 p)``.

    The output grid shares spacing with ``v`` and is centred on the same
    physical point. Samples falling outside ``v`` take ``fill``. Output slabs
    along the first axis are split across ``workers`` threads; every voxel is
    computed independently, so the result does not depend on the split.
    """
    out_shape = tuple(v.shape if out_shape is None else out_shape)
    A, c_in, c_out, shift = _index_map(v, T, out_shape)
    data = v.data.astype(np.float64)
    out = np.empty(out_shape, dtype=np.float64)
    jj, kk = np.meshgrid(
        np.arange(out_shape[1], dtype=np.float64) - c_out[1],
        np.arange(out_shape[2], dtype=np.float64) - c_out[2],
        indexing="ij",
    )

    def run(lo, hi):
        ii = (np.arange(lo, hi, dtype=np.float64) - c_out[0])[:, None, None]
        q = [A[r, 0] * ii + A[r, 1] * jj + A[r, 2] * kk - shift[r] + c_in[r] for r in range(3)]
        out[lo:hi] = _trilinear(data, *q, fill)

    n = workers or worker_count()
    bounds = np.linspace(0, out_shape[0], min(n, out_shape[0]) + 1).astype(int)
    chunks = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    if len(chunks) == 1:
        run(*chunks[0])
    else:
        with ThreadPoolExecutor(len(chunks)) as pool:
            list(pool.map(lambda c: run(*c), chunks))

    origin = v.center - (np.asarray(out_shape) - 1) * v.spacing / 2.0
    dtype = v.data.dtype if v.data.dtype.kind == "f" else np.float64
    return Volume3(out.astype(dtype, copy=False), v.spacing.copy(), origin)


def downsample(v: Volume3, factor: int) -> Volume3:
    """Box-filter downsampling by an integer factor along every axis."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise BadFactor(f"factor must be a positive integer, got {factor!r}")
    if any(n % factor for n in v.shape):
        raise BadFactor(f"factor {factor} does not divide shape {v.shape}")
    if factor == 1:
        return v.with_data(v.data.copy())
    d, h, w = (n // factor for n in v.shape)
    blocks = v.data.reshape(d, factor, h, factor, w, factor).astype(np.float64)
    out = blocks.mean(axis=(1, 3, 5))
    origin = v.origin + (factor - 1) * v.spacing / 2.0
    dtype = v.data.dtype if v.data.dtype.kind == "f" else np.float64
    return Volume3(out.astype(dtype), v.spacing * factor, origin)


def binarize(v: Volume3, tau: float = DEFAULT_DSC_TAU) -> BinaryMask3:
    return BinaryMask3((v.data >= tau).astype(np.uint8), v.spacing.copy())


def dice(a: BinaryMask3, b: BinaryMask3) -> float:
    """Dice overlap ``2|A & B| / (|A| + |B|)``; two empty masks score 1."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    A = a.data.astype(bool)
    B = b.data.astype(bool)
    total = int(A.sum()) + int(B.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(A, B).sum()) / total


def write_volume(v: Volume3, path) -> None:
    """Write the raw ``VOL3`` format (64-byte header, little-endian float32 C-order)."""
    d, h, w = v.shape
    header = _HEADER.pack(VOL_MAGIC, VOL_VERSION, d, h, w, *v.spacing, *v.origin)
    header = header.ljust(HEADER_SIZE, b"\0")
    payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_volume(path) -> Volume3:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise BadVolumeFile(f"{path}: truncated header")
    magic, version, d, h, w, *rest = _HEADER.unpack_from(raw, 0)
    if magic != VOL_MAGIC:
        raise BadVolumeFile(f"{path}: bad magic {magic!r}")
    if version != VOL_VERSION:
        raise BadVolumeFile(f"{path}: unsupported version {version}")
    n = d * h * w
    if len(raw) != HEADER_SIZE + 4 * n:
        raise BadVolumeFile(f"{path}: expected {n} voxels, file has {(len(raw) - HEADER_SIZE) / 4:g}")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=HEADER_SIZE).reshape(d, h, w)
    return Volume3(data.astype(np.float32), np.array(rest[:3], dtype=np.float64), np.array(rest[3:], dtype=np.float64))
