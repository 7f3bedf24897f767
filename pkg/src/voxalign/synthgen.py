"""Synthetic training pairs: random rigid transforms, augmentation and phantoms.

Every sample owns an independent RNG stream derived from ``(seed, index)``
through :class:`numpy.random.SeedSequence`, so datasets are identical no
matter how many workers build them or in which order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .geom import (
    RigidTransform,
    TransformParams,
    axis_angle,
    canonical,
    params_from_transform,
)
from .volume import Volume3, resample_rigid

# 64^3 voxels at 80 um: the field of view the translation range was set for
DEFAULT_EXTENT_MM = 5.12


@dataclass(frozen=True)
class SynthConfig:
    t_range_mm: float = 0.64
    angle_range: tuple = (-np.pi, np.pi)
    intensity_scale_range: tuple = (0.95, 1.05)
    noise_sigma: float = 0.001
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if not self.t_range_mm > 0:
            raise ValueError("t_range_mm must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        lo, hi = self.intensity_scale_range
        if not (0 < lo <= hi):
            raise ValueError("intensity scale range must be positive and ordered")
        if self.angle_range[0] > self.angle_range[1]:
            raise ValueError("angle range must be ordered")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["angle_range"] = list(self.angle_range)
        d["intensity_scale_range"] = list(self.intensity_scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("angle_range", "intensity_scale_range"):
            if key in d:
                d[key] = tuple(float(x) for x in d[key])
        return cls(**d)


def sample_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for sample ``index`` of a dataset seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), int(index)]))


def sample_axis_uniform(rng: np.random.Generator) -> np.ndarray:
    while True:
        g = rng.standard_normal(3)
        n = np.sqrt(np.dot(g, g))
        if n > 1e-8:
            return g / n


def sample_rigid(rng: np.random.Generator, cfg: SynthConfig) -> tuple[TransformParams, RigidTransform]:
    """Random rotation about a uniform axis plus a uniform per-axis translation.

    The returned transform is the decoding of the returned parameters, so the
    two agree bit-for-bit.
    """
    axis = sample_axis_uniform(rng)
    angle = rng.uniform(*cfg.angle_range)
    t = rng.uniform(-cfg.t_range_mm, cfg.t_range_mm, size=3)
    T = canonical(RigidTransform(axis_angle(axis, angle), t))
    return params_from_transform(T), T


def augment(v: Volume3, rng: np.random.Generator, cfg: SynthConfig) -> Volume3:
    scale = rng.uniform(*cfg.intensity_scale_range)
    noise = rng.normal(0.0, cfg.noise_sigma, size=v.shape) if cfg.noise_sigma > 0 else 0.0
    out = np.clip(scale * v.data.astype(np.float64) + noise, 0.0, 1.0)
    return v.with_data(out.astype(v.data.dtype if v.data.dtype.kind == "f" else np.float64))


def make_pair(v: Volume3, rng: np.random.Generator, cfg: SynthConfig, transform: RigidTransform | None = None):
    """Build ``(fixed, moving, theta)`` from one preprocessed volume.

    ``moving = resample_rigid(v, T)``; both sides then receive independent
    augmentation unless ``cfg.augment`` is off. Pass ``transform`` to override
    the random draw (it is canonicalised through its encoding).
    """
    if transform is None:
        theta, T = sample_rigid(rng, cfg)
    else:
        T = canonical(transform)
        theta = params_from_transform(T)
    moving = resample_rigid(v, T)
    fixed = v.with_data(v.data.copy())
    if cfg.augment:
        fixed = augment(fixed, rng, cfg)
        moving = augment(moving, rng, cfg)
    return fixed, moving, theta


def _smooth_inside(sdf, width):
    """Soft indicator of ``sdf < 0`` with a linear ramp ``width`` wide."""
    return np.clip(0.5 - sdf / width, 0.0, 1.0)


def _segment_distance(p, a, b):
    ab = b - a
    u = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    closest = a + u[..., None] * ab
    return np.linalg.norm(p - closest, axis=-1), u


def gen_phantom(
    rng: np.random.Generator,
    shape=(16, 16, 16),
    extent_mm: float = DEFAULT_EXTENT_MM,
    contrast: bool = False,
    pose_jitter: float | None = None,
) -> Volume3:
    """A procedural bone-like phantom standing in for a preprocessed CT scan.

    The object is a curved hollow shaft ending in a solid bulb, with one to
    three small detached fragments. Geometry is drawn in coordinates relative
    to the field of view, so the same generator state gives the same object
    at any grid resolution. The object is kept within a ball that stays in view
    under any rotation plus the default translation range. With ``contrast``
    a dim cap is added over the bulb, mimicking enhanced cartilage.

    ``pose_jitter`` bounds the object's orientation: ``None`` draws a uniformly
    random pose, a number ``a`` tilts a canonical pose (shaft along the first
    axis, bulb toward negative) by an angle drawn from ``U(-a, a)`` about a
    uniform axis.
    """
    shape = tuple(int(n) for n in shape)
    spacing = np.asarray([extent_mm / n for n in shape])
    origin = -(np.asarray(shape) - 1) * spacing / 2.0
    # unit = half the field of view
    half = extent_mm / 2.0
    grids = np.meshgrid(*[origin[a] + np.arange(shape[a]) * spacing[a] for a in range(3)], indexing="ij")
    p = np.stack(grids, axis=-1) / half
    ramp = 1.5 * float(np.max(spacing)) / half

    if pose_jitter is None:
        frame = np.linalg.qr(rng.standard_normal((3, 3)))[0]
        frame = frame * np.sign(np.linalg.det(frame))
    else:
        frame = axis_angle(sample_axis_uniform(rng), rng.uniform(-pose_jitter, pose_jitter))
    length = rng.uniform(0.68, 0.76)
    bend = rng.uniform(0.12, 0.22)
    bulb_axes = np.array([rng.uniform(0.26, 0.3), rng.uniform(0.22, 0.26), rng.uniform(0.18, 0.22)])
    # shaft: polyline along a bent curve on the local x axis; the bulb caps the
    # -x end and the whole object is centred on the middle of its long axis
    ts = np.linspace(0.0, 1.0, 7)
    x0 = -(length + bulb_axes[0]) / 2.0 + bulb_axes[0]
    local_pts = np.stack([x0 + ts * length, bend * (4 * (ts - 0.5) ** 2 - 1) / 2, 0.3 * bend * (ts - 0.5)], axis=1)
    local_pts[:, 1] -= local_pts[:, 1].mean()
    pts = local_pts @ frame.T
    r_out = rng.uniform(0.19, 0.23)
    wall = max(rng.uniform(0.1, 0.12), 2.2 * ramp)
    r_in = r_out - wall

    dist = np.full(shape, np.inf)
    for a, b in zip(pts[:-1], pts[1:]):
        d, _ = _segment_distance(p, a, b)
        dist = np.minimum(dist, d)
    shaft = _smooth_inside(dist - r_out, ramp) * (1.0 - _smooth_inside(dist - r_in, ramp))
    vol = rng.uniform(0.65, 0.8) * shaft

    bulb_c = pts[0]
    bulb_frame = frame @ np.linalg.qr(np.eye(3) + 0.3 * rng.standard_normal((3, 3)))[0]
    local = (p - bulb_c) @ bulb_frame
    ell = np.sqrt(np.sum((local / bulb_axes) ** 2, axis=-1))
    bulb = _smooth_inside((ell - 1.0) * bulb_axes.min(), ramp)
    vol = np.maximum(vol, rng.uniform(0.85, 1.0) * bulb)

    if contrast:
        cap = _smooth_inside((ell - 1.25) * bulb_axes.min(), ramp) * (1.0 - bulb)
        cap *= ((p - bulb_c) @ frame[:, 0] < 0).astype(float)
        vol = np.maximum(vol, 0.35 * cap)

    for _ in range(int(rng.integers(1, 4))):
        # fragments sit beside the shaft, away from the bulb
        anchor = pts[int(rng.integers(2, len(pts)))]
        offset = sample_axis_uniform(rng) * rng.uniform(0.32, 0.4)
        c = anchor + offset
        c *= min(1.0, 0.5 / np.linalg.norm(c))
        ax = rng.uniform(0.07, 0.11, size=3)
        ax = np.maximum(ax, 1.2 * ramp)
        fr = np.linalg.qr(rng.standard_normal((3, 3)))[0]
        e = np.sqrt(np.sum((((p - c) @ fr) / ax) ** 2, axis=-1))
        vol = np.maximum(vol, 1.0 * _smooth_inside((e - 1.0) * ax.min(), ramp))

    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)
    return Volume3(vol, spacing, origin)
