"""Rigid transforms, the continuous 6D rotation encoding, and transform errors.

Conventions
-----------
* Rotations are 3x3 matrices acting on column vectors.
* The 12-value parameter vector is ``[theta_r (9), theta_t (3)]`` where
  ``theta_r`` stacks the columns of ``R`` (first column, second, third).
  Decoding only looks at the first six entries, i.e. the first two columns.
* Angles are radians and translations millimetres everywhere in this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput

_EPS_NORM = 1e-9
_EPS_PARALLEL = 1e-6


@dataclass(frozen=True)
class RigidTransform:
    """Rotation ``R`` followed by translation ``t``: ``p -> R p + t``."""

    R: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"expected R (3,3) and t (3,), got {R.shape} and {t.shape}")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape ``(..., 3)``."""
        return np.asarray(points) @ self.R.T + self.t

    def is_valid(self, tol: float = 1e-6) -> bool:
        ortho = np.max(np.abs(self.R.T @ self.R - np.eye(3)))
        return bool(ortho <= tol and abs(np.linalg.det(self.R) - 1.0) <= tol)

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M


@dataclass(frozen=True)
class TransformParams:
    """The 12 regression targets: 9 rotation entries (column-stacked) + 3 translation (mm)."""

    theta_r: np.ndarray
    theta_t: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.theta_r, dtype=np.float64).reshape(-1)
        t = np.asarray(self.theta_t, dtype=np.float64).reshape(-1)
        if r.shape != (9,) or t.shape != (3,):
            raise ValueError(f"theta_r must have 9 entries and theta_t 3, got {r.size}, {t.size}")
        object.__setattr__(self, "theta_r", r)
        object.__setattr__(self, "theta_t", t)

    @classmethod
    def from_vector(cls, theta) -> "TransformParams":
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        if theta.shape != (12,):
            raise ValueError(f"expected 12 parameters, got {theta.size}")
        return cls(theta[:9], theta[9:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.theta_r, self.theta_t])

    def to_transform(self) -> RigidTransform:
        return transform_from_params(self)


def orthogonalize6d(v) -> np.ndarray:
    """Map a 6-vector to a rotation matrix by Gram-Schmidt.

    The first three entries give the first column direction, the next three
    are projected off it to give the second column, and the third column is
    their cross product.

    Raises
    ------
    DegenerateInput
        If the first 3-vector is ~0 or the two 3-vectors are (anti)parallel.
    """
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape != (6,):
        raise ValueError(f"expected a 6-vector, got {v.size} entries")
    a, b = v[:3], v[3:]
    na = np.sqrt(np.dot(a, a))
    if not na >= _EPS_NORM:
        raise DegenerateInput(f"first column has norm {na:g}")
    r1 = a / na
    u = b - np.dot(r1, b) * r1
    nu = np.sqrt(np.dot(u, u))
    nb = np.sqrt(np.dot(b, b))
    # sin of the angle between a and b is nu / nb
    if not (nu >= _EPS_NORM and nu >= _EPS_PARALLEL * nb):
        raise DegenerateInput("second column is parallel to the first (or zero)")
    r2 = u / nu
    r3 = np.cross(r1, r2)
    return np.stack([r1, r2, r3], axis=1)


def params_from_transform(T: RigidTransform) -> TransformParams:
    return TransformParams(T.R.T.reshape(9), T.t)


def transform_from_params(theta: TransformParams) -> RigidTransform:
    """Inference-path decoding: ``[O(theta_r[:6]), theta_t]``."""
    return RigidTransform(orthogonalize6d(theta.theta_r[:6]), theta.theta_t)


def canonical(T: RigidTransform) -> RigidTransform:
    """Round ``T`` through its encoding so the rotation is exactly what decoding yields."""
    return transform_from_params(params_from_transform(T))


def compose(A: RigidTransform, B: RigidTransform) -> RigidTransform:
    """``compose(A, B)(p) == A(B(p))``."""
    return RigidTransform(A.R @ B.R, A.R @ B.t + A.t)


def invert(T: RigidTransform) -> RigidTransform:
    Rt = T.R.T
    return RigidTransform(Rt, -(Rt @ T.t))


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a rotation of ``angle`` radians about ``axis``."""
    k = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(k)
    if n < _EPS_NORM:
        raise DegenerateInput("rotation axis has zero length")
    k = k / n
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def rotation_error(R, R_hat_6) -> float:
    """Geodesic angle (radians, in [0, pi]) between ``R`` and ``O(R_hat_6)``.

    Evaluates ``arccos((tr(R^T R_hat) - 1) / 2)`` through ``atan2`` of the
    skew and trace parts of ``R^T R_hat``. Both forms agree mathematically; this
    one keeps full precision near 0 and pi and returns exactly 0 when the
    decoded prediction is bitwise equal to ``R``.
    """
    R = np.asarray(R, dtype=np.float64)
    R_hat = orthogonalize6d(np.asarray(R_hat_6, dtype=np.float64).reshape(-1)[:6])
    # fixed summation order keeps M exactly symmetric when R_hat == R
    M = (R[:, :, None] * R_hat[:, None, :]).sum(axis=0)
    cos2 = np.clip(M[0, 0] + M[1, 1] + M[2, 2] - 1.0, -2.0, 2.0)
    skew = np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    sin2 = np.sqrt(np.dot(skew, skew))
    return float(np.arctan2(sin2, cos2))


def translation_error(t, t_hat) -> float:
    d = np.asarray(t, dtype=np.float64) - np.asarray(t_hat, dtype=np.float64)
    return float(np.sqrt(np.dot(d, d)))
