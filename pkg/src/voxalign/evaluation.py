"""Registration evaluation: rotation and translation sweeps, per-pair metrics, reports.

Direction convention: a predicted transform ``T`` maps fixed coordinates to
moving ones (``moving = resample_rigid(fixed, T)``), so alignment for DSC warps
the moving volume by ``T^-1``. Everything is computed in radians and
millimetres; degrees and micrometres only appear in the report summary.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadConfig, EmptyInput
from .geom import (
    RigidTransform,
    TransformParams,
    axis_angle,
    canonical,
    invert,
    orthogonalize6d,
    params_from_transform,
    rotation_error,
    translation_error,
)
from .synthgen import SynthConfig, augment, sample_rng
from .volume import DEFAULT_DSC_TAU, Volume3, binarize, dice, resample_rigid

REPORT_HEADER = ["case_id", "angle_rad", "tx_mm", "ty_mm", "tz_mm", "te_mm", "re_rad", "dsc"]
SWEEP_AXIS = np.ones(3) / np.sqrt(3.0)
SWEEP_TRANSLATION_MM = (0.4, 0.4, 0.4)
SWEEP_HALF_RANGE_MM = np.sqrt(3.0) / 2.0


@dataclass
class SweepSpec:
    """Grid of test transforms about a single axis.

    ``mode="rotation"`` varies the angle over ``angle_range`` with translation
    ``fixed_translation``; ``mode="translation"`` fixes the angle at
    ``fixed_rotation_angle`` and moves ``s * axis`` for ``s`` over
    ``translation_range``.
    """

    mode: str = "rotation"
    axis: np.ndarray = field(default_factory=lambda: SWEEP_AXIS.copy())
    n_steps: int = 11
    fixed_translation: np.ndarray = field(default_factory=lambda: np.array(SWEEP_TRANSLATION_MM))
    fixed_rotation_angle: float = np.pi / 2
    angle_range: tuple = (-np.pi, np.pi)
    translation_range: tuple = (-SWEEP_HALF_RANGE_MM, SWEEP_HALF_RANGE_MM)

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=np.float64)
        self.fixed_translation = np.asarray(self.fixed_translation, dtype=np.float64)
        if self.mode not in ("rotation", "translation"):
            raise BadConfig(f"unknown sweep mode {self.mode!r}")
        if abs(np.linalg.norm(self.axis) - 1.0) > 1e-12:
            raise BadConfig("sweep axis must have unit norm")
        if int(self.n_steps) < 2:
            raise BadConfig("n_steps must be at least 2")

    def values(self) -> np.ndarray:
        lo, hi = self.angle_range if self.mode == "rotation" else self.translation_range
        return np.linspace(lo, hi, int(self.n_steps))

    def transforms(self) -> list:
        """``(angle, RigidTransform)`` for every grid step."""
        out = []
        for v in self.values():
            if self.mode == "rotation":
                angle, t = float(v), self.fixed_translation
            else:
                angle, t = float(self.fixed_rotation_angle), v * self.axis
            out.append((angle, RigidTransform(axis_angle(self.axis, angle), t)))
        return out


def rotation_spec(**kw) -> SweepSpec:
    return SweepSpec(mode="rotation", **kw)


def translation_spec(**kw) -> SweepSpec:
    return SweepSpec(mode="translation", **kw)


@dataclass
class EvalRecord:
    case_id: str
    dsc: float
    te_mm: float = float("nan")
    re_rad: float = float("nan")
    has_gt: bool = False
    angle_rad: float = float("nan")
    translation_mm: np.ndarray = field(default_factory=lambda: np.full(3, np.nan))

    def __post_init__(self):
        self.translation_mm = np.asarray(self.translation_mm, dtype=np.float64)
        if not 0.0 <= self.dsc <= 1.0:
            raise ValueError(f"dsc {self.dsc} outside [0, 1]")
        if self.has_gt and not 0.0 <= self.re_rad <= np.pi:
            raise ValueError(f"re_rad {self.re_rad} outside [0, pi]")


class OracleModel:
    """Stand-in model that returns the ground truth it is handed.

    Used to validate the evaluation harness independently of learning. With
    no ground truth available it predicts the identity.
    """

    needs_truth = True

    def predict(self, fixed: Volume3, moving: Volume3, truth: TransformParams | None = None) -> TransformParams:
        if truth is None:
            return params_from_transform(RigidTransform.identity())
        return TransformParams.from_vector(truth.as_vector())


def _predict(model, fixed, moving, truth):
    if getattr(model, "needs_truth", False):
        return model.predict(fixed, moving, truth)
    return model.predict(fixed, moving)


def evaluate_pair(
    model,
    fixed: Volume3,
    moving: Volume3,
    gt: TransformParams | None = None,
    dsc_tau: float = DEFAULT_DSC_TAU,
    case_id: str = "pair",
    angle_rad: float = float("nan"),
) -> EvalRecord:
    """Predict the fixed-to-moving transform and score it.

    DSC compares ``binarize(fixed)`` with ``binarize(moving warped by T_pred^-1)``.
    TE and RE are filled in only when ``gt`` is given.
    """
    pred = _predict(model, fixed, moving, gt)
    T_pred = pred.to_transform()
    aligned = resample_rigid(moving, invert(T_pred), out_shape=fixed.shape)
    score = dice(binarize(fixed, dsc_tau), binarize(aligned, dsc_tau))
    if gt is None:
        return EvalRecord(case_id, score, angle_rad=angle_rad)
    # ground truth goes through the same decoding as the prediction, so an
    # exact prediction scores exactly zero
    R = orthogonalize6d(gt.theta_r[:6])
    return EvalRecord(
        case_id,
        score,
        te_mm=translation_error(gt.theta_t, pred.theta_t),
        re_rad=rotation_error(R, pred.theta_r[:6]),
        has_gt=True,
        angle_rad=angle_rad,
        translation_mm=gt.theta_t.copy(),
    )


def _sweep(model, volumes, spec: SweepSpec, synth: SynthConfig | None, dsc_tau: float, prefix: str) -> list:
    if isinstance(volumes, Volume3):
        volumes = [volumes]
    records = []
    steps = spec.transforms()
    for vi, v in enumerate(volumes):
        for k, (angle, T) in enumerate(steps):
            T = canonical(T)
            gt = params_from_transform(T)
            fixed = v
            moving = resample_rigid(v, T)
            if synth is not None and synth.augment:
                rng = sample_rng(synth.seed, vi * len(steps) + k, stream=2)
                fixed = augment(fixed, rng, synth)
                moving = augment(moving, rng, synth)
            case = f"{prefix}-v{vi:03d}-s{k:02d}"
            records.append(evaluate_pair(model, fixed, moving, gt, dsc_tau, case, angle))
    return sorted(records, key=lambda r: r.case_id)


def rotation_sweep(model, volumes, spec: SweepSpec | None = None, synth: SynthConfig | None = None,
                   dsc_tau: float = DEFAULT_DSC_TAU) -> list:
    """Score ``model`` on each volume rotated over the sweep angles.

    Pairs are clean (no augmentation) unless ``synth`` enables it.
    """
    spec = spec or rotation_spec()
    if spec.mode != "rotation":
        raise BadConfig("rotation_sweep needs a rotation SweepSpec")
    return _sweep(model, volumes, spec, synth, dsc_tau, "rot")


def translation_sweep(model, volumes, spec: SweepSpec | None = None, synth: SynthConfig | None = None,
                      dsc_tau: float = DEFAULT_DSC_TAU) -> list:
    """Score ``model`` on each volume under a fixed rotation and swept translations."""
    spec = spec or translation_spec()
    if spec.mode != "translation":
        raise BadConfig("translation_sweep needs a translation SweepSpec")
    return _sweep(model, volumes, spec, synth, dsc_tau, "trans")


def _stats(values) -> dict:
    x = np.asarray([v for v in values if np.isfinite(v)], dtype=np.float64)
    if x.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(np.mean(x)), "std": float(np.std(x)), "n": int(x.size)}


def summarize(records) -> dict:
    records = list(records)
    if not records:
        raise EmptyInput("no evaluation records")
    te = [r.te_mm for r in records]
    re = [r.re_rad for r in records]
    return {
        "n": len(records),
        "te_mm": _stats(te),
        "te_um": _stats([x * 1000.0 for x in te]),
        "re_rad": _stats(re),
        "re_deg": _stats([np.degrees(x) for x in re]),
        "dsc": _stats([r.dsc for r in records]),
    }


def report_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in sorted(records, key=lambda r: r.case_id):
        t = r.translation_mm
        w.writerow([r.case_id, repr(float(r.angle_rad)), *(repr(float(x)) for x in t),
                    repr(float(r.te_mm)), repr(float(r.re_rad)), repr(float(r.dsc))])
    return buf.getvalue()


def write_report(records, path) -> dict:
    """Write the per-case CSV at ``path`` and the summary JSON next to it.

    The summary lands at ``path`` with suffix ``.json`` and is also returned.
    """
    from .train import atomic_write

    records = sorted(records, key=lambda r: r.case_id)
    summary = summarize(records)
    path = Path(path)
    atomic_write(path, report_csv(records).encode())
    atomic_write(path.with_suffix(".json"), (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode())
    return summary


def read_report(path) -> list:
    """Parse a per-case CSV back into dicts of floats (``case_id`` kept as text)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (v if k == "case_id" else float(v)) for k, v in row.items()} for row in rows]
