"""Rigid registration of 3D volumes by direct regression of transform parameters."""

from .errors import (
    BadConfig,
    BadFactor,
    BadRange,
    BadVolumeFile,
    CorruptCheckpoint,
    DegenerateInput,
    DivergenceDetected,
    EmptyInput,
    GraphConsumed,
    NotScalarLoss,
    ShapeMismatch,
    VoxalignError,
)
from .geom import (
    RigidTransform,
    TransformParams,
    axis_angle,
    compose,
    invert,
    orthogonalize6d,
    params_from_transform,
    rotation_error,
    transform_from_params,
    translation_error,
)
from .nets import ArchConfig, Model, build, full_config, param_count, predict, toy_config
from .volume import BinaryMask3, Volume3, binarize, dice, downsample, read_volume, resample_rigid, write_volume

__version__ = "0.1.0"
