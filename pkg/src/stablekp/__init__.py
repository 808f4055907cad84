"""Unsupervised stable 3D keypoint detection on point clouds.

A small numpy implementation of a feature proposal network trained with a
probabilistic chamfer objective, plus the evaluation tooling around it.
"""

from .errors import (ConfigError, DegenerateGeometryError, IndeterminateError,
                     InsufficientDataError, InvalidArgumentError, StableKPError,
                     TrainingDivergedError)
from .fpn import KeypointSet
from .geometry import PointCloud, RigidTransform

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DegenerateGeometryError", "IndeterminateError", "InsufficientDataError",
    "InvalidArgumentError", "KeypointSet", "PointCloud", "RigidTransform", "StableKPError",
    "TrainingDivergedError", "__version__",
]
