"""Layered per-pixel 3D Gaussian scenes with a differentiable splat renderer."""

import os as _os

# The numba pool size is fixed when numba is first imported; keep room for
# --threads 8 even on small machines.
_os.environ.setdefault("NUMBA_NUM_THREADS", str(max(8, _os.cpu_count() or 1)))
_os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from .geometry import CameraIntrinsics, Pose, project_point, unproject_pixel  # noqa: E402
from .scene import Gaussian3D, GaussianScene, concat_scenes, covariance_of  # noqa: E402
from .sh import eval_sh  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "Pose",
    "project_point",
    "unproject_pixel",
    "Gaussian3D",
    "GaussianScene",
    "concat_scenes",
    "covariance_of",
    "eval_sh",
]
