"""Keypoint-latent dynamics learning and sampling-based MPC for planar pushing."""

__version__ = "0.1.0"

from .core import CameraModel, Pose2, PoseError, pose_error  # noqa: E402
from .sim import EnvState, TaskSpec, make_task  # noqa: E402

__all__ = ["CameraModel", "EnvState", "Pose2", "PoseError", "TaskSpec", "make_task", "pose_error",
           "__version__"]
