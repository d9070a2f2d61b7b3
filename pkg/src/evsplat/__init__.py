"""Event-aided free-trajectory Gaussian-splat reconstruction on CPU.

Jointly recovers a Gaussian-splat scene and a camera trajectory from a
low-frame-rate video plus an event stream: latent-image supervision between
frames, contrast maximization with a gradient-domain constraint, photometric
bundle adjustment, and a two-stage schedule that refits color last.
"""

__version__ = "0.1.0"

from .events import Event, EventFrame, EventStream, SubintervalGrid
from .geometry import CameraIntrinsics, MotionField, Pose
from .renderer import Gaussian, GaussianCloud, RenderedView
from .trainer import TrainConfig, TrainState

__all__ = [
    "Event",
    "EventFrame",
    "EventStream",
    "SubintervalGrid",
    "CameraIntrinsics",
    "MotionField",
    "Pose",
    "Gaussian",
    "GaussianCloud",
    "RenderedView",
    "TrainConfig",
    "TrainState",
    "__version__",
]
