"""Cross-modal RGB + thermal depth estimation at desk scale."""

from . import autodiff, dataio, geometry, losses, metrics, networks, pipeline, scenes
from .autodiff import Tensor
from .geometry import CameraRig, DepthMap, ExtrinsicsSE3, Intrinsics
from .pipeline import Config

__all__ = [
    "autodiff", "dataio", "geometry", "losses", "metrics", "networks",
    "pipeline", "scenes", "Tensor", "CameraRig", "DepthMap", "ExtrinsicsSE3",
    "Intrinsics", "Config",
]

__version__ = "0.1.0"
