"""Online multi-object tracking with per-target attention branches."""

from .core import Detection, TargetState, TrackStatus, iou, to_corners
from .engine import ABLATION_PRESETS, EngineConfig, TrackerEngine
from .features import FeatureGeometry, FrameFeatureMap, roi_pool

__version__ = "0.1.0"

__all__ = [
    "Detection",
    "TargetState",
    "TrackStatus",
    "iou",
    "to_corners",
    "EngineConfig",
    "TrackerEngine",
    "ABLATION_PRESETS",
    "FeatureGeometry",
    "FrameFeatureMap",
    "roi_pool",
    "__version__",
]
