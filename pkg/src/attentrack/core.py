"""Bounding-box geometry and the small value types shared by every module.

Boxes are center+size ``[x, y, w, h]`` in continuous (sub-pixel) coordinates
everywhere inside the engine.  MOTChallenge files use top-left+size and are
converted at the I/O boundary.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "TargetState",
    "Detection",
    "TrackStatus",
    "iou",
    "iou_matrix",
    "to_corners",
    "from_corners",
    "boxes_to_array",
]


@dataclass(frozen=True)
class TargetState:
    """One target's bounding box at a frame: center (x, y) and size (w, h)."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"TargetState.{name} must be finite, got {v!r}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def shifted(self, dx: float, dy: float) -> "TargetState":
        return TargetState(self.x + dx, self.y + dy, self.w, self.h)


@dataclass(frozen=True)
class Detection:
    """A detector output: box plus a confidence normalized to [0, 1]."""

    state: TargetState
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score must be in [0, 1], got {self.score}")


class TrackStatus(enum.Enum):
    TRACKED = "tracked"
    UNTRACKED = "untracked"
    TERMINATED = "terminated"


def to_corners(s: TargetState) -> tuple[float, float, float, float]:
    """(left, top, right, bottom) of a center+size box."""
    hw, hh = s.w / 2.0, s.h / 2.0
    return (s.x - hw, s.y - hh, s.x + hw, s.y + hh)


def from_corners(left: float, top: float, right: float, bottom: float) -> TargetState:
    return TargetState((left + right) / 2.0, (top + bottom) / 2.0, right - left, bottom - top)


def iou(a: TargetState, b: TargetState) -> float:
    """Intersection-over-union of two center+size boxes, in [0, 1]."""
    al, at, ar, ab = to_corners(a)
    bl, bt, br, bb = to_corners(b)
    iw = min(ar, br) - max(al, bl)
    ih = min(ab, bb) - max(at, bt)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


def boxes_to_array(boxes) -> np.ndarray:
    """Stack TargetStates (or 4-sequences) into an (N, 4) float array."""
    out = np.empty((len(boxes), 4), dtype=np.float64)
    for i, b in enumerate(boxes):
        if isinstance(b, TargetState):
            out[i, 0], out[i, 1], out[i, 2], out[i, 3] = b.x, b.y, b.w, b.h
        else:
            out[i] = b
    return out


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) arrays of [x, y, w, h] boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    al = a[:, 0] - a[:, 2] / 2.0
    at = a[:, 1] - a[:, 3] / 2.0
    ar = a[:, 0] + a[:, 2] / 2.0
    ab = a[:, 1] + a[:, 3] / 2.0
    bl = b[:, 0] - b[:, 2] / 2.0
    bt = b[:, 1] - b[:, 3] / 2.0
    br = b[:, 0] + b[:, 2] / 2.0
    bb = b[:, 1] + b[:, 3] / 2.0
    iw = np.minimum(ar[:, None], br[None, :]) - np.maximum(al[:, None], bl[None, :])
    ih = np.minimum(ab[:, None], bb[None, :]) - np.maximum(at[:, None], bt[None, :])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] * a[:, 3])[:, None]
    area_b = (b[:, 2] * b[:, 3])[None, :]
    union = area_a + area_b - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0.0, inter / union, 0.0)
    return out
