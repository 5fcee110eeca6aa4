"""Linear constant-velocity motion model with an adaptive search variance.

Velocity is a blend of the previous velocity and the displacement over the
last few frames; the search-area standard deviation grows while a target is
untracked and tracks the prediction error while it is tracked.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .core import TargetState

__all__ = ["MotionState", "predict", "update_velocity", "update_variance"]


@dataclass
class MotionState:
    velocity: np.ndarray  # (vx, vy) px/frame
    sigma_xy: float
    sigma_w: float
    sigma_h: float
    history: deque = field(default_factory=deque)  # (frame, center) pairs
    untracked_streak: int = 0
    predicted_center: np.ndarray | None = None  # l~_t, set by predict()

    @classmethod
    def initial(cls, h0: float) -> "MotionState":
        return cls(velocity=np.zeros(2), sigma_xy=h0 / 20.0, sigma_w=h0 / 30.0,
                   sigma_h=h0 / 30.0)

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([self.sigma_xy, self.sigma_xy, self.sigma_w, self.sigma_h])


def predict(m: MotionState, x: TargetState) -> TargetState:
    """Constant-velocity location prediction; scale is carried over unchanged."""
    pred = TargetState(x.x + m.velocity[0], x.y + m.velocity[1], x.w, x.h)
    m.predicted_center = np.array([pred.x, pred.y])
    return pred


def update_velocity(m: MotionState, center: np.ndarray, frame: int, t_gap: int,
                    alpha: float) -> None:
    """Blend the old velocity with the displacement over up to ``t_gap`` frames.

    With an empty history (target just born) the velocity is left unchanged.
    The center is recorded afterwards, so the history only ever holds reliable
    (tracked) locations.
    """
    center = np.asarray(center, dtype=np.float64)
    while m.history and m.history[0][0] < frame - t_gap:
        m.history.popleft()
    if m.history:
        f0, l0 = m.history[0]
        g = frame - f0
        if g >= 1:
            v_obs = (center - l0) / g
            m.velocity = alpha * m.velocity + (1.0 - alpha) * v_obs
    m.history.append((frame, center))


def update_variance(m: MotionState, x: TargetState, tracked: bool) -> None:
    """Four-case search-variance update.

    Untracked frames grow sigma by 1.05; tracked frames rescale it by the
    prediction error ratio r when r leaves the [0.25, 0.75] band (strict
    inequalities; the boundaries leave sigma unchanged). Width/height sigmas
    always follow the current target height.
    """
    m.sigma_w = x.h / 30.0
    m.sigma_h = x.h / 30.0
    if not tracked:
        m.sigma_xy = 1.05 * m.sigma_xy
        return
    if m.predicted_center is None:
        return
    err = float(np.hypot(x.x - m.predicted_center[0], x.y - m.predicted_center[1]))
    r = err / (3.0 * m.sigma_xy)
    if r > 0.75:
        m.sigma_xy = r * m.sigma_xy / 0.75
    elif r < 0.25:
        m.sigma_xy = max(x.h / 20.0, m.sigma_xy / 2.0)
