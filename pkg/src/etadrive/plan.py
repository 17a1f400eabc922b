"""Action plans and their residual encoding.

A plan is 10 path points at 1 m arc-length spacing plus 4 waypoints at
0.5 s intervals, all in the ego frame (x forward, y left). Networks predict
residuals: the first point of each group relative to the origin, every later
point relative to its predecessor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError

N_PATH = 10
N_WAYPOINTS = 4
N_POINTS = N_PATH + N_WAYPOINTS
PATH_SPACING = 1.0
WAYPOINT_TIMES = (0.5, 1.0, 1.5, 2.0)


def _check_residuals(res: np.ndarray) -> np.ndarray:
    res = np.asarray(res, dtype=np.float64)
    if res.shape != (N_POINTS, 2):
        raise DimensionError(f"residuals must be ({N_POINTS}, 2), got {res.shape}")
    if not np.isfinite(res).all():
        raise NumericError("non-finite action residuals")
    return res


@dataclass(frozen=True)
class ActionPlan:
    path: np.ndarray       # (10, 2)
    waypoints: np.ndarray  # (4, 2)

    def __post_init__(self):
        path = np.asarray(self.path, dtype=np.float64)
        wps = np.asarray(self.waypoints, dtype=np.float64)
        if path.shape != (N_PATH, 2) or wps.shape != (N_WAYPOINTS, 2):
            raise DimensionError(f"plan shapes {path.shape}, {wps.shape}")
        if not (np.isfinite(path).all() and np.isfinite(wps).all()):
            raise NumericError("non-finite plan")
        object.__setattr__(self, "path", path)
        object.__setattr__(self, "waypoints", wps)

    @classmethod
    def zero(cls) -> "ActionPlan":
        return cls(np.zeros((N_PATH, 2)), np.zeros((N_WAYPOINTS, 2)))

    @classmethod
    def from_residuals(cls, residuals: np.ndarray) -> "ActionPlan":
        return reconstruct_action(residuals)

    def residuals(self) -> np.ndarray:
        return to_residuals(self)

    def points(self) -> np.ndarray:
        """All 14 absolute points, path first."""
        return np.concatenate([self.path, self.waypoints])

    def path_arc_lengths(self) -> np.ndarray:
        steps = np.diff(np.vstack([np.zeros((1, 2)), self.path]), axis=0)
        return np.cumsum(np.hypot(steps[:, 0], steps[:, 1]))

    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(np.concatenate([[0.0], self.path_arc_lengths()])) > 0))

    def target_speed(self) -> float:
        """Speed implied by the spacing of the first two waypoints (m/s)."""
        res = np.diff(np.vstack([np.zeros((1, 2)), self.waypoints[:2]]), axis=0)
        dt = WAYPOINT_TIMES[0]
        return float(np.hypot(res[:, 0], res[:, 1]).mean() / dt)


def to_residuals(plan: ActionPlan) -> np.ndarray:
    out = np.empty((N_POINTS, 2))
    out[:N_PATH] = np.diff(plan.path, axis=0, prepend=np.zeros((1, 2)))
    out[N_PATH:] = np.diff(plan.waypoints, axis=0, prepend=np.zeros((1, 2)))
    return out


def reconstruct_action(residuals: np.ndarray) -> ActionPlan:
    """Cumulative sum within the path group and the waypoint group separately."""
    res = _check_residuals(residuals)
    return ActionPlan(np.cumsum(res[:N_PATH], axis=0), np.cumsum(res[N_PATH:], axis=0))
