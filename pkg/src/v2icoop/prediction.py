"""Lane-based trajectory prediction in the Frenet frame.

On-lane tracks advance along the centerline at their estimated speed while
the lateral offset decays linearly to zero; tracks that match no lane fall
back to constant-velocity extrapolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .scenario import LaneletMap, frenet_project, frenet_to_cartesian
from .tracking import Track

STATIONARY_SPEED = 0.1


@dataclass
class PredictedTrajectory:
    start_time: int
    step: int
    poses: np.ndarray  # (n, 3): x, y, yaw
    source_track_id: Optional[int] = None
    lane_id: Optional[str] = None

    @property
    def horizon(self) -> int:
        return (len(self.poses) - 1) * self.step

    def pose_at(self, index: int) -> np.ndarray:
        return self.poses[index]

    def time_at(self, index: int) -> int:
        return self.start_time + index * self.step


def predict_track(
    track: Track,
    lanelet_map: Optional[LaneletMap],
    horizon: int = 300,
    step: int = 10,
    lateral_decay: float = 2.0,
    stationary_speed: float = STATIONARY_SPEED,
) -> PredictedTrajectory:
    if not track.observations:
        raise ValueError("track has no observations")
    if step <= 0 or horizon % step:
        raise ValueError("step must divide the horizon")
    n = horizon // step + 1
    det = track.latest
    x0, y0 = det.box.center
    yaw0 = det.box.yaw
    pose0 = np.array([x0, y0, yaw0])
    poses = np.tile(pose0, (n, 1))
    vel = np.asarray(track.velocity, dtype=float)
    speed = float(np.hypot(vel[0], vel[1]))
    traj = PredictedTrajectory(track.latest_time, step, poses, track.id)
    if speed < stationary_speed:
        return traj

    ts = np.arange(n) * step / 1000.0
    match = frenet_project(lanelet_map, (x0, y0), yaw0) if lanelet_map is not None else None
    if match is None:
        poses[:, 0] = x0 + vel[0] * ts
        poses[:, 1] = y0 + vel[1] * ts
        return traj

    traj.lane_id = match.lane_id
    for k in range(1, n):
        t = ts[k]
        d = match.d * max(0.0, 1.0 - t / lateral_decay)
        pt, heading = frenet_to_cartesian(lanelet_map, match.lane_id, match.s + speed * t, d)
        poses[k] = (pt[0], pt[1], heading)
    return traj


class LanePredictor(BaseEstimator):
    """``fit`` takes the lane map; ``predict`` maps tracks to trajectories."""

    def __init__(self, horizon=300, step=10, lateral_decay=2.0, stationary_speed=STATIONARY_SPEED):
        self.horizon = horizon
        self.step = step
        self.lateral_decay = lateral_decay
        self.stationary_speed = stationary_speed

    def fit(self, lanelet_map: Optional[LaneletMap], y=None):
        if self.step <= 0 or self.horizon % self.step:
            raise ValueError("step must divide the horizon")
        self.map_ = lanelet_map
        return self

    def predict_one(self, track: Track) -> PredictedTrajectory:
        check_is_fitted(self, "map_")
        return predict_track(track, self.map_, self.horizon, self.step, self.lateral_decay, self.stationary_speed)

    def predict(self, tracks) -> list[PredictedTrajectory]:
        return [self.predict_one(t) for t in tracks]
