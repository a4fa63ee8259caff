"""Evaluation metrics recomputable from a simulation log alone.

Every record is scored against ground truth at its evaluation instant (the
time the CAV holds it: publish time for roadside records, fusion time for
fused ones). A record belongs to the actor whose center is nearest at that
instant; records farther than the matching radius from it score IoU 0.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

from .geometry import OrientedBox, bev_iou
from .simcore import SimulationLog

MATCH_RADIUS = 5.0
STREAMS = ("rsu", "fused", "onboard")
NO_DETECTION = None


class UndefinedMetricError(ValueError):
    """A mean over zero records was requested."""


@dataclass(frozen=True)
class ScoredRecord:
    time: int
    box: OrientedBox
    truth: OrientedBox
    matched: bool

    @property
    def iou(self) -> float:
        return bev_iou(self.box, self.truth) if self.matched else 0.0

    @property
    def sq_error(self) -> float:
        dx = self.box.center[0] - self.truth.center[0]
        dy = self.box.center[1] - self.truth.center[1]
        return dx * dx + dy * dy


class GroundTruthTable:
    """time -> actor -> footprint, built from ``ground_truth`` log rows."""

    def __init__(self, rows: Iterable[tuple]):
        self.frames: dict[int, dict[str, OrientedBox]] = {}
        for time, actor, x, y, yaw, _speed, length, width in rows:
            self.frames.setdefault(time, {})[actor] = OrientedBox((x, y), length, width, yaw)

    def at(self, time: int) -> dict[str, OrientedBox]:
        try:
            return self.frames[time]
        except KeyError:
            raise KeyError(f"no ground truth sampled at {time} ms") from None

    def nearest(self, time: int, x: float, y: float) -> tuple[str, float]:
        best = None
        for actor in sorted(self.at(time)):
            box = self.frames[time][actor]
            d = math.hypot(box.center[0] - x, box.center[1] - y)
            if best is None or d < best[1]:
                best = (actor, d)
        return best


def stream_records(log: SimulationLog, stream: str) -> list[tuple]:
    """``(time, x, y, yaw, length, width)`` per record of a named stream."""
    if stream == "rsu":
        return [(r[0], r[3], r[4], r[5], r[6], r[7]) for r in log.tables["publishes"]]
    if stream == "fused":
        return [(r[0], r[4], r[5], r[6], r[7], r[8]) for r in log.tables["fused"]]
    if stream == "onboard":
        return [(r[0], r[4], r[5], r[6], r[7], r[8]) for r in log.tables["fused"] if r[2] == "ONBOARD"]
    raise ValueError(f"unknown stream {stream!r}")


def target_records(log: SimulationLog, stream: str, target_id: Optional[str] = None,
                   gt: Optional[GroundTruthTable] = None, radius: float = MATCH_RADIUS) -> list[ScoredRecord]:
    target_id = target_id or log.target_id
    gt = gt or GroundTruthTable(log.tables["ground_truth"])
    out = []
    for time, x, y, yaw, length, width in stream_records(log, stream):
        actor, dist = gt.nearest(time, x, y)
        if actor != target_id:
            continue
        out.append(ScoredRecord(time, OrientedBox((x, y), length, width, yaw), gt.at(time)[actor], dist <= radius))
    return out


def mean_iou_series(records) -> float:
    """Arithmetic mean of per-record BEV IoU; accepts ScoredRecords or (box, truth) pairs."""
    ious = [r.iou if isinstance(r, ScoredRecord) else bev_iou(r[0], r[1]) for r in records]
    if not ious:
        raise UndefinedMetricError("mean IoU of an empty record set")
    return math.fsum(ious) / len(ious)


def rmse_series(records) -> float:
    """Root mean squared BEV center distance."""
    sq = []
    for r in records:
        if isinstance(r, ScoredRecord):
            sq.append(r.sq_error)
        else:
            a, b = r
            sq.append((a.center[0] - b.center[0]) ** 2 + (a.center[1] - b.center[1]) ** 2)
    if not sq:
        raise UndefinedMetricError("RMSE of an empty record set")
    return math.sqrt(math.fsum(sq) / len(sq))


def first_detection_distance(log: SimulationLog, target_id: Optional[str] = None, mode: str = "v2i_fusion",
                             radius: float = MATCH_RADIUS) -> Optional[float]:
    """CAV-to-target distance at the first frame where the target is matched; ``None`` if never."""
    stream = {"vehicle_only": "onboard", "v2i_fusion": "fused"}.get(mode)
    if stream is None:
        raise ValueError(f"unknown mode {mode!r}")
    target_id = target_id or log.target_id
    gt = GroundTruthTable(log.tables["ground_truth"])
    for rec in target_records(log, stream, target_id, gt, radius):
        if rec.matched:
            ego = gt.at(rec.time)[log.ego_id]
            return math.hypot(ego.center[0] - rec.truth.center[0], ego.center[1] - rec.truth.center[1])
    return NO_DETECTION


@dataclass
class MetricsReport:
    seed: int
    mean_iou: dict = field(default_factory=dict)
    rmse: dict = field(default_factory=dict)
    samples: dict = field(default_factory=dict)
    first_detection_distance: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        lines = [f"seed {self.seed}"]
        for s in sorted(self.samples):
            if self.samples[s]:
                lines.append(f"  {s:8s} n={self.samples[s]:4d}  mean IoU {self.mean_iou[s]:.4f}  "
                             f"RMSE {self.rmse[s]:.4f} m")
            else:
                lines.append(f"  {s:8s} n=   0  (no records)")
        for mode, d in sorted(self.first_detection_distance.items()):
            lines.append(f"  first detection ({mode}): " + ("none" if d is None else f"{d:.2f} m"))
        return "\n".join(lines)


def compute_metrics(log: SimulationLog, radius: float = MATCH_RADIUS) -> MetricsReport:
    gt = GroundTruthTable(log.tables["ground_truth"])
    rep = MetricsReport(seed=log.seed, config=dict(log.config))
    for stream in STREAMS:
        recs = target_records(log, stream, log.target_id, gt, radius)
        rep.samples[stream] = len(recs)
        if recs:
            rep.mean_iou[stream] = mean_iou_series(recs)
            rep.rmse[stream] = rmse_series(recs)
    for mode in ("vehicle_only", "v2i_fusion"):
        rep.first_detection_distance[mode] = first_detection_distance(log, log.target_id, mode, radius)
    return rep
