"""Asynchronous late fusion of onboard detections with roadside publishes.

Roadside publishes are paired with an onboard frame by timestamp proximity
rather than strict synchronization. Duplicates (cross-source pairs whose
BEV IoU reaches the threshold) keep the onboard instance; everything else is
concatenated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .delaycomp import CompensatedPublish
from .geometry import bev_iou
from .perception import Detection, Source

ONBOARD_ONLY = "onboard-only"
RSU_ONLY = "rsu-only"
DUPLICATE_RESOLVED = "duplicate-resolved"


@dataclass(frozen=True)
class FusedObject:
    detection: Detection
    provenance: str
    track_id: object = None


@dataclass(frozen=True)
class FusedFrame:
    time: int
    objects: tuple

    @property
    def detections(self) -> list[Detection]:
        return [o.detection for o in self.objects]


def publish_to_detection(p: CompensatedPublish) -> Detection:
    return Detection(p.box, p.object_class, p.confidence, Source.RSU, p.frame_time, p.processing_time)


def select_publishes(publishes: Sequence[CompensatedPublish], t: int, window: int) -> list[CompensatedPublish]:
    """Publishes within ``window`` ms of ``t``, newest per track id.

    Untracked (raw) publishes are grouped by frame and only the newest
    frame is kept.
    """
    inside = [p for p in publishes if abs(p.publish_time - t) <= window]
    newest: dict = {}
    raw_frame = None
    for p in inside:
        if p.track_id is None:
            if raw_frame is None or p.frame_time > raw_frame:
                raw_frame = p.frame_time
            continue
        cur = newest.get(p.track_id)
        if cur is None or p.publish_time > cur.publish_time:
            newest[p.track_id] = p
    raw = [p for p in inside if p.track_id is None and p.frame_time == raw_frame]
    return [newest[k] for k in sorted(newest)] + raw


def fuse(onboard: Sequence[Detection], t: int, rsu_publishes: Sequence[CompensatedPublish],
         window: int = 50, iou_threshold: float = 0.1) -> FusedFrame:
    selected = select_publishes(rsu_publishes, t, window)
    pairs = []
    for i, det in enumerate(onboard):
        for j, pub in enumerate(selected):
            iou = bev_iou(det.box, pub.box)
            if iou >= iou_threshold:
                tid = pub.track_id if pub.track_id is not None else -1
                pairs.append((-iou, i, tid, j))
    pairs.sort()
    matched_onboard, matched_rsu = set(), set()
    for _, i, _, j in pairs:
        if i in matched_onboard or j in matched_rsu:
            continue
        matched_onboard.add(i)
        matched_rsu.add(j)
    objects = [
        FusedObject(det, DUPLICATE_RESOLVED if i in matched_onboard else ONBOARD_ONLY)
        for i, det in enumerate(onboard)
    ]
    objects += [
        FusedObject(publish_to_detection(p), RSU_ONLY, p.track_id)
        for j, p in enumerate(selected) if j not in matched_rsu
    ]
    return FusedFrame(int(t), tuple(objects))
