import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from v2icoop.delaycomp import CompensatedPublish
from v2icoop.fusion import (
    DUPLICATE_RESOLVED,
    ONBOARD_ONLY,
    RSU_ONLY,
    FusedFrame,
    fuse,
    select_publishes,
)
from v2icoop.geometry import OrientedBox, bev_iou
from v2icoop.perception import Detection, Source


def onboard(x, y, yaw=0.0, t=1000):
    return Detection(OrientedBox((x, y), 4.5, 2.0, yaw), "car", 0.95, Source.ONBOARD, t, 0.0)


def publish(x, y, t, track_id=1, yaw=0.0, frame=None):
    frame = t - 120 if frame is None else frame
    return CompensatedPublish(t, 12, (x, y, yaw), OrientedBox((x, y), 4.5, 2.0, yaw), frame, track_id)


def test_empty_buffer_returns_onboard_verbatim():
    dets = [onboard(0, 0), onboard(20, 5)]
    frame = fuse(dets, 1000, [])
    assert frame.detections == dets
    assert [o.provenance for o in frame.objects] == [ONBOARD_ONLY] * 2


def test_duplicate_keeps_onboard():
    a = onboard(0.0, 0.0)
    p = publish(1.125, 0.0, 1000)  # (4.5 - s) / (4.5 + s) = 0.6
    assert bev_iou(a.box, p.box) == pytest.approx(0.6, abs=1e-12)
    frame = fuse([a], 1000, [p])
    assert len(frame.objects) == 1
    assert frame.objects[0].detection.source is Source.ONBOARD
    assert frame.objects[0].provenance == DUPLICATE_RESOLVED


def test_disjoint_objects_concatenated():
    frame = fuse([onboard(0, 0)], 1000, [publish(-40.0, 0.0, 990, track_id=4)])
    assert [o.provenance for o in frame.objects] == [ONBOARD_ONLY, RSU_ONLY]
    assert frame.objects[1].track_id == 4 and frame.objects[1].detection.source is Source.RSU


def test_window_and_newest_per_track():
    pubs = [publish(0, 0, 900, 1), publish(1, 0, 960, 1), publish(2, 0, 1020, 1), publish(9, 9, 1060, 2),
            publish(5, 5, 1040, 3)]
    sel = select_publishes(pubs, 1000, 50)
    assert [(p.track_id, p.publish_time) for p in sel] == [(1, 1020), (3, 1040)]


def test_raw_publishes_keep_newest_frame():
    raw = [CompensatedPublish(990, None, (0, 0, 0), OrientedBox((0, 0), 4.5, 2.0), 880, None),
           CompensatedPublish(1010, None, (1, 0, 0), OrientedBox((1, 0), 4.5, 2.0), 900, None),
           CompensatedPublish(1010, None, (30, 0, 0), OrientedBox((30, 0), 4.5, 2.0), 900, None)]
    assert [p.pose[0] for p in select_publishes(raw, 1000, 50)] == [1, 30]


def test_greedy_prefers_highest_iou():
    dets = [onboard(0.0, 0.0)]
    pubs = [publish(1.5, 0.0, 1000, 1), publish(0.2, 0.0, 1000, 2)]
    frame = fuse(dets, 1000, pubs)
    assert [(o.provenance, o.track_id) for o in frame.objects] == [(DUPLICATE_RESOLVED, None), (RSU_ONLY, 1)]


@st.composite
def scenes(draw):
    """Well-separated objects, each seen by either source or both with small offsets."""
    n = draw(st.integers(0, 6))
    dets, pubs = [], []
    for k in range(n):
        cx, cy = 15.0 * k, draw(st.floats(-3, 3))
        seen = draw(st.sampled_from(["onboard", "rsu", "both"]))
        if seen in ("onboard", "both"):
            dets.append(onboard(cx + draw(st.floats(-0.5, 0.5)), cy, draw(st.floats(-0.2, 0.2))))
        if seen in ("rsu", "both"):
            pubs.append(publish(cx + draw(st.floats(-0.5, 0.5)), cy, 1000 + draw(st.integers(-50, 50)), k + 1,
                                draw(st.floats(-0.2, 0.2))))
    return dets, pubs


@settings(max_examples=300, deadline=None)
@given(scenes())
def test_fusion_invariants(scene):
    dets, pubs = scene
    frame = fuse(dets, 1000, pubs)
    n_matched = sum(o.provenance == DUPLICATE_RESOLVED for o in frame.objects)
    assert len(frame.objects) == len(dets) + len(select_publishes(pubs, 1000, 50)) - n_matched
    assert all(o.detection.source is Source.ONBOARD for o in frame.objects if o.provenance == DUPLICATE_RESOLVED)
    boxes = [o.detection.box for o in frame.objects]
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            assert bev_iou(boxes[i], boxes[j]) < 0.1
    again = fuse(frame.detections, 1000, [])
    assert again.detections == frame.detections


@settings(max_examples=200, deadline=None)
@given(st.integers(-50, 50))
def test_matches_stable_under_time_shift(delta):
    # noiseless compensated publishes carry the pose valid at their publish time
    speed = 10.0

    def pub_at(t, track_id, x0):
        return publish(x0 + speed * t / 1000.0, 0.0, t, track_id, frame=t - 120)

    t = 1000
    dets = [onboard(speed * t / 1000.0, 0.0), onboard(60.0, 0.0)]
    pubs = [pub_at(t + delta, 1, 0.0), pub_at(t + delta, 2, 90.0)]
    frame = fuse(dets, t, pubs)
    assert [o.provenance for o in frame.objects] == [DUPLICATE_RESOLVED, ONBOARD_ONLY, RSU_ONLY]


def test_fused_frame_type():
    frame = fuse([], 500, [publish(0, 0, 500)])
    assert isinstance(frame, FusedFrame) and frame.time == 500
    assert np.allclose(frame.detections[0].box.center, (0, 0))
