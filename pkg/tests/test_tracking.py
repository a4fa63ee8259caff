import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_cost
from v2icoop.geometry import OrientedBox
from v2icoop.perception import Detection, Source
from v2icoop.tracking import (
    FlowTracker,
    Frame,
    OnlineTracker,
    StaleFrameError,
    TrackerParams,
    build_flow_network,
    decode_paths,
    estimate_velocity,
    path_cost,
    solve_min_cost_flow,
    successive_shortest_paths,
    update_tracks,
)


def det(x, y, conf=0.9, yaw=0.0, t=0):
    return Detection(OrientedBox((x, y), 4.5, 2.0, yaw), "car", conf, Source.RSU, t, 0.0)


# --- network construction -----------------------------------------------


def test_single_detection_network():
    net = build_flow_network([Frame(0, [det(0, 0)])])
    assert net.n_nodes == 4
    assert sorted(e.kind for e in net.edges) == ["entry", "exit", "observation"]


def test_transition_edge_count_and_gate():
    net = build_flow_network([Frame(0, [det(0, 0), det(0, 2)]), Frame(100, [det(0.5, 0), det(0.5, 2)])])
    assert len(net.edges_of_kind("transition")) == 4
    far = build_flow_network([Frame(0, [det(0, 0)]), Frame(100, [det(100, 0)])])
    assert far.edges_of_kind("transition") == []
    assert build_flow_network([]).edges == []


def test_costs_follow_definitions():
    p = TrackerParams()
    net = build_flow_network([Frame(0, [det(0, 0, conf=0.99)]), Frame(100, [det(0, 0, conf=0.01)])], p)
    obs = [e.cost for e in net.edges_of_kind("observation")]
    assert obs == [pytest.approx(math.log(0.05 / 0.95)), pytest.approx(math.log(0.95 / 0.05))]
    assert net.transition_cost(0, 1) == pytest.approx(0.0, abs=1e-12)  # identical boxes
    assert all(e.cost == 4.0 for e in net.edges_of_kind("entry") + net.edges_of_kind("exit"))


def test_no_backward_edges():
    net = build_flow_network([Frame(t, [det(0, 0), det(1, 0)]) for t in (0, 100, 200, 300)])
    for e in net.edges_of_kind("transition"):
        i, j = (e.tail - 3) // 2, (e.head - 2) // 2
        assert 1 <= net.detections[j][0] - net.detections[i][0] <= 2


# --- solver -------------------------------------------------------------


def test_single_chain():
    frames = [Frame(t, [det(0.1 * k, 0, conf=0.95)]) for k, t in enumerate((0, 100, 200))]
    tracks = solve_min_cost_flow(build_flow_network(frames))
    assert len(tracks) == 1 and len(tracks[0].observations) == 3


def test_two_parallel_lanes_no_swap():
    p = TrackerParams(entry_cost=1.0, exit_cost=1.0)
    frames = [Frame(t, [det(0.3 * k, 0), det(0.3 * k, 6.0)]) for k, t in enumerate((0, 100, 200))]
    net = build_flow_network(frames, p)
    total = successive_shortest_paths(net)
    chains = decode_paths(net)
    assert len(chains) == 2
    for c in chains:
        ys = {net.detections[k][2].box.center[1] for k in c}
        assert len(ys) == 1
    assert total == pytest.approx(brute_force_cost(net, p), abs=1e-9)


def test_low_confidence_yields_no_tracks():
    p = TrackerParams(entry_cost=20.0, exit_cost=20.0)
    frames = [Frame(t, [det(0, 0, conf=0.05)]) for t in (0, 100, 200)]
    assert solve_min_cost_flow(build_flow_network(frames, p), p) == []


@st.composite
def small_instances(draw):
    n_frames = draw(st.integers(1, 4))
    sizes = [draw(st.integers(0, 3)) for _ in range(n_frames)]
    while sum(sizes) > 8:
        sizes[sizes.index(max(sizes))] -= 1
    frames = []
    for fi, n in enumerate(sizes):
        ds = []
        for _ in range(n):
            x = draw(st.floats(-3, 3))
            y = draw(st.floats(-3, 3))
            c = draw(st.floats(0.02, 0.99))
            ds.append(det(x, y, conf=c))
        frames.append(Frame(100 * fi, ds))
    theta = draw(st.floats(0.0, 6.0))
    return frames, TrackerParams(entry_cost=theta, exit_cost=theta, epsilon=draw(st.sampled_from([1e-6, 0.05])))


@settings(max_examples=300, deadline=None)
@given(small_instances())
def test_solver_matches_brute_force(instance):
    frames, p = instance
    net = build_flow_network(frames, p)
    total = successive_shortest_paths(net, check_invariants=True)
    assert total == pytest.approx(brute_force_cost(net, p), abs=1e-9)
    chains = decode_paths(net)
    used = [k for c in chains for k in c]
    assert len(used) == len(set(used))
    for c in chains:
        times = [net.detections[k][1] for k in c]
        assert all(b > a for a, b in zip(times, times[1:]))
    assert total == pytest.approx(sum(path_cost(net, c, p) for c in chains), abs=1e-9)


def test_flow_tracker_estimator():
    frames = [(t, [det(0.5 * k, 0), det(0.5 * k, 8.0)]) for k, t in enumerate((0, 100, 200, 300))]
    est = FlowTracker(entry_cost=2.0, exit_cost=2.0).fit(frames)
    assert est.labels_ == [[1, 2]] * 4
    assert len(est.tracks_) == 2
    assert est.get_params()["max_gap"] == 2
    assert FlowTracker().fit_predict(frames[:1]) == [[-1, -1]]  # single frame: cost 8 - 4.4 > 0


# --- online wrapper -----------------------------------------------------


def test_velocity_least_squares():
    obs = [(100 * k, det(1.0 * k, -0.5 * k)) for k in range(8)]
    assert np.allclose(estimate_velocity(obs), (10.0, -5.0))
    assert np.allclose(estimate_velocity(obs[:1]), 0.0)


def test_online_constant_velocity_single_id():
    tracker = OnlineTracker(TrackerParams(epsilon=0.05))
    rng = np.random.default_rng(0)
    ids = set()
    for k in range(40):
        x, y = 0.8 * k + rng.normal(0, 0.1), 2.0 + rng.normal(0, 0.1)
        tracks = update_tracks(tracker, 100 * k, [det(x, y)])
        ids |= {t.id for t in tracks}
    assert ids == {1}
    assert np.allclose(tracks[0].velocity, (8.0, 0.0), atol=1.0)


def test_online_bridges_one_missing_frame():
    tracker = OnlineTracker()
    for k in range(12):
        dets = [] if k == 6 else [det(0.5 * k, 0.0)]
        tracks = tracker.update(100 * k, dets)
    assert [t.id for t in tracks] == [1]
    assert len(tracks[0].observations) == 11


def test_online_first_frame_ids_and_stale_frame():
    tracker = OnlineTracker()
    tracks = tracker.update(0, [det(0, 0), det(20, 0), det(40, 0)])
    assert [t.id for t in tracks] == [1, 2, 3]
    assert [t.latest.box.center[0] for t in tracks] == [0, 20, 40]
    with pytest.raises(StaleFrameError):
        tracker.update(0, [])


def test_online_retires_after_max_gap():
    tracker = OnlineTracker()
    tracker.update(0, [det(0, 0)])
    tracker.update(100, [det(0.5, 0)])
    assert tracker.update(200, []) != []
    assert tracker.update(300, []) != []
    assert tracker.update(400, []) == []


def test_online_two_crossing_free_tracks_keep_ids():
    tracker = OnlineTracker()
    for k in range(20):
        tracks = tracker.update(100 * k, [det(1.0 * k, 0.0), det(30 - 1.0 * k, 10.0)])
    by_id = {t.id: t.latest.box.center for t in tracks}
    assert set(by_id) == {1, 2}
    assert by_id[1][1] == 0.0 and by_id[2][1] == 10.0
