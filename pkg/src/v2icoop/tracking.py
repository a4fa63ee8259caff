"""Min-cost-flow multi-object tracking.

Each detection ``i`` becomes a pre-node ``u_i`` and post-node ``v_i`` joined
by an observation edge; source/sink edges model track birth and death, and
``v_i -> u_j`` edges link detections in later frames. Every unit of flow is
one trajectory. The optimum is found by successive shortest paths with node
potentials, augmenting while the cheapest source-sink path has negative cost.
"""

from __future__ import annotations

import heapq
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .geometry import bev_iou
from .perception import Detection

log = logging.getLogger(__name__)

SOURCE, SINK = 0, 1


class StaleFrameError(ValueError):
    pass


@dataclass
class TrackerParams:
    entry_cost: float = 4.0
    exit_cost: float = 4.0
    epsilon: float = 1e-6
    min_confidence: float = 0.05
    max_confidence: float = 0.95
    gate_base: float = 5.0
    v_max: float = 20.0
    max_gap: int = 2
    window: int = 10
    velocity_history: int = 5


@dataclass(frozen=True)
class Frame:
    time: int
    detections: tuple

    def __init__(self, time, detections):
        object.__setattr__(self, "time", int(time))
        object.__setattr__(self, "detections", tuple(detections))


@dataclass
class Edge:
    tail: int
    head: int
    cost: float
    kind: str
    cap: int = 1
    flow: int = 0


@dataclass
class FlowNetwork:
    """Unit-capacity DAG; detection ``k`` owns nodes ``2 + 2k`` (pre) and ``3 + 2k`` (post)."""

    detections: list  # (frame_index, frame_time, Detection)
    edges: list[Edge] = field(default_factory=list)

    @property
    def n_nodes(self) -> int:
        return 2 + 2 * len(self.detections) if self.detections else 0

    def pre(self, k: int) -> int:
        return 2 + 2 * k

    def post(self, k: int) -> int:
        return 3 + 2 * k

    def edges_of_kind(self, kind: str) -> list[Edge]:
        return [e for e in self.edges if e.kind == kind]

    def transition_cost(self, i: int, j: int) -> Optional[float]:
        for e in self.edges:
            if e.kind == "transition" and e.tail == self.post(i) and e.head == self.pre(j):
                return e.cost
        return None


@dataclass
class Track:
    id: int
    observations: list  # (frame_time, Detection), strictly increasing times
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    last_update: int = 0

    @property
    def latest(self) -> Detection:
        return self.observations[-1][1]

    @property
    def latest_time(self) -> int:
        return self.observations[-1][0]


def observation_cost(confidence: float, params: TrackerParams) -> float:
    p = min(max(confidence, params.min_confidence), params.max_confidence)
    return math.log((1.0 - p) / p)


def transition_cost(det_i: Detection, t_i: int, det_j: Detection, t_j: int, velocity_i, params: TrackerParams) -> Optional[float]:
    """Cost of linking i -> j, or None when the pair is outside the gate."""
    dt = (t_j - t_i) / 1000.0
    ci, cj = det_i.box.center, det_j.box.center
    if math.hypot(cj[0] - ci[0], cj[1] - ci[1]) > params.gate_base + params.v_max * dt:
        return None
    vx, vy = (0.0, 0.0) if velocity_i is None else (float(velocity_i[0]), float(velocity_i[1]))
    affinity = bev_iou(det_j.box, det_i.box.translated(vx * dt, vy * dt))
    return -math.log(max(affinity, params.epsilon))


def build_flow_network(frames: Sequence[Frame], params: Optional[TrackerParams] = None,
                       velocities: Optional[dict] = None, entry_costs: Optional[dict] = None,
                       exit_costs: Optional[dict] = None) -> FlowNetwork:
    """Build the tracking graph over time-ordered ``frames``.

    ``velocities`` optionally maps ``(frame_index, detection_index)`` to a
    velocity hint used for constant-velocity extrapolation; missing entries
    extrapolate with zero velocity. ``entry_costs`` / ``exit_costs`` override
    the uniform birth and death costs per detection, keyed the same way.
    """
    params = params or TrackerParams()
    velocities = velocities or {}
    entry_costs = entry_costs or {}
    exit_costs = exit_costs or {}
    times = [f.time for f in frames]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("frames must be strictly time-ordered")
    dets = []
    keys = []
    for fi, f in enumerate(frames):
        for di, d in enumerate(f.detections):
            dets.append((fi, f.time, d))
            keys.append((fi, di))
    net = FlowNetwork(dets)
    if not dets:
        return net
    for k, (_, _, d) in enumerate(dets):
        key = keys[k]
        net.edges.append(Edge(SOURCE, net.pre(k), entry_costs.get(key, params.entry_cost), "entry"))
        net.edges.append(Edge(net.pre(k), net.post(k), observation_cost(d.confidence, params), "observation"))
        net.edges.append(Edge(net.post(k), SINK, exit_costs.get(key, params.exit_cost), "exit"))
    for i, (fi, ti, di) in enumerate(dets):
        for j, (fj, tj, dj) in enumerate(dets):
            if not 1 <= fj - fi <= params.max_gap:
                continue
            c = transition_cost(di, ti, dj, tj, velocities.get(keys[i]), params)
            if c is not None:
                net.edges.append(Edge(net.post(i), net.pre(j), c, "transition"))
    return net


def _dag_potentials(net: FlowNetwork, adj) -> list[float]:
    """Shortest distances from the source on the initial DAG (costs may be negative)."""
    n = net.n_nodes
    # topological order: source, then detections by frame (pre before post), sink last
    order = [SOURCE]
    for k in sorted(range(len(net.detections)), key=lambda k: (net.detections[k][0], k)):
        order += [net.pre(k), net.post(k)]
    order.append(SINK)
    dist = [math.inf] * n
    dist[SOURCE] = 0.0
    for u in order:
        if dist[u] == math.inf:
            continue
        for ei in adj[u]:
            e = net.edges[ei]
            if e.tail == u and dist[u] + e.cost < dist[e.head]:
                dist[e.head] = dist[u] + e.cost
    return dist


def successive_shortest_paths(net: FlowNetwork, check_invariants: bool = False) -> float:
    """Push unit flows along negative-cost shortest paths; returns the total cost.

    Flow values are written onto ``net.edges``.
    """
    n = net.n_nodes
    if n == 0:
        return 0.0
    for e in net.edges:
        e.flow = 0
    adj = [[] for _ in range(n)]
    for idx, e in enumerate(net.edges):
        adj[e.tail].append(idx)
        adj[e.head].append(idx)
    pot = _dag_potentials(net, adj)
    finite = [p for p in pot if p < math.inf]
    big = max(finite) if finite else 0.0
    pot = [p if p < math.inf else big for p in pot]
    total = 0.0

    while True:
        # Dijkstra over the residual graph with reduced costs
        dist = [math.inf] * n
        prev_edge = [-1] * n
        dist[SOURCE] = 0.0
        heap = [(0.0, SOURCE)]
        while heap:
            du, u = heapq.heappop(heap)
            if du > dist[u]:
                continue
            for ei in adj[u]:
                e = net.edges[ei]
                if e.tail == u and e.flow < e.cap:
                    v, c = e.head, e.cost
                elif e.head == u and e.flow > 0:
                    v, c = e.tail, -e.cost
                else:
                    continue
                rc = c + pot[u] - pot[v]
                if rc < 0.0:
                    rc = 0.0  # round-off only; potentials keep reduced costs non-negative
                nd = du + rc
                if nd < dist[v] - 1e-15:
                    dist[v] = nd
                    prev_edge[v] = ei
                    heapq.heappush(heap, (nd, v))
        if dist[SINK] == math.inf:
            break
        true_cost = dist[SINK] - pot[SOURCE] + pot[SINK]
        if true_cost >= -1e-12:
            break
        # augment one unit
        v = SINK
        while v != SOURCE:
            e = net.edges[prev_edge[v]]
            if e.head == v and e.flow < e.cap:
                e.flow += 1
                v = e.tail
            else:
                e.flow -= 1
                v = e.head
        total += true_cost
        dmax = max(d for d in dist if d < math.inf)
        pot = [p + (d if d < math.inf else dmax) for p, d in zip(pot, dist)]
        if check_invariants:
            worst = min_reduced_cost(net, pot)
            if worst < -1e-9:
                raise AssertionError(f"reduced-cost invariant violated: {worst}")
    return total


def min_reduced_cost(net: FlowNetwork, pot) -> float:
    worst = math.inf
    for e in net.edges:
        if e.flow < e.cap:
            worst = min(worst, e.cost + pot[e.tail] - pot[e.head])
        if e.flow > 0:
            worst = min(worst, -e.cost + pot[e.head] - pot[e.tail])
    return worst


def decode_paths(net: FlowNetwork) -> list[list[int]]:
    """Detection index chains carried by unit flows, ordered by first detection."""
    out_flow = {}
    for e in net.edges:
        if e.flow > 0:
            out_flow[e.tail] = out_flow.get(e.tail, []) + [e.head]
    paths = []
    for head in sorted(out_flow.get(SOURCE, [])):
        chain = []
        node = head
        while node != SINK:
            k = (node - 2) // 2
            if node == net.pre(k):
                chain.append(k)
            node = out_flow[node][0]
        paths.append(chain)
    return sorted(paths, key=lambda c: c[0])


def path_cost(net: FlowNetwork, chain: Sequence[int], params: TrackerParams) -> float:
    """Cost of one trajectory, read off the network's edges."""
    entry = {e.head: e.cost for e in net.edges_of_kind("entry")}
    exit_ = {e.tail: e.cost for e in net.edges_of_kind("exit")}
    cost = entry[net.pre(chain[0])] + exit_[net.post(chain[-1])]
    for k in chain:
        cost += observation_cost(net.detections[k][2].confidence, params)
    for a, b in zip(chain, chain[1:]):
        c = net.transition_cost(a, b)
        if c is None:
            return math.inf
        cost += c
    return cost


def estimate_velocity(observations, history: int = 5) -> np.ndarray:
    """Least-squares slope of the last ``history`` centers over time (m/s)."""
    obs = observations[-history:]
    if len(obs) < 2:
        return np.zeros(2)
    t = np.array([o[0] for o in obs], dtype=float) / 1000.0
    xy = np.array([o[1].box.center for o in obs])
    tc = t - t.mean()
    denom = float(np.dot(tc, tc))
    if denom <= 0.0:
        return np.zeros(2)
    return (tc @ (xy - xy.mean(axis=0))) / denom


def solve_min_cost_flow(net: FlowNetwork, params: Optional[TrackerParams] = None) -> list[Track]:
    """Optimal trajectory set as tracks with ids 1..k in order of first detection."""
    params = params or TrackerParams()
    successive_shortest_paths(net)
    tracks = []
    for tid, chain in enumerate(decode_paths(net), start=1):
        obs = [(net.detections[k][1], net.detections[k][2]) for k in chain]
        tracks.append(Track(tid, obs, estimate_velocity(obs, params.velocity_history), obs[-1][0]))
    return tracks


class FlowTracker(BaseEstimator):
    """Batch tracker with a clustering-style interface.

    ``fit(frames)`` solves the flow problem over all frames and stores
    ``tracks_``; ``labels_`` holds one list per frame with the track id of
    every detection (-1 when no trajectory uses it).
    """

    def __init__(self, entry_cost=4.0, exit_cost=4.0, epsilon=1e-6, gate_base=5.0, v_max=20.0, max_gap=2):
        self.entry_cost = entry_cost
        self.exit_cost = exit_cost
        self.epsilon = epsilon
        self.gate_base = gate_base
        self.v_max = v_max
        self.max_gap = max_gap

    def _params(self) -> TrackerParams:
        return TrackerParams(
            entry_cost=self.entry_cost, exit_cost=self.exit_cost, epsilon=self.epsilon,
            gate_base=self.gate_base, v_max=self.v_max, max_gap=self.max_gap,
        )

    def fit(self, frames, y=None):
        frames = [f if isinstance(f, Frame) else Frame(*f) for f in frames]
        params = self._params()
        net = build_flow_network(frames, params)
        self.cost_ = successive_shortest_paths(net)
        chains = decode_paths(net)
        self.labels_ = [[-1] * len(f.detections) for f in frames]
        offsets = np.cumsum([0] + [len(f.detections) for f in frames])
        self.tracks_ = []
        for tid, chain in enumerate(chains, start=1):
            for k in chain:
                fi = net.detections[k][0]
                self.labels_[fi][k - offsets[fi]] = tid
            obs = [(net.detections[k][1], net.detections[k][2]) for k in chain]
            self.tracks_.append(Track(tid, obs, estimate_velocity(obs, 5), obs[-1][0]))
        return self

    def fit_predict(self, frames, y=None):
        return self.fit(frames).labels_


class OnlineTracker:
    """Sliding-window re-solve with identities carried across solves."""

    def __init__(self, params: Optional[TrackerParams] = None):
        self.params = params or TrackerParams()
        self.frames: deque = deque(maxlen=self.params.window)
        self.tracks: dict[int, Track] = {}
        self._owner: dict = {}  # (frame_time, det_index) -> track id
        self._next_id = 1
        self._frame_count = 0
        self._last_seen_frame: dict[int, int] = {}
        self.last_time: Optional[int] = None

    def update(self, frame_time: int, detections: Sequence[Detection]) -> list[Track]:
        if self.last_time is not None and frame_time <= self.last_time:
            raise StaleFrameError(f"frame {frame_time} is not newer than {self.last_time}")
        self.last_time = int(frame_time)
        self._frame_count += 1
        self.frames.append(Frame(frame_time, detections))
        frames = list(self.frames)
        p = self.params

        # the window truncates trajectories: tracks may leave through the newest
        # frame for free, and known tracks re-enter free at their earliest
        # in-window observation
        velocities, entry, exit_ = {}, {}, {}
        seen = set()
        newest = len(frames) - 1
        for fi, f in enumerate(frames):
            for di in range(len(f.detections)):
                tid = self._owner.get((f.time, di))
                if tid in self.tracks:
                    velocities[(fi, di)] = self.tracks[tid].velocity
                    if tid not in seen:
                        entry[(fi, di)] = 0.0
                        seen.add(tid)
                if fi == newest:
                    exit_[(fi, di)] = 0.0
        net = build_flow_network(frames, p, velocities, entry, exit_)
        successive_shortest_paths(net)
        chains = decode_paths(net)

        keys = []
        for f in frames:
            keys += [(f.time, di) for di in range(len(f.detections))]
        covered = {k for c in chains for k in c}
        for k, (fi, _, _) in enumerate(net.detections):
            if fi == newest and k not in covered:
                chains.append([k])  # births are always kept for the newest frame
        chains.sort(key=lambda c: (net.detections[c[0]][1], c[0]))

        # identity persistence: largest overlap with previous owners, ties to the older id
        candidates = []
        for ci, chain in enumerate(chains):
            counts = {}
            for k in chain:
                tid = self._owner.get(keys[k])
                if tid is not None:
                    counts[tid] = counts.get(tid, 0) + 1
            for tid, n in counts.items():
                candidates.append((-n, tid, ci))
        candidates.sort()
        chain_id: dict[int, int] = {}
        used = set()
        for _, tid, ci in candidates:
            if ci in chain_id or tid in used:
                continue
            chain_id[ci] = tid
            used.add(tid)
        for ci in range(len(chains)):
            if ci not in chain_id:
                chain_id[ci] = self._next_id
                self._next_id += 1

        window_start = frames[0].time
        new_tracks: dict[int, Track] = {}
        new_owner = {}
        for ci, chain in enumerate(chains):
            tid = chain_id[ci]
            old = self.tracks.get(tid)
            prefix = [o for o in old.observations if o[0] < window_start] if old else []
            obs = prefix + [(net.detections[k][1], net.detections[k][2]) for k in chain]
            track = Track(tid, obs, estimate_velocity(obs, p.velocity_history), obs[-1][0])
            new_tracks[tid] = track
            for k in chain:
                new_owner[keys[k]] = tid
            last_fi = net.detections[chain[-1]][0]
            self._last_seen_frame[tid] = self._frame_count - (newest - last_fi)

        # tracks the re-solve left without a chain keep their unclaimed history
        for tid, old in self.tracks.items():
            if tid in new_tracks:
                continue
            obs = [o for o in old.observations
                   if o[0] < window_start or self._owner_key(o) not in new_owner]
            if obs:
                new_tracks[tid] = Track(tid, obs, old.velocity, old.last_update)
                for o in obs:
                    key = self._owner_key(o)
                    if key is not None:
                        new_owner[key] = tid

        # retire tracks unobserved for more than max_gap frames
        self.tracks = {
            tid: t for tid, t in new_tracks.items()
            if self._frame_count - self._last_seen_frame[tid] <= p.max_gap
        }
        self._owner = {k: v for k, v in new_owner.items() if v in self.tracks}
        return sorted(self.tracks.values(), key=lambda t: t.id)

    def _owner_key(self, observation):
        """``(frame_time, detection_index)`` of an in-window observation, else None."""
        time, det = observation
        for f in self.frames:
            if f.time == time:
                for di, d in enumerate(f.detections):
                    if d is det:
                        return (time, di)
        return None


def update_tracks(tracker: OnlineTracker, frame_time: int, detections: Sequence[Detection]) -> list[Track]:
    return tracker.update(frame_time, detections)
