"""Lane map, scripted actors and ground-truth kinematics.

Actors follow ordered behavior scripts built from three atomic behaviors:
``WaypointFollow``, ``StopVehicle`` and ``Wait``. Kinematics are exact
(no tire or inertia model) so ground truth can be reproduced bit-for-bit.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import yaml

from .geometry import (
    OrientedBox,
    PinholeCamera,
    PointCorrespondence,
    estimate_homography,
    wrap_angle,
)

WAYPOINT_REACHED_RADIUS = 0.5
LANE_GATE = 3.0
HEADING_GATE = math.pi / 2
MIN_VERTEX_SPACING = 0.01


class ScenarioError(ValueError):
    pass


class InvalidScenarioError(ScenarioError):
    pass


class UnknownLaneError(ScenarioError, KeyError):
    pass


# ---------------------------------------------------------------------------
# Lanelet map
# ---------------------------------------------------------------------------


@dataclass
class LaneCenterline:
    id: str
    points: np.ndarray
    successors: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if len(self.points) < 2:
            raise InvalidScenarioError(f"lane {self.id}: need at least 2 points")
        seg = np.diff(self.points, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len < MIN_VERTEX_SPACING):
            raise InvalidScenarioError(f"lane {self.id}: consecutive points closer than {MIN_VERTEX_SPACING} m")
        self.successors = list(self.successors)
        self._seg = seg
        self._seg_len = seg_len
        self._headings = np.arctan2(seg[:, 1], seg[:, 0])
        self.arc_length = np.concatenate([[0.0], np.cumsum(seg_len)])

    @property
    def length(self) -> float:
        return float(self.arc_length[-1])

    def foot_point(self, point) -> tuple[float, float, int, float]:
        """Closest point on the polyline: (s, signed d, segment index, along-track overshoot).

        The overshoot is the distance past either end of the lane measured
        along the end segment; it is 0 when the foot point is interior.
        """
        p = np.asarray(point, dtype=float)
        rel = p - self.points[:-1]
        t = np.einsum("ij,ij->i", rel, self._seg) / self._seg_len ** 2
        tc = np.clip(t, 0.0, 1.0)
        foot = self.points[:-1] + tc[:, None] * self._seg
        dist = np.hypot(p[0] - foot[:, 0], p[1] - foot[:, 1])
        k = int(np.argmin(dist))
        s = float(self.arc_length[k] + tc[k] * self._seg_len[k])
        cross = self._seg[k, 0] * rel[k, 1] - self._seg[k, 1] * rel[k, 0]
        d = math.copysign(float(dist[k]), cross) if dist[k] > 0 else 0.0
        overshoot = 0.0
        if k == 0 and t[0] < 0.0:
            overshoot = -t[0] * self._seg_len[0]
        if k == len(self._seg) - 1 and t[k] > 1.0:
            overshoot = (t[k] - 1.0) * self._seg_len[k]
        return s, d, k, float(overshoot)

    def heading_at_segment(self, k: int) -> float:
        return float(self._headings[k])

    def locate(self, s: float) -> tuple[np.ndarray, float]:
        """Point and tangent heading at arc length ``s`` (clamped to the lane)."""
        s = min(max(s, 0.0), self.length)
        k = int(np.searchsorted(self.arc_length, s, side="right") - 1)
        k = min(max(k, 0), len(self._seg) - 1)
        frac = (s - self.arc_length[k]) / self._seg_len[k]
        return self.points[k] + frac * self._seg[k], float(self._headings[k])


class LaneletMap:
    def __init__(self, lanes: Sequence[LaneCenterline]):
        self.lanes: dict[str, LaneCenterline] = {}
        for lane in lanes:
            if lane.id in self.lanes:
                raise InvalidScenarioError(f"duplicate lane id {lane.id}")
            self.lanes[lane.id] = lane
        for lane in self.lanes.values():
            for succ in lane.successors:
                if succ not in self.lanes:
                    raise InvalidScenarioError(f"lane {lane.id}: unknown successor {succ}")

    def __getitem__(self, lane_id: str) -> LaneCenterline:
        try:
            return self.lanes[lane_id]
        except KeyError:
            raise UnknownLaneError(lane_id) from None

    def __iter__(self):
        return iter(self.lanes.values())

    def __len__(self):
        return len(self.lanes)


@dataclass(frozen=True)
class FrenetPoint:
    lane_id: str
    s: float
    d: float


def frenet_project(
    lanelet_map: LaneletMap,
    point,
    yaw: float,
    gate: float = LANE_GATE,
    heading_gate: float = HEADING_GATE,
) -> Optional[FrenetPoint]:
    """Project onto the nearest heading-compatible lane, or ``None``.

    Points lying beyond the end of a lane have no perpendicular foot on it
    and do not match that lane.
    """
    best = None
    for lane_id in sorted(lanelet_map.lanes):
        lane = lanelet_map.lanes[lane_id]
        s, d, k, overshoot = lane.foot_point(point)
        if overshoot > 1e-9 or abs(d) > gate:
            continue
        if abs(wrap_angle(yaw - lane.heading_at_segment(k))) >= heading_gate:
            continue
        if best is None or abs(d) < abs(best.d):
            best = FrenetPoint(lane_id, s, d)
    return best


def frenet_to_cartesian(lanelet_map: LaneletMap, lane_id: str, s: float, d: float) -> tuple[np.ndarray, float]:
    """Cartesian point and tangent yaw at (s, d), chaining into first successors."""
    lane = lanelet_map[lane_id]
    s = max(s, 0.0)
    visited = {lane.id}
    while s > lane.length and lane.successors:
        nxt = lanelet_map[lane.successors[0]]
        if nxt.id in visited:
            break
        s -= lane.length
        lane = nxt
        visited.add(lane.id)
    base, heading = lane.locate(s)
    normal = np.array([-math.sin(heading), math.cos(heading)])
    return base + d * normal, heading


# ---------------------------------------------------------------------------
# Behaviors and actors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WaypointFollow:
    waypoints: tuple[tuple[float, float], ...]
    speed: float

    def __post_init__(self):
        object.__setattr__(self, "waypoints", tuple((float(x), float(y)) for x, y in self.waypoints))
        if not self.waypoints:
            raise InvalidScenarioError("WaypointFollow needs at least one waypoint")
        if not self.speed > 0.0:
            raise InvalidScenarioError("WaypointFollow speed must be positive")


@dataclass(frozen=True)
class StopVehicle:
    deceleration: float

    def __post_init__(self):
        if not self.deceleration > 0.0:
            raise InvalidScenarioError("StopVehicle deceleration must be positive")


@dataclass(frozen=True)
class Wait:
    duration_ms: int

    def __post_init__(self):
        if self.duration_ms < 0:
            raise InvalidScenarioError("Wait duration must be >= 0")


Behavior = Union[WaypointFollow, StopVehicle, Wait]


@dataclass(frozen=True)
class ActorSpec:
    id: str
    length: float
    width: float
    x: float
    y: float
    yaw: float
    behaviors: tuple = ()
    speed: float = 0.0
    object_class: str = "car"

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise InvalidScenarioError(f"actor {self.id}: dimensions must be positive")
        if not self.behaviors:
            raise InvalidScenarioError(f"actor {self.id}: behavior list is empty")
        object.__setattr__(self, "behaviors", tuple(self.behaviors))


@dataclass
class ActorState:
    x: float
    y: float
    yaw: float
    speed: float
    length: float
    width: float
    behavior_index: int = 0
    waypoint_index: int = 0
    wait_elapsed: int = 0
    started: bool = False

    @property
    def footprint(self) -> OrientedBox:
        return OrientedBox((self.x, self.y), self.length, self.width, self.yaw)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass
class GroundTruthState:
    time: int
    actors: dict[str, ActorState]

    def copy(self) -> GroundTruthState:
        return GroundTruthState(self.time, {k: copy.copy(v) for k, v in self.actors.items()})


def initial_state(specs: Sequence[ActorSpec]) -> GroundTruthState:
    return GroundTruthState(0, {
        a.id: ActorState(a.x, a.y, wrap_angle(a.yaw), a.speed, a.length, a.width) for a in specs
    })


def _advance_waypoints(st: ActorState, beh: WaypointFollow, dt_s: float) -> bool:
    """Move along the waypoint polyline; returns True once the last waypoint is reached."""
    wps = beh.waypoints
    if not st.started:
        # waypoints already within the reach radius at activation are considered reached
        while st.waypoint_index < len(wps) and math.hypot(
            wps[st.waypoint_index][0] - st.x, wps[st.waypoint_index][1] - st.y
        ) <= WAYPOINT_REACHED_RADIUS:
            st.waypoint_index += 1
        st.started = True
    st.speed = beh.speed
    remaining = beh.speed * dt_s
    while st.waypoint_index < len(wps):
        tx, ty = wps[st.waypoint_index]
        dx, dy = tx - st.x, ty - st.y
        dist = math.hypot(dx, dy)
        if dist > 0.0:
            st.yaw = math.atan2(dy, dx)
        if dist > remaining:
            st.x += remaining * dx / dist
            st.y += remaining * dy / dist
            return False
        st.x, st.y = tx, ty
        remaining -= dist
        st.waypoint_index += 1
    return True


def _step_actor(st: ActorState, spec: ActorSpec, dt: int) -> None:
    dt_left = dt
    while dt_left > 0 and st.behavior_index < len(spec.behaviors):
        beh = spec.behaviors[st.behavior_index]
        if isinstance(beh, WaypointFollow):
            done = _advance_waypoints(st, beh, dt_left / 1000.0)
            dt_left = 0
        elif isinstance(beh, StopVehicle):
            dt_s = dt_left / 1000.0
            v = st.speed
            stop_time = v / beh.deceleration
            if stop_time <= dt_s:
                travel = 0.5 * v * stop_time
                st.speed = 0.0
                done = True
            else:
                travel = v * dt_s - 0.5 * beh.deceleration * dt_s * dt_s
                st.speed = v - beh.deceleration * dt_s
                done = False
            st.x += travel * math.cos(st.yaw)
            st.y += travel * math.sin(st.yaw)
            dt_left = 0
        else:
            st.speed = 0.0
            need = beh.duration_ms - st.wait_elapsed
            used = min(need, dt_left)
            st.wait_elapsed += used
            dt_left -= used
            done = st.wait_elapsed >= beh.duration_ms
        if done:
            st.behavior_index += 1
            st.waypoint_index = 0
            st.wait_elapsed = 0
            st.started = False
    if st.behavior_index >= len(spec.behaviors):
        st.speed = 0.0


def step_world(state: GroundTruthState, specs: Sequence[ActorSpec], dt: int) -> GroundTruthState:
    """Advance every actor by ``dt`` milliseconds (0 < dt <= 50)."""
    if not (0 < dt <= 50):
        raise ValueError(f"dt must be in (0, 50] ms, got {dt}")
    new = state.copy()
    new.time = state.time + int(dt)
    for spec in specs:
        if spec.id in new.actors:
            _step_actor(new.actors[spec.id], spec, int(dt))
    return new


# ---------------------------------------------------------------------------
# Sensor configuration carried by a scenario
# ---------------------------------------------------------------------------


@dataclass
class RsuPlacement:
    """Roadside camera pose plus the correspondences used to calibrate it."""

    position: tuple[float, float]
    height: float
    heading: float
    pitch: float
    focal_px: float
    image_size: tuple[int, int] = (896, 504)
    correspondences: list = field(default_factory=list)

    def camera(self) -> PinholeCamera:
        w, h = self.image_size
        return PinholeCamera(
            self.focal_px, (w / 2.0, h / 2.0), (self.position[0], self.position[1], self.height),
            self.heading, self.pitch,
        )


@dataclass
class RsuSensorParams:
    max_range: float = 80.0
    noise_bands: tuple = ((50.0, 0.8), (120.0, 1.7))
    yaw_sigma: float = 0.05
    miss_probability: float = 0.05
    quantize: bool = True
    confidence: float = 0.9


@dataclass
class OnboardSensorParams:
    max_range: float = 60.0
    position_sigma: float = 0.15
    yaw_sigma: float = 0.02
    visibility_threshold: float = 0.3
    n_rays: int = 16
    confidence: float = 0.95


@dataclass
class ScenarioSpec:
    name: str
    duration_ms: int
    lanelet_map: LaneletMap
    actors: list[ActorSpec]
    ego_id: str
    target_id: str
    rsu: RsuPlacement
    rsu_sensor: RsuSensorParams = field(default_factory=RsuSensorParams)
    onboard_sensor: OnboardSensorParams = field(default_factory=OnboardSensorParams)
    seed: int = 0

    def actor(self, actor_id: str) -> ActorSpec:
        for a in self.actors:
            if a.id == actor_id:
                return a
        raise KeyError(actor_id)

    def rsu_homography(self):
        return estimate_homography(self.rsu.correspondences)


def noise_free(spec: ScenarioSpec) -> ScenarioSpec:
    """Copy of ``spec`` with every sensor error source switched off."""
    rsu = replace(
        spec.rsu_sensor,
        noise_bands=tuple((r, 0.0) for r, _ in spec.rsu_sensor.noise_bands),
        yaw_sigma=0.0, miss_probability=0.0, quantize=False,
    )
    onboard = replace(spec.onboard_sensor, position_sigma=0.0, yaw_sigma=0.0)
    return replace(spec, rsu_sensor=rsu, onboard_sensor=onboard)


# ---------------------------------------------------------------------------
# Red-light-runner scenario
# ---------------------------------------------------------------------------


@dataclass
class RedlightParams:
    adversary_speed: float = 15.0
    lane_width: float = 3.5
    lanes_per_direction: int = 2
    stop_line_offset: float = 2.0
    road_extent: float = 150.0
    adversary_start_x: float = -110.0
    adversary_end_x: float = 60.0
    adversary_stop_decel: float = 3.0
    adversary_lane: int = 0
    ego_length: float = 4.5
    ego_width: float = 2.0
    adversary_length: float = 4.5
    adversary_width: float = 2.0
    occluder_length: float = 8.0
    occluder_width: float = 2.5
    occluder_class: str = "truck"
    rsu_corner: tuple = (9.0, -9.0)
    rsu_height: float = 6.0
    rsu_pitch_deg: float = 15.0
    rsu_focal_px: float = 1000.0
    duration_ms: int = 20000
    seed: int = 0


def _through_lane(lane_id, start, end, box_half):
    """Approach / box / exit segments of one straight lane, chained."""
    (x0, y0), (x1, y1) = start, end
    dx, dy = x1 - x0, y1 - y0
    length = math.hypot(dx, dy)
    ux, uy = dx / length, dy / length
    # where the lane enters and leaves the intersection box |x|,|y| <= box_half
    t_in, t_out = 0.0, length
    for c0, u in ((x0, ux), (y0, uy)):
        if abs(u) > 1e-12:
            a, b = sorted([(-box_half - c0) / u, (box_half - c0) / u])
            t_in, t_out = max(t_in, a), min(t_out, b)
    p_in = (x0 + t_in * ux, y0 + t_in * uy)
    p_out = (x0 + t_out * ux, y0 + t_out * uy)
    ids = [f"{lane_id}_in", f"{lane_id}_box", f"{lane_id}_out"]
    return [
        LaneCenterline(ids[0], [start, p_in], [ids[1]]),
        LaneCenterline(ids[1], [p_in, p_out], [ids[2]]),
        LaneCenterline(ids[2], [p_out, end], []),
    ]


def build_redlight_scenario(params: Optional[RedlightParams] = None) -> ScenarioSpec:
    """Four-way intersection with an occluded red-light runner.

    The ego vehicle waits at the stop line of the south approach, a truck
    stands in the adjacent lane to its left, and the adversary crosses
    west-to-east. The roadside camera sits on the south-east corner looking
    west along the crossing road.
    """
    p = params or RedlightParams()
    if not p.adversary_speed > 0 or not p.adversary_stop_decel > 0:
        raise InvalidScenarioError("adversary speed and deceleration must be positive")
    if p.lane_width <= 0 or p.lanes_per_direction < 1 or p.duration_ms <= 0:
        raise InvalidScenarioError("invalid road geometry")
    if not 0 <= p.adversary_lane < p.lanes_per_direction:
        raise InvalidScenarioError("adversary lane index out of range")
    w, n, ext = p.lane_width, p.lanes_per_direction, p.road_extent
    half = n * w
    offsets = [(k + 0.5) * w for k in range(n)]  # inner lane first

    lanes: list[LaneCenterline] = []
    for k, off in enumerate(offsets):
        # right-hand traffic: eastbound south of the center line, etc.
        lanes += _through_lane(f"eb{k}", (-ext, -off), (ext, -off), half)
        lanes += _through_lane(f"wb{k}", (ext, off), (-ext, off), half)
        lanes += _through_lane(f"nb{k}", (off, -ext), (off, ext), half)
        lanes += _through_lane(f"sb{k}", (-off, ext), (-off, -ext), half)
    lanelet_map = LaneletMap(lanes)

    stop_y = -half - p.stop_line_offset
    ego_x = offsets[-1]  # outer northbound lane
    occ_x = offsets[-2] if n > 1 else offsets[-1] - w
    adv_y = -offsets[p.adversary_lane]
    ego = ActorSpec("ego", p.ego_length, p.ego_width, ego_x, stop_y - p.ego_length / 2, math.pi / 2,
                    (Wait(p.duration_ms),))
    occluder = ActorSpec("occluder", p.occluder_length, p.occluder_width, occ_x,
                         stop_y - p.occluder_length / 2, math.pi / 2, (Wait(p.duration_ms),),
                         object_class=p.occluder_class)
    adversary = ActorSpec(
        "adversary", p.adversary_length, p.adversary_width, p.adversary_start_x, adv_y, 0.0,
        (
            WaypointFollow(((-half, adv_y), (half, adv_y), (p.adversary_end_x, adv_y)), p.adversary_speed),
            StopVehicle(p.adversary_stop_decel),
            Wait(p.duration_ms),
        ),
        speed=p.adversary_speed,
    )

    rsu = RsuPlacement(
        position=tuple(p.rsu_corner), height=p.rsu_height, heading=math.pi,
        pitch=math.radians(p.rsu_pitch_deg), focal_px=p.rsu_focal_px,
    )
    rsu.correspondences = synthesize_correspondences(rsu)
    return ScenarioSpec(
        name="redlight_default", duration_ms=p.duration_ms, lanelet_map=lanelet_map,
        actors=[ego, occluder, adversary], ego_id="ego", target_id="adversary", rsu=rsu, seed=p.seed,
    )


def synthesize_correspondences(rsu: RsuPlacement, n_forward=(15.0, 30.0, 50.0, 75.0), lateral=(-6.0, 0.0, 6.0)):
    """Ground markers in front of the camera and their exact pixels."""
    cam = rsu.camera()
    fwd = np.array([math.cos(rsu.heading), math.sin(rsu.heading)])
    left = np.array([-fwd[1], fwd[0]])
    out = []
    for f in n_forward:
        for lat in lateral:
            g = np.asarray(rsu.position) + f * fwd + lat * left
            px = cam.project([[g[0], g[1], 0.0]])[0]
            out.append(PointCorrespondence((float(px[0]), float(px[1])), (float(g[0]), float(g[1]))))
    return out


# ---------------------------------------------------------------------------
# Scenario files (YAML)
# ---------------------------------------------------------------------------


def _behavior_to_dict(b: Behavior) -> dict:
    if isinstance(b, WaypointFollow):
        return {"type": "waypoint_follow", "waypoints": [list(w) for w in b.waypoints], "speed": b.speed}
    if isinstance(b, StopVehicle):
        return {"type": "stop_vehicle", "deceleration": b.deceleration}
    return {"type": "wait", "duration_ms": b.duration_ms}


def _behavior_from_dict(d: dict) -> Behavior:
    kind = d.get("type")
    if kind == "waypoint_follow":
        return WaypointFollow(tuple(tuple(w) for w in d["waypoints"]), float(d["speed"]))
    if kind == "stop_vehicle":
        return StopVehicle(float(d["deceleration"]))
    if kind == "wait":
        return Wait(int(d["duration_ms"]))
    raise InvalidScenarioError(f"unknown behavior type {kind!r}")


def _floats(seq):
    return [float(v) for v in seq]


def scenario_to_dict(spec: ScenarioSpec) -> dict:
    return {
        "name": spec.name,
        "duration_ms": int(spec.duration_ms),
        "seed": int(spec.seed),
        "ego_id": spec.ego_id,
        "target_id": spec.target_id,
        "lanes": [
            {"id": l.id, "points": [_floats(pt) for pt in l.points], "successors": list(l.successors)}
            for l in spec.lanelet_map
        ],
        "actors": [
            {
                "id": a.id, "class": a.object_class, "length": a.length, "width": a.width,
                "pose": [a.x, a.y, a.yaw], "speed": a.speed,
                "behaviors": [_behavior_to_dict(b) for b in a.behaviors],
            }
            for a in spec.actors
        ],
        "rsu": {
            "position": _floats(spec.rsu.position),
            "height": spec.rsu.height,
            "heading": spec.rsu.heading,
            "pitch": spec.rsu.pitch,
            "focal_px": spec.rsu.focal_px,
            "image_size": [int(v) for v in spec.rsu.image_size],
            "correspondences": [
                _floats([*c.image_point, *c.ground_point]) for c in spec.rsu.correspondences
            ],
        },
        "sensors": {
            "rsu": {**asdict(spec.rsu_sensor), "noise_bands": [_floats(b) for b in spec.rsu_sensor.noise_bands]},
            "onboard": asdict(spec.onboard_sensor),
        },
    }


def scenario_from_dict(d: dict) -> ScenarioSpec:
    try:
        lanes = [LaneCenterline(str(l["id"]), l["points"], [str(s) for s in l.get("successors", [])])
                 for l in d["lanes"]]
        actors = [
            ActorSpec(
                str(a["id"]), float(a["length"]), float(a["width"]),
                *(float(v) for v in a["pose"]),
                behaviors=tuple(_behavior_from_dict(b) for b in a["behaviors"]),
                speed=float(a.get("speed", 0.0)), object_class=str(a.get("class", "car")),
            )
            for a in d["actors"]
        ]
        r = d["rsu"]
        rsu = RsuPlacement(
            tuple(r["position"]), float(r["height"]), float(r["heading"]), float(r["pitch"]),
            float(r["focal_px"]), tuple(int(v) for v in r.get("image_size", (896, 504))),
            [PointCorrespondence((c[0], c[1]), (c[2], c[3])) for c in r["correspondences"]],
        )
        sensors = d.get("sensors", {})
        rsu_sensor = dict(sensors.get("rsu", {}))
        if "noise_bands" in rsu_sensor:
            rsu_sensor["noise_bands"] = tuple(tuple(float(v) for v in b) for b in rsu_sensor["noise_bands"])
        spec = ScenarioSpec(
            name=str(d.get("name", "scenario")), duration_ms=int(d["duration_ms"]),
            lanelet_map=LaneletMap(lanes), actors=actors, ego_id=str(d["ego_id"]),
            target_id=str(d["target_id"]), rsu=rsu,
            rsu_sensor=RsuSensorParams(**rsu_sensor),
            onboard_sensor=OnboardSensorParams(**sensors.get("onboard", {})),
            seed=int(d.get("seed", 0)),
        )
    except (KeyError, TypeError) as exc:
        raise InvalidScenarioError(f"malformed scenario: {exc}") from exc
    ids = {a.id for a in spec.actors}
    if spec.ego_id not in ids or spec.target_id not in ids:
        raise InvalidScenarioError("ego_id and target_id must name actors")
    return spec


def save_scenario(spec: ScenarioSpec, path) -> None:
    Path(path).write_text(yaml.safe_dump(scenario_to_dict(spec), sort_keys=False, width=120))


BUNDLED = {"redlight_default": Path(__file__).parent / "data" / "redlight_default.yaml"}


def load_scenario(path_or_name) -> ScenarioSpec:
    path = BUNDLED.get(str(path_or_name), Path(path_or_name))
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise InvalidScenarioError(f"{path}: not a scenario mapping")
    return scenario_from_dict(data)
