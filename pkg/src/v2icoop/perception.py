"""Parametric sensor models for the roadside camera and the onboard LIDAR.

The roadside model pushes every true center through the calibrated
homography (project, round to a pixel, back-project) and tops the resulting
quantization error up with Gaussian noise so that the total RMS center error
matches the configured range band. The onboard model is an occlusion-aware
detector: a target is reported only when enough of its footprint is in line
of sight.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import (
    Homography,
    HorizonSingularityError,
    OrientedBox,
    image_project,
    ipm_jacobian,
    ipm_project,
    wrap_angle,
)
from .scenario import GroundTruthState, OnboardSensorParams, RsuSensorParams, ScenarioSpec


class Source(str, enum.Enum):
    RSU = "RSU"
    ONBOARD = "ONBOARD"


OBJECT_CLASSES = ("car", "truck", "bus", "unknown")


@dataclass(frozen=True)
class Detection:
    box: OrientedBox
    object_class: str
    confidence: float
    source: Source
    frame_time: int
    processing_time: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")
        if self.frame_time < 0:
            raise ValueError("frame_time must be >= 0")
        if self.object_class not in OBJECT_CLASSES:
            object.__setattr__(self, "object_class", "unknown")


@dataclass
class RsuSensorModel:
    homography: Homography
    camera_position: tuple[float, float]
    camera_heading: float
    image_size: tuple[int, int] = (896, 504)
    max_range: float = 80.0
    noise_bands: tuple = ((50.0, 0.8), (120.0, 1.7))
    yaw_sigma: float = 0.05
    miss_probability: float = 0.05
    quantize: bool = True
    confidence: float = 0.9

    def __post_init__(self):
        prev = 0.0
        for upper, sigma in self.noise_bands:
            if upper <= prev or sigma < 0:
                raise ValueError("noise bands must be contiguous with non-negative sigma")
            prev = upper
        if self.yaw_sigma < 0 or not 0.0 <= self.miss_probability < 1.0:
            raise ValueError("invalid RSU noise parameters")

    @classmethod
    def from_scenario(cls, spec: ScenarioSpec) -> RsuSensorModel:
        p: RsuSensorParams = spec.rsu_sensor
        return cls(
            homography=spec.rsu_homography(),
            camera_position=tuple(spec.rsu.position),
            camera_heading=spec.rsu.heading,
            image_size=tuple(spec.rsu.image_size),
            max_range=p.max_range, noise_bands=tuple(p.noise_bands), yaw_sigma=p.yaw_sigma,
            miss_probability=p.miss_probability, quantize=p.quantize, confidence=p.confidence,
        )

    def band_sigma(self, distance: float) -> float:
        """Target RMS (radial) center error at ``distance`` from the camera."""
        for upper, sigma in self.noise_bands:
            if distance <= upper:
                return sigma
        return self.noise_bands[-1][1]

    def in_view(self, point) -> Optional[np.ndarray]:
        """Pixel of a ground point if it is in range, in front of and inside the image."""
        rel = np.asarray(point, dtype=float) - np.asarray(self.camera_position)
        if math.hypot(rel[0], rel[1]) > self.max_range:
            return None
        if rel[0] * math.cos(self.camera_heading) + rel[1] * math.sin(self.camera_heading) <= 0.0:
            return None
        try:
            px = image_project(self.homography, point)
        except HorizonSingularityError:
            return None
        w, h = self.image_size
        if not (0.0 <= px[0] < w and 0.0 <= px[1] < h):
            return None
        return px


@dataclass
class OnboardSensorModel:
    max_range: float = 60.0
    position_sigma: float = 0.15
    yaw_sigma: float = 0.02
    visibility_threshold: float = 0.3
    n_rays: int = 16
    confidence: float = 0.95

    @classmethod
    def from_params(cls, p: OnboardSensorParams) -> OnboardSensorModel:
        return cls(p.max_range, p.position_sigma, p.yaw_sigma, p.visibility_threshold, p.n_rays, p.confidence)


def _quantization_mse(model: RsuSensorModel, pixel) -> float:
    """Expected squared ground error of rounding ``pixel`` (uniform +-0.5 px per axis)."""
    jac = ipm_jacobian(model.homography, pixel)
    return float(np.sum(jac * jac)) / 12.0


def rsu_detect_with_truth(
    model: RsuSensorModel, truth: GroundTruthState, rng: np.random.Generator, classes: Optional[dict] = None
) -> list[tuple[Detection, str]]:
    out = []
    for actor_id in sorted(truth.actors):
        st = truth.actors[actor_id]
        center = np.array([st.x, st.y])
        px = model.in_view(center)
        if px is None:
            continue
        # fixed draw count per visible actor keeps the stream aligned across configs
        u_miss = rng.random()
        noise = rng.standard_normal(3)
        if u_miss < model.miss_probability:
            continue
        dist = float(np.hypot(*(center - np.asarray(model.camera_position))))
        if model.quantize:
            q_px = np.round(px)
            est = ipm_project(model.homography, q_px)
            q_mse = _quantization_mse(model, px)
        else:
            est = ipm_project(model.homography, px)
            q_mse = 0.0
        target = model.band_sigma(dist)
        sigma_axis = math.sqrt(max(0.0, target * target - q_mse) / 2.0)
        est = est + sigma_axis * noise[:2]
        yaw = wrap_angle(st.yaw + model.yaw_sigma * noise[2])
        box = OrientedBox((est[0], est[1]), st.length, st.width, yaw)
        cls = (classes or {}).get(actor_id, "car")
        out.append((Detection(box, cls, model.confidence, Source.RSU, truth.time, 0.0), actor_id))
    return out


def rsu_detect(model: RsuSensorModel, truth: GroundTruthState, rng: np.random.Generator,
               classes: Optional[dict] = None) -> list[Detection]:
    """Roadside camera detections of every in-view actor (no identities)."""
    return [d for d, _ in rsu_detect_with_truth(model, truth, rng, classes)]


# ---------------------------------------------------------------------------
# Occlusion
# ---------------------------------------------------------------------------


def perimeter_samples(box: OrientedBox, n: int) -> np.ndarray:
    """``n`` points equally spaced along the perimeter, offset half a spacing from corner 0."""
    corners = box.corners()
    edges = np.roll(corners, -1, axis=0) - corners
    lengths = np.hypot(edges[:, 0], edges[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    total = cum[-1]
    pts = np.empty((n, 2))
    for i in range(n):
        s = (i + 0.5) * total / n
        k = min(int(np.searchsorted(cum, s, side="right") - 1), 3)
        pts[i] = corners[k] + (s - cum[k]) / lengths[k] * edges[k]
    return pts


def segment_hits_box(p0, p1, box: OrientedBox, eps: float = 1e-9) -> bool:
    """True if segment p0-p1 passes through the open interior of ``box``.

    Liang-Barsky clipping in the box frame; grazing an edge or a corner does
    not count.
    """
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    cx, cy = box.center

    def local(p):
        dx, dy = p[0] - cx, p[1] - cy
        return c * dx + s * dy, -s * dx + c * dy

    x0, y0 = local(p0)
    x1, y1 = local(p1)
    dx, dy = x1 - x0, y1 - y0
    hl, hw = 0.5 * box.length, 0.5 * box.width
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, x0 + hl), (dx, hl - x0), (-dy, y0 + hw), (dy, hw - y0)):
        if p == 0.0:
            if q < 0.0:
                return False
            continue
        r = q / p
        if p < 0.0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 > t1:
            return False
    if t1 - t0 <= eps:
        return False
    tm = 0.5 * (t0 + t1)
    mx, my = x0 + tm * dx, y0 + tm * dy
    return abs(mx) < hl - eps and abs(my) < hw - eps


def visible_fraction(sensor_origin, target: OrientedBox, obstacles: Sequence[OrientedBox], n_rays: int = 16) -> float:
    """Share of perimeter sample rays from ``sensor_origin`` that no obstacle blocks."""
    origin = (float(sensor_origin[0]), float(sensor_origin[1]))
    if any(ob.contains(origin) for ob in obstacles):
        return 0.0
    if not obstacles:
        return 1.0
    visible = 0
    for pt in perimeter_samples(target, n_rays):
        if not any(segment_hits_box(origin, pt, ob) for ob in obstacles):
            visible += 1
    return visible / n_rays


def onboard_detect_with_truth(
    model: OnboardSensorModel, truth: GroundTruthState, ego_id: str, rng: np.random.Generator,
    classes: Optional[dict] = None,
) -> list[tuple[Detection, str]]:
    ego = truth.actors[ego_id]
    origin = (ego.x, ego.y)
    boxes = {aid: st.footprint for aid, st in truth.actors.items()}
    out = []
    for actor_id in sorted(truth.actors):
        if actor_id == ego_id:
            continue
        st = truth.actors[actor_id]
        if math.hypot(st.x - ego.x, st.y - ego.y) > model.max_range:
            continue
        obstacles = [b for aid, b in boxes.items() if aid not in (ego_id, actor_id)]
        if visible_fraction(origin, boxes[actor_id], obstacles, model.n_rays) < model.visibility_threshold:
            continue
        noise = rng.standard_normal(3)
        box = OrientedBox(
            (st.x + model.position_sigma * noise[0], st.y + model.position_sigma * noise[1]),
            st.length, st.width, wrap_angle(st.yaw + model.yaw_sigma * noise[2]),
        )
        cls = (classes or {}).get(actor_id, "car")
        out.append((Detection(box, cls, model.confidence, Source.ONBOARD, truth.time, 0.0), actor_id))
    return out


def onboard_detect(model: OnboardSensorModel, truth: GroundTruthState, ego_id: str, rng: np.random.Generator,
                   classes: Optional[dict] = None) -> list[Detection]:
    return [d for d, _ in onboard_detect_with_truth(model, truth, ego_id, rng, classes)]
