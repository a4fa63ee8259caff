"""Rigid transforms, ground-plane homographies and rotated-box IoU.

Frame convention: ``T_a2b`` maps coordinates expressed in frame ``a`` into
frame ``b``, so ``compose(a2b, b2c)`` yields ``a2c``.

The homography ``H`` maps ground-plane points (meters, z = 0) to image pixels::

    [u, v, 1]^T  ~  H [x, y, 1]^T

and inverse perspective mapping applies ``H^-1``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

VERTEX_MERGE_TOL = 1e-12
SINGULAR_W_TOL = 1e-12


class GeometryError(ValueError):
    pass


class InvalidTransformError(GeometryError):
    pass


class InsufficientDataError(GeometryError):
    pass


class DegenerateConfigurationError(GeometryError):
    pass


class HorizonSingularityError(GeometryError):
    """Pixel lies on (or beyond) the vanishing line of the ground plane."""


def wrap_angle(angle: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(angle + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------------------
# Rigid transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise InvalidTransformError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(rot_z(yaw), np.asarray(translation, dtype=float))

    def apply(self, points) -> np.ndarray:
        """Map one point (3,) or many (N, 3) from the source to the target frame."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])


def compose(a2b: RigidTransform, b2c: RigidTransform) -> RigidTransform:
    """Chain ``a2b`` then ``b2c`` into ``a2c``."""
    return RigidTransform(
        b2c.rotation @ a2b.rotation,
        b2c.rotation @ a2b.translation + b2c.translation,
    )


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def camera_to_base(camera2map: RigidTransform, map2base: RigidTransform) -> RigidTransform:
    """T_Camera2Base = T_Map2Base x T_Camera2Map."""
    return compose(camera2map, map2base)


def transform_object_to_base(object2camera: RigidTransform, camera2base: RigidTransform) -> RigidTransform:
    """T_Object2Base = T_Camera2Base x T_Object2Camera."""
    return compose(object2camera, camera2base)


@dataclass(frozen=True)
class SimilarityTransform:
    """Planar similarity used to place local map pixels in the metric map frame."""

    scale: float
    yaw: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (self.scale > 0.0) or not math.isfinite(self.scale):
            raise InvalidTransformError(f"scale must be positive, got {self.scale}")


def local_map_to_map(local_pixel, t_l2m: SimilarityTransform) -> np.ndarray:
    p = np.asarray(local_pixel, dtype=float)
    c, s = math.cos(t_l2m.yaw), math.sin(t_l2m.yaw)
    r = np.array([[c, -s], [s, c]])
    return t_l2m.scale * (p @ r.T) + np.asarray(t_l2m.translation, dtype=float)


# ---------------------------------------------------------------------------
# Homography
# ---------------------------------------------------------------------------


def _normalize_matrix(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    norm = np.linalg.norm(m)
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateConfigurationError("matrix has zero or non-finite norm")
    m = m / norm
    ref = m.flat[-1]
    if ref == 0.0:
        nz = np.flatnonzero(m)
        ref = m.flat[nz[0]]
    return -m if ref < 0.0 else m


@dataclass(frozen=True)
class Homography:
    """Ground-to-image homography stored with unit Frobenius norm."""

    matrix: np.ndarray

    def __post_init__(self):
        m = _normalize_matrix(np.asarray(self.matrix, dtype=float).reshape(3, 3))
        if abs(np.linalg.det(m)) <= 1e-12:
            raise DegenerateConfigurationError("homography is singular")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "_inverse", np.linalg.inv(m))

    @classmethod
    def identity(cls) -> Homography:
        return cls(np.eye(3))

    @property
    def inverse(self) -> np.ndarray:
        return self._inverse


@dataclass(frozen=True)
class PointCorrespondence:
    image_point: tuple[float, float]
    ground_point: tuple[float, float]

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (*self.image_point, *self.ground_point)):
            raise ValueError("correspondence coordinates must be finite")


def _hartley(points: np.ndarray) -> np.ndarray:
    """Similarity that moves the centroid to 0 and the mean distance to sqrt(2)."""
    centroid = points.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(points - centroid, axis=1))
    if mean_dist <= 0.0:
        raise DegenerateConfigurationError("all points coincide")
    s = math.sqrt(2.0) / mean_dist
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def dlt_system(ground: np.ndarray, image: np.ndarray) -> np.ndarray:
    """Stack the 2N x 9 design matrix A with A p = 0 for ground -> image."""
    n = len(ground)
    a = np.zeros((2 * n, 9))
    for i, ((x, y), (u, v)) in enumerate(zip(ground, image)):
        a[2 * i] = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]
        a[2 * i + 1] = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]
    return a


def _unit_null_vector(a: np.ndarray, rank: int, rtol: float = 1e-10) -> np.ndarray:
    _, s, vt = np.linalg.svd(a)
    if len(s) < rank or s[rank - 1] <= rtol * s[0]:
        raise DegenerateConfigurationError(f"design matrix has rank < {rank}")
    return vt[-1]


def estimate_homography(correspondences: Sequence[PointCorrespondence]) -> Homography:
    """Normalized DLT: minimize ||A p|| subject to ||p|| = 1."""
    if len(correspondences) < 4:
        raise InsufficientDataError(f"need >= 4 correspondences, got {len(correspondences)}")
    image = np.array([c.image_point for c in correspondences], dtype=float)
    ground = np.array([c.ground_point for c in correspondences], dtype=float)
    t_img, t_gnd = _hartley(image), _hartley(ground)
    img_n = _apply_h(t_img, image)
    gnd_n = _apply_h(t_gnd, ground)
    p = _unit_null_vector(dlt_system(gnd_n, img_n), rank=8)
    h_n = p.reshape(3, 3)
    return Homography(np.linalg.inv(t_img) @ h_n @ t_gnd)


def estimate_projection(image_points, world_points) -> np.ndarray:
    """Full 3x4 DLT for correspondences that are not all coplanar (>= 6 points)."""
    img = np.asarray(image_points, dtype=float)
    wld = np.asarray(world_points, dtype=float)
    if len(img) < 6:
        raise InsufficientDataError("need >= 6 correspondences for a 3x4 projection")
    a = np.zeros((2 * len(img), 12))
    for i, ((u, v), (x, y, z)) in enumerate(zip(img, wld)):
        a[2 * i] = [-x, -y, -z, -1.0, 0, 0, 0, 0, u * x, u * y, u * z, u]
        a[2 * i + 1] = [0, 0, 0, 0, -x, -y, -z, -1.0, v * x, v * y, v * z, v]
    p = _unit_null_vector(a, rank=11)
    return _normalize_matrix(p.reshape(3, 4))


def projection_to_homography(projection: np.ndarray) -> Homography:
    """Drop the z column of a 3x4 projection to get the z = 0 homography."""
    p = np.asarray(projection, dtype=float)
    return Homography(p[:, [0, 1, 3]])


def _apply_h(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    hom = np.column_stack([pts, np.ones(len(pts))]) @ h.T
    return hom[:, :2] / hom[:, 2:3]


def _project(m: np.ndarray, point) -> tuple[np.ndarray, float]:
    x, y = float(point[0]), float(point[1])
    a, b, w = m @ np.array([x, y, 1.0])
    if abs(w) < SINGULAR_W_TOL:
        raise HorizonSingularityError(f"point {point} maps to infinity")
    return np.array([a / w, b / w]), w


def ipm_project(h: Homography, pixel) -> np.ndarray:
    return _project(h.inverse, pixel)[0]


def image_project(h: Homography, ground_point) -> np.ndarray:
    return _project(h.matrix, ground_point)[0]


def ipm_jacobian(h: Homography, pixel) -> np.ndarray:
    """d(ground)/d(pixel) of the inverse mapping at ``pixel``."""
    m = h.inverse
    a, b, w = m @ np.array([pixel[0], pixel[1], 1.0])
    jac = np.empty((2, 2))
    for k in range(2):
        da, db, dw = m[0, k], m[1, k], m[2, k]
        jac[0, k] = (da * w - a * dw) / (w * w)
        jac[1, k] = (db * w - b * dw) / (w * w)
    return jac


def reprojection_residuals(h: Homography, correspondences: Sequence[PointCorrespondence]) -> np.ndarray:
    """Per-point pixel distance between observed and ``H``-projected image points."""
    return np.array(
        [np.linalg.norm(image_project(h, c.ground_point) - np.asarray(c.image_point)) for c in correspondences]
    )


@dataclass(frozen=True)
class PinholeCamera:
    """Distortion-free camera looking at the z = 0 plane.

    ``heading`` is the yaw of the optical axis in the map frame and ``pitch``
    the downward tilt below the horizon.
    """

    focal_px: float
    principal_point: tuple[float, float]
    position: tuple[float, float, float]
    heading: float
    pitch: float

    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        fwd = np.array([
            math.cos(self.pitch) * math.cos(self.heading),
            math.cos(self.pitch) * math.sin(self.heading),
            -math.sin(self.pitch),
        ])
        right = np.array([math.sin(self.heading), -math.cos(self.heading), 0.0])
        down = np.cross(fwd, right)
        r = np.vstack([right, down, fwd])
        t = -r @ np.asarray(self.position, dtype=float)
        return r, t

    @property
    def intrinsics(self) -> np.ndarray:
        cx, cy = self.principal_point
        return np.array([[self.focal_px, 0.0, cx], [0.0, self.focal_px, cy], [0.0, 0.0, 1.0]])

    def projection_matrix(self) -> np.ndarray:
        r, t = self.world_to_camera()
        return self.intrinsics @ np.column_stack([r, t])

    def homography(self) -> Homography:
        return projection_to_homography(self.projection_matrix())

    def project(self, world_points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(world_points, dtype=float))
        hom = np.column_stack([pts, np.ones(len(pts))]) @ self.projection_matrix().T
        return hom[:, :2] / hom[:, 2:3]

    def ground_intersection(self, pixel) -> np.ndarray:
        """Ray through ``pixel`` intersected with z = 0."""
        r, _ = self.world_to_camera()
        ray_cam = np.linalg.solve(self.intrinsics, np.array([pixel[0], pixel[1], 1.0]))
        ray = r.T @ ray_cam
        c = np.asarray(self.position, dtype=float)
        if ray[2] >= 0.0:
            raise HorizonSingularityError("ray does not hit the ground in front of the camera")
        lam = -c[2] / ray[2]
        return (c + lam * ray)[:2]


class HomographyEstimator(TransformerMixin, BaseEstimator):
    """Calibrate an image <-> ground homography from point correspondences.

    ``fit(X, y)`` takes image pixels ``X`` (N x 2) and ground points ``y``
    (N x 2, meters). ``transform`` maps pixels to the ground plane (IPM) and
    ``inverse_transform`` maps ground points back into the image.
    """

    def __init__(self, min_points: int = 4):
        self.min_points = min_points

    def fit(self, X, y):
        X = check_array(X)
        y = check_array(y)
        if X.shape[1] != 2 or y.shape != X.shape:
            raise ValueError("X and y must both be N x 2")
        if len(X) < self.min_points:
            raise InsufficientDataError(f"need >= {self.min_points} correspondences")
        self.correspondences_ = [PointCorrespondence(tuple(p), tuple(g)) for p, g in zip(X, y)]
        self.homography_ = estimate_homography(self.correspondences_)
        self.residuals_ = reprojection_residuals(self.homography_, self.correspondences_)
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        check_is_fitted(self, "homography_")
        X = check_array(X)
        return np.array([ipm_project(self.homography_, p) for p in X])

    def inverse_transform(self, X):
        check_is_fitted(self, "homography_")
        X = check_array(X)
        return np.array([image_project(self.homography_, p) for p in X])

    def score(self, X, y):
        """Negative mean ground-plane error of the IPM of ``X`` against ``y``."""
        err = np.linalg.norm(self.transform(X) - np.asarray(y, dtype=float), axis=1)
        return -float(err.mean())


def read_correspondences(path) -> list[PointCorrespondence]:
    """Read a ``u_px, v_px, x_m, y_m`` CSV with a header row."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, skipinitialspace=True)
        required = {"u_px", "v_px", "x_m", "y_m"}
        if reader.fieldnames is None or not required.issubset(f.strip() for f in reader.fieldnames):
            raise ValueError(f"{path}: header must contain {sorted(required)}")
        for row in reader:
            row = {k.strip(): v for k, v in row.items()}
            out.append(PointCorrespondence(
                (float(row["u_px"]), float(row["v_px"])),
                (float(row["x_m"]), float(row["y_m"])),
            ))
    return out


def write_correspondences(path, correspondences: Iterable[PointCorrespondence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u_px", "v_px", "x_m", "y_m"])
        for c in correspondences:
            w.writerow([repr(float(v)) for v in (*c.image_point, *c.ground_point)])


def calibration_report(h: Homography, correspondences: Sequence[PointCorrespondence]) -> str:
    res = reprojection_residuals(h, correspondences)
    lines = ["# homography calibration", f"points: {len(correspondences)}", "residuals_px:"]
    for i, (c, r) in enumerate(zip(correspondences, res)):
        lines.append(
            f"  {i}: image=({c.image_point[0]:.3f}, {c.image_point[1]:.3f}) "
            f"ground=({c.ground_point[0]:.3f}, {c.ground_point[1]:.3f}) residual={r:.6g}"
        )
    lines.append(f"rms_residual_px: {float(np.sqrt(np.mean(res ** 2))):.6g}")
    lines.append("H (row-major, unit Frobenius norm):")
    for row in h.matrix:
        lines.append("  " + " ".join(f"{v: .12e}" for v in row))
    return "\n".join(lines) + "\n"


def write_calibration_report(path, h: Homography, correspondences) -> None:
    Path(path).write_text(calibration_report(h, correspondences))


# ---------------------------------------------------------------------------
# Oriented boxes and BEV IoU
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OrientedBox:
    center: tuple[float, float]
    length: float
    width: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.length > 0.0 and self.width > 0.0):
            raise ValueError("box length and width must be positive")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    def corners(self) -> np.ndarray:
        """Four corners, counterclockwise, starting at rear-right."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.asarray(self.center)

    @property
    def area(self) -> float:
        return self.length * self.width

    def translated(self, dx: float, dy: float) -> OrientedBox:
        return OrientedBox((self.center[0] + dx, self.center[1] + dy), self.length, self.width, self.yaw)

    def contains(self, point, strict: bool = True) -> bool:
        dx = point[0] - self.center[0]
        dy = point[1] - self.center[1]
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        lx, ly = c * dx + s * dy, -s * dx + c * dy
        hl, hw = 0.5 * self.length, 0.5 * self.width
        if strict:
            return abs(lx) < hl and abs(ly) < hw
        return abs(lx) <= hl and abs(ly) <= hw


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counterclockwise)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _merge_close(points: list) -> list:
    out = []
    for p in points:
        if not out or math.hypot(p[0] - out[-1][0], p[1] - out[-1][1]) > VERTEX_MERGE_TOL:
            out.append(p)
    if len(out) > 1 and math.hypot(out[0][0] - out[-1][0], out[0][1] - out[-1][1]) <= VERTEX_MERGE_TOL:
        out.pop()
    return out


def clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by the counterclockwise convex ``clipper``."""
    output = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, output = output, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0.0:
                if s_prev < 0.0:
                    output.append(_intersect(prev, cur, s_prev, s_cur))
                output.append(cur)
            elif s_prev >= 0.0:
                output.append(_intersect(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
        output = _merge_close(output)
    return np.array(output, dtype=float).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_iou(a: OrientedBox, b: OrientedBox) -> float:
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.length, a.width)
    rb = 0.5 * math.hypot(b.length, b.width)
    if math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) >= ra + rb:
        return 0.0
    # clip the first-ordered box by the other so that the result is symmetric
    if (a.center, a.length, a.width, a.yaw) > (b.center, b.length, b.width, b.yaw):
        a, b = b, a
    inter_poly = clip_convex(a.corners(), b.corners())
    inter = abs(polygon_area(inter_poly)) if len(inter_poly) >= 3 else 0.0
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))
