import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import correspondences_for, ground_grid, mc_iou, random_box, synthetic_camera
from v2icoop.geometry import (
    DegenerateConfigurationError,
    Homography,
    HomographyEstimator,
    HorizonSingularityError,
    InsufficientDataError,
    InvalidTransformError,
    OrientedBox,
    PinholeCamera,
    PointCorrespondence,
    RigidTransform,
    SimilarityTransform,
    bev_iou,
    camera_to_base,
    compose,
    estimate_homography,
    estimate_projection,
    image_project,
    invert,
    ipm_project,
    local_map_to_map,
    projection_to_homography,
    read_correspondences,
    reprojection_residuals,
    rot_z,
    transform_object_to_base,
    write_calibration_report,
    write_correspondences,
)


# --- rigid transforms ---------------------------------------------------


def test_rigid_transform_rejects_non_orthonormal():
    with pytest.raises(InvalidTransformError):
        RigidTransform(np.diag([1.0, 1.0, 2.0]), np.zeros(3))
    with pytest.raises(InvalidTransformError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_compose_with_identity_and_inverse():
    t = RigidTransform(rot_z(0.7), np.array([1.0, -2.0, 0.5]))
    assert np.allclose(compose(t, RigidTransform.identity()).as_matrix(), t.as_matrix(), atol=1e-12)
    assert np.allclose(compose(t, invert(t)).as_matrix(), np.eye(4), atol=1e-9)


def test_camera_to_base_double_path():
    map2base = RigidTransform.from_yaw(math.pi / 2, (10.0, 0.0, 0.0))
    camera2map = RigidTransform(np.eye(3), np.array([0.0, 20.0, 6.0]))
    cam2base = camera_to_base(camera2map, map2base)
    p = np.array([1.0, 2.0, 3.0])
    # hand-chained: camera -> map adds (0, 20, 6); map -> base rotates by 90 deg then shifts by 10 in x
    in_map = p + np.array([0.0, 20.0, 6.0])
    expected = np.array([-in_map[1], in_map[0], in_map[2]]) + np.array([10.0, 0.0, 0.0])
    assert np.allclose(cam2base.apply(p), expected, atol=1e-12)
    assert np.allclose(cam2base.apply(p), map2base.apply(camera2map.apply(p)), atol=1e-12)


def test_object_to_base_double_path():
    obj2cam = RigidTransform.from_yaw(-0.3, (4.0, 1.0, 0.0))
    cam2base = RigidTransform.from_yaw(1.1, (0.5, -0.2, 1.8))
    obj2base = transform_object_to_base(obj2cam, cam2base)
    p = np.array([0.4, -0.9, 0.1])
    assert np.allclose(obj2base.apply(p), cam2base.apply(obj2cam.apply(p)), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-math.pi, math.pi), min_size=3, max_size=3),
       st.lists(st.floats(-50, 50), min_size=9, max_size=9))
def test_compose_associative_and_invert_involution(yaws, trans):
    a, b, c = (RigidTransform.from_yaw(y, trans[3 * i:3 * i + 3]) for i, y in enumerate(yaws))
    left = compose(compose(a, b), c).as_matrix()
    right = compose(a, compose(b, c)).as_matrix()
    assert np.allclose(left, right, atol=1e-9)
    assert np.allclose(invert(invert(a)).as_matrix(), a.as_matrix(), atol=1e-9)


# --- local map similarity -----------------------------------------------


@pytest.mark.parametrize("t,pixel,expected", [
    (SimilarityTransform(1.0), (3.0, 4.0), (3.0, 4.0)),
    (SimilarityTransform(0.1, 0.0, (10.0, 20.0)), (100.0, 50.0), (20.0, 25.0)),
    (SimilarityTransform(1.0, math.pi / 2), (1.0, 0.0), (0.0, 1.0)),
])
def test_local_map_to_map(t, pixel, expected):
    assert np.allclose(local_map_to_map(pixel, t), expected, atol=1e-12)


def test_local_map_to_map_rejects_nonpositive_scale():
    with pytest.raises(InvalidTransformError):
        SimilarityTransform(0.0)


# --- homography ---------------------------------------------------------


def test_homography_normalization_convention():
    h = Homography(-3.0 * np.eye(3))
    assert math.isclose(np.linalg.norm(h.matrix), 1.0)
    assert h.matrix[2, 2] > 0


def test_estimate_homography_identity():
    pts = [(0, 0), (1, 0), (0, 1), (1, 1)]
    h = estimate_homography([PointCorrespondence(p, p) for p in pts])
    assert np.allclose(h.matrix, np.eye(3) / math.sqrt(3.0), atol=1e-12)


def test_estimate_homography_recovers_synthetic_camera():
    cam = synthetic_camera(heading=0.4)
    ground = ground_grid(cam)
    h = estimate_homography(correspondences_for(cam, ground))
    assert np.max(np.abs(h.matrix - cam.homography().matrix)) < 1e-6
    assert np.max(reprojection_residuals(h, correspondences_for(cam, ground))) < 1e-8


def test_estimate_homography_errors():
    with pytest.raises(InsufficientDataError):
        estimate_homography([PointCorrespondence((0, 0), (0, 0))] * 3)
    collinear = [PointCorrespondence((float(i), 0.0), (float(i), 0.0)) for i in range(5)]
    with pytest.raises(DegenerateConfigurationError):
        estimate_homography(collinear)


def test_estimate_homography_noisy_ground_error():
    cam = synthetic_camera()
    ground = ground_grid(cam)  # 12 points, inside 50 m
    errs = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        h = estimate_homography(correspondences_for(cam, ground, rng.normal(0.0, 0.5, (len(ground), 2))))
        exact_px = cam.project(np.column_stack([ground, np.zeros(len(ground))]))
        errs.append(np.mean([np.linalg.norm(ipm_project(h, p) - g) for p, g in zip(exact_px, ground)]))
    assert np.mean(errs) < 0.2


def test_projection_path_drops_z_column():
    cam = synthetic_camera(heading=-0.8)
    rng = np.random.default_rng(3)
    # non-coplanar points in front of the camera: forward distance, lateral offset, height
    local = np.column_stack([rng.uniform(8, 40, 10), rng.uniform(-6, 6, 10), rng.uniform(0, 3, 10)])
    world = local @ rot_z(-0.8).T
    p = estimate_projection(cam.project(world), world)
    assert np.max(np.abs(projection_to_homography(p).matrix - cam.homography().matrix)) < 1e-6


def test_ipm_identity_and_principal_ray():
    assert np.allclose(ipm_project(Homography.identity(), (5, 7)), (5, 7))
    assert np.allclose(image_project(Homography.identity(), (5, 7)), (5, 7))
    cam = synthetic_camera()
    g = ipm_project(cam.homography(), cam.principal_point)
    # ray-plane oracle: the optical axis meets z = 0 at height / tan(pitch) ahead
    assert np.allclose(g, (6.0 / math.tan(math.radians(15.0)), 0.0), atol=1e-9)
    assert np.allclose(g, cam.ground_intersection(cam.principal_point), atol=1e-9)


def test_image_project_depth_ordering():
    h = synthetic_camera().homography()
    assert image_project(h, (100.0, 0.0))[1] < image_project(h, (50.0, 0.0))[1]


def test_horizon_singularity():
    cam = synthetic_camera()
    h = cam.homography()
    # pixel row of the horizon: f * tan(pitch) above the principal point
    horizon_v = cam.principal_point[1] - 1000.0 * math.tan(math.radians(15.0))
    with pytest.raises(HorizonSingularityError):
        ipm_project(h, (448.0, horizon_v))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000))
def test_ipm_round_trip_random_cameras(seed):
    rng = np.random.default_rng(seed)
    cam = PinholeCamera(rng.uniform(500, 2000), (448.0, 252.0), (rng.uniform(-20, 20), rng.uniform(-20, 20),
                        rng.uniform(3, 12)), rng.uniform(-math.pi, math.pi), math.radians(rng.uniform(8, 40)))
    h = cam.homography()
    for g in ground_grid(cam, forward=(8.0, 25.0, 60.0)):
        assert np.allclose(ipm_project(h, image_project(h, g)), g, atol=1e-9)


# --- estimator interface and file formats -------------------------------


def test_homography_estimator_fit_transform(tmp_path):
    cam = synthetic_camera()
    corr = correspondences_for(cam, ground_grid(cam))
    X = np.array([c.image_point for c in corr])
    y = np.array([c.ground_point for c in corr])
    est = HomographyEstimator().fit(X, y)
    assert np.allclose(est.transform(X), y, atol=1e-9)
    assert np.allclose(est.inverse_transform(y), X, atol=1e-6)
    assert est.score(X, y) > -1e-9
    assert est.get_params() == {"min_points": 4}
    path = tmp_path / "corr.csv"
    write_correspondences(path, corr)
    assert read_correspondences(path) == corr
    write_calibration_report(tmp_path / "cal.txt", est.homography_, corr)
    assert "rms_residual_px" in (tmp_path / "cal.txt").read_text()


# --- BEV IoU ------------------------------------------------------------


def test_iou_examples():
    a = OrientedBox((0.0, 0.0), 4.0, 2.0, 0.3)
    assert bev_iou(a, a) == pytest.approx(1.0, abs=1e-12)
    assert bev_iou(a, OrientedBox((10.0, 0.0), 4.0, 2.0, 0.0)) == 0.0
    sq = OrientedBox((0.0, 0.0), 2.0, 2.0)
    assert bev_iou(sq, OrientedBox((1.0, 0.0), 2.0, 2.0)) == pytest.approx(1.0 / 3.0, abs=1e-12)
    assert mc_iou(sq, OrientedBox((1.0, 0.0), 2.0, 2.0), 10**6, np.random.default_rng(0)) == pytest.approx(
        1.0 / 3.0, abs=0.01)


def test_corners_counterclockwise():
    from v2icoop.geometry import polygon_area

    box = OrientedBox((1.0, 2.0), 4.0, 2.0, 2.5)
    assert polygon_area(box.corners()) == pytest.approx(8.0)


def test_iou_matches_monte_carlo():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        a, b = random_box(rng), random_box(rng)
        worst = max(worst, abs(bev_iou(a, b) - mc_iou(a, b, 10**6, rng)))
    assert worst < 0.01


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_iou_symmetric_bounded_and_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = random_box(rng), random_box(rng)
    v = bev_iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(bev_iou(b, a), abs=1e-12)
    theta, t = rng.uniform(-math.pi, math.pi), rng.uniform(-100, 100, 2)
    r = rot_z(theta)[:2, :2]

    def move(box):
        c = r @ np.asarray(box.center) + t
        return OrientedBox(tuple(c), box.length, box.width, box.yaw + theta)

    assert bev_iou(move(a), move(b)) == pytest.approx(v, abs=1e-9)
