import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synthdet.geometry import (
    BBox2D,
    BehindCameraError,
    Box3D,
    Pose,
    clip_bbox,
    make_camera,
    pose_to_transform,
    project_box3d,
    project_point,
)


@pytest.mark.parametrize(
    "focal,sensor,size,expected",
    [(35, 32, 64, 70.0), (32, 32, 64, 64.0), (35, 32, 256, 280.0)],
)
def test_focal_px(focal, sensor, size, expected):
    assert make_camera(focal, sensor, size).focal_px == pytest.approx(expected)


@pytest.mark.parametrize("args", [(-1, 32, 64), (35, 0, 64), (35, 32, 4)])
def test_camera_validation(args):
    with pytest.raises(ValueError):
        make_camera(*args)


def test_pose_wraps_azimuth_and_checks_depth():
    assert Pose(2 * math.pi + 0.5, 0, 1).azimuth == pytest.approx(0.5)
    assert Pose(-0.5, 0, 1).azimuth == pytest.approx(2 * math.pi - 0.5)
    with pytest.raises(ValueError):
        Pose(0.0, 0.0, 0.0)


def test_identity_rotation_is_pure_translation():
    t = pose_to_transform(Pose(0.0, 0.0, 5.0))
    pts = np.random.default_rng(0).normal(size=(10, 3))
    np.testing.assert_array_equal(t.apply(pts), pts + np.array([0.0, 0.0, 5.0]))


def test_azimuth_pi_is_180_yaw():
    t = pose_to_transform(Pose(math.pi, 0.0, 5.0))
    out = t.apply(np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(out, [-1.0, 2.0, 2.0], atol=1e-12)


def test_right_handed_y_up_convention():
    # azimuth pi/2 sends +x to -z before translation
    rot = pose_to_transform(Pose(math.pi / 2, 0.0, 1.0)).rotation
    np.testing.assert_allclose(rot @ np.array([1.0, 0.0, 0.0]), [0.0, 0.0, -1.0],
                               atol=1e-12)


def test_project_point_center_and_offset():
    cam = make_camera(35, 32, 64)
    assert project_point(cam, (0, 0, 7.0)) == pytest.approx((32.0, 32.0))
    assert project_point(cam, (1, 0, 10.0)) == pytest.approx((39.0, 32.0))
    with pytest.raises(BehindCameraError):
        project_point(cam, (0, 0, 0.0))


def test_project_box3d_symmetric_on_axis():
    cam = make_camera(35, 32, 64)
    bbox = project_box3d(cam, Pose(0.0, 0.0, 8.0), Box3D((1.0, 1.0, 1.0)))
    assert bbox.x_min + bbox.x_max == pytest.approx(64.0)
    assert bbox.y_min + bbox.y_max == pytest.approx(64.0)


def test_project_box3d_depth_shrinks_box():
    cam = make_camera(35, 32, 64)
    box = Box3D((0.5, 0.7, 1.0))
    near = project_box3d(cam, Pose(0.3, 0.0, 5.0), box)
    far = project_box3d(cam, Pose(0.3, 0.0, 10.0), box)
    assert far.width <= near.width
    assert far.area <= near.area


def test_project_box3d_behind_camera():
    cam = make_camera(35, 32, 64)
    with pytest.raises(BehindCameraError):
        project_box3d(cam, Pose(0.0, 0.0, 0.5), Box3D((1.0, 1.0, 1.0)))


@settings(max_examples=200, deadline=None)
@given(
    azimuth=st.floats(0, 2 * math.pi - 1e-9),
    x=st.floats(-2, 2),
    depth=st.floats(3, 20),
    hx=st.floats(0.1, 1.5),
    hy=st.floats(0.1, 1.5),
    hz=st.floats(0.1, 1.5),
)
def test_project_box3d_matches_corner_oracle(azimuth, x, depth, hx, hy, hz):
    cam = make_camera(35, 32, 64)
    pose = Pose(azimuth, x, depth)
    box = Box3D((hx, hy, hz))
    bbox = project_box3d(cam, pose, box)
    corners = pose_to_transform(pose).apply(box.corners())
    projected = [project_point(cam, c) for c in corners]
    us = [p[0] for p in projected]
    vs = [p[1] for p in projected]
    assert bbox.x_min == pytest.approx(min(us))
    assert bbox.x_max == pytest.approx(max(us))
    assert bbox.y_min == pytest.approx(min(vs))
    assert bbox.y_max == pytest.approx(max(vs))
    # the hull contains every corner
    for u, v in projected:
        assert bbox.x_min - 1e-9 <= u <= bbox.x_max + 1e-9
        assert bbox.y_min - 1e-9 <= v <= bbox.y_max + 1e-9


def test_x_translation_moves_box_right():
    cam = make_camera(35, 32, 64)
    box = Box3D((0.5, 0.7, 1.0))
    prev = project_box3d(cam, Pose(1.0, -1.0, 8.0), box)
    for x in (-0.5, 0.0, 0.5, 1.0):
        cur = project_box3d(cam, Pose(1.0, x, 8.0), box)
        assert cur.x_min > prev.x_min
        assert cur.x_max > prev.x_max
        prev = cur


def test_clip_bbox():
    assert clip_bbox(BBox2D(5, 5, 20, 20), 64) == BBox2D(5, 5, 20, 20)
    assert clip_bbox(BBox2D(70, 70, 90, 90), 64) is None
    assert clip_bbox(BBox2D(-10, -10, 10, 10), 64) == BBox2D(0, 0, 10, 10)
    # below the minimum usable area
    assert clip_bbox(BBox2D(-10, -10, 1.5, 1.5), 64) is None
    # rectangular image support
    assert clip_bbox(BBox2D(-5, -5, 100, 100), (32, 64)) == BBox2D(0, 0, 32, 64)
