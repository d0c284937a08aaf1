import logging

import numpy as np
import pytest

import geometry_fixtures as geo
from rgbdseg import hha


def unmap(bytes_, lo, hi):
    return bytes_.astype(np.float64) / 255.0 * (hi - lo) + lo


def test_backproject_optical_axis():
    d = hha.DepthImage(np.full((5, 5), 2.0), fx=2.0, fy=2.0, cx=2.0, cy=2.0)
    points, valid = hha.backproject(d)
    assert valid.all()
    assert np.allclose(points[2, 2], [0.0, 0.0, 2.0])


def test_backproject_one_focal_off_axis():
    # u = cx + fx at depth 2 gives X = 2
    d = hha.DepthImage(np.full((5, 5), 2.0), fx=2.0, fy=2.0, cx=2.0, cy=2.0)
    points, _ = hha.backproject(d)
    assert points[2, 4, 0] == pytest.approx(2.0)


def test_backproject_marks_invalid():
    depth = np.full((4, 4), 1.0)
    depth[1, 2] = 0.0
    d = hha.DepthImage(depth, *hha.default_intrinsics(4, 4))
    points, valid = hha.backproject(d)
    assert not valid[1, 2] and valid.sum() == 15
    assert np.array_equal(points[1, 2], [0.0, 0.0, 0.0])


def test_depth_image_validation():
    with pytest.raises(ValueError):
        hha.DepthImage(np.full((4, 4), -1.0), 10, 10, 2, 2)
    with pytest.raises(ValueError):
        hha.DepthImage(np.ones((4, 4)), 0.0, 10, 2, 2)


def test_normals_fronto_plane_point_at_camera():
    d = geo.wall_scene(32, distance=2.0)
    points, valid = hha.backproject(d)
    normals, ok = hha.estimate_normals(points, valid)
    interior = ok[4:-4, 4:-4]
    assert interior.all()
    assert np.allclose(normals[4:-4, 4:-4], [0.0, 0.0, -1.0], atol=1e-6)


@pytest.mark.parametrize("raw_normal", [(0.0, 1.0, 0.0), (0.3, 0.8, -0.2), (-0.4, 0.9, 0.1)])
def test_normals_recovered_within_one_degree(raw_normal):
    n0 = np.array(raw_normal) / np.linalg.norm(raw_normal)
    d = geo.plane_scene(48, n0, offset=2.0)
    points, valid = hha.backproject(d)
    normals, ok = hha.estimate_normals(points, valid)
    inner = np.zeros_like(ok)
    inner[6:-6, 6:-6] = True
    sel = ok & inner & valid
    assert sel.sum() > 100
    cos = np.abs(normals[sel] @ n0)  # orientation-free comparison
    angles = np.degrees(np.arccos(np.clip(cos, -1, 1)))
    assert angles.max() < 1.0


def test_normals_all_invalid_neighborhood():
    depth = np.zeros((8, 8))
    d = hha.DepthImage(depth, *hha.default_intrinsics(8, 8))
    points, valid = hha.backproject(d)
    normals, ok = hha.estimate_normals(points, valid)
    assert not ok.any()
    assert np.array_equal(normals, np.zeros((8, 8, 3)))


def test_gravity_from_floor_plane():
    d = geo.floor_scene(48, cam_height=1.5)
    points, valid = hha.backproject(d)
    normals, ok = hha.estimate_normals(points, valid)
    g = hha.estimate_gravity(normals, ok)
    angle = np.degrees(np.arccos(np.clip(abs(g @ np.array([0, 1.0, 0])), -1, 1)))
    assert angle < 1.0


def test_gravity_room_scene_within_two_degrees():
    d = geo.room_scene(64)
    points, valid = hha.backproject(d)
    normals, ok = hha.estimate_normals(points, valid)
    g = hha.estimate_gravity(normals, ok)
    angle = np.degrees(np.arccos(np.clip(abs(g @ np.array([0, 1.0, 0])), -1, 1)))
    assert angle < 2.0


def test_gravity_fallback_on_empty_field(caplog):
    with caplog.at_level(logging.WARNING):
        g = hha.estimate_gravity(np.zeros((4, 4, 3)), np.zeros((4, 4), bool))
    assert np.array_equal(g, [0.0, 1.0, 0.0])
    assert any("falling back" in rec.message for rec in caplog.records)


def test_encode_wall_disparity_constant_and_exact():
    d = geo.wall_scene(32, distance=2.0)
    img = hha.encode_hha(d)
    disparity_bytes = img.data[0]
    assert disparity_bytes.min() == disparity_bytes.max()
    got = unmap(disparity_bytes[0, 0:1], 1 / hha.DEPTH_MAX, 1 / hha.DEPTH_MIN)[0]
    step = (1 / hha.DEPTH_MIN - 1 / hha.DEPTH_MAX) / 255.0
    assert abs(got - 0.5) <= step / 2 + 1e-12


def test_encode_floor_reference_plane():
    d = geo.floor_scene(48, cam_height=1.5)
    img = hha.encode_hha(d)
    valid = d.depth > 0
    inner = np.zeros_like(valid)
    inner[6:-6, 6:-6] = True
    sel = valid & inner
    assert img.data[2][sel].max() <= 2   # angle(normal, up) ~ 0 degrees
    assert img.data[1][sel].max() <= 1   # height above own floor ~ 0


def test_encode_step_scene_height_difference():
    d, masks, step = geo.step_scene(64)
    img = hha.encode_hha(d)
    heights = unmap(img.data[1], 0.0, hha.HEIGHT_MAX)
    floor_h = heights[masks["floor"]].mean()
    plat_h = heights[masks["platform"]].mean()
    assert plat_h - floor_h == pytest.approx(step, rel=0.02)


def test_encode_invalid_pixels_fill_zero():
    depth = np.full((16, 16), 2.0)
    depth[3:5, 3:9] = 0.0
    d = hha.DepthImage(depth, *hha.default_intrinsics(16, 16))
    img = hha.encode_hha(d)
    assert (img.data[:, 3:5, 3:9] == 0).all()


def test_encode_total_range_and_determinism():
    d = geo.room_scene(48)
    a = hha.encode_hha(d)
    b = hha.encode_hha(d)
    assert np.array_equal(a.data, b.data)
    assert a.data.dtype == np.uint8
    assert a.to_unit_range().max() <= 1.0
    assert np.isfinite(a.to_unit_range()).all()


def test_encode_clamps_out_of_range_depth():
    depth = np.full((24, 24), 30.0)  # beyond the 20 m clamp
    depth[0, 0] = 0.05               # below the 0.1 m clamp
    d = hha.DepthImage(depth, *hha.default_intrinsics(24, 24))
    img = hha.encode_hha(d)
    assert img.data[0, 5, 5] == 0                      # disparity at far clamp
    assert img.data[0, 0, 0] == 255                    # near clamp saturates
