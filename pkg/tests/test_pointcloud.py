from __future__ import annotations

import io

import numpy as np
import pytest
from plyfile import PlyData

from dualstream.depthcodec import ENV_PROFILE, SELF_PROFILE, decode_depth_m, encode_depth, quantization_bound
from dualstream.errors import CodecError, InvalidPointError
from dualstream.frames import ColorFrame, DepthFrame
from dualstream.geometry import Intrinsics, Pose, intrinsics_from_fov, unproject
from dualstream.pointcloud import (
    PointCloud, cloud_rmse, export_ply, hologram_grid, make_spatial_quad, reconstruct_hologram,
)
from dualstream.scenes import parse_scene

from conftest import random_pose, yaw


def plane_fit_rms(pts: np.ndarray) -> float:
    """Orthogonal-distance RMS to the least-squares plane (SVD oracle)."""
    centred = pts - pts.mean(axis=0)
    normal = np.linalg.svd(centred, full_matrices=False)[2][-1]
    return float(np.sqrt(np.mean((centred @ normal) ** 2)))


def _round_trip(depth: DepthFrame, params) -> np.ndarray:
    return decode_depth_m(encode_depth(depth, params), params)


class TestReconstruct:
    def test_all_invalid_is_empty(self, k_small):
        cloud = reconstruct_hologram(ColorFrame.filled(64, 48), DepthFrame(np.zeros((48, 64), np.uint16)),
                                     k_small, Pose())
        assert len(cloud) == 0

    def test_single_pixel_at_principal_point(self):
        k = Intrinsics(10.0, 10.0, 0.0, 0.0, 1, 1)
        cloud = reconstruct_hologram(ColorFrame.filled(1, 1, (9, 8, 7)), DepthFrame(np.array([[1000]], np.uint16)),
                                     k, Pose())
        np.testing.assert_array_equal(cloud.positions, [[0, 0, 1]])
        np.testing.assert_array_equal(cloud.colors, [[9, 8, 7]])

    def test_point_count_is_valid_pixels(self, k_small, rng):
        mm = rng.integers(0, 2000, (48, 64), dtype=np.uint16)
        mm[rng.random((48, 64)) < 0.3] = 0
        cloud = reconstruct_hologram(ColorFrame.filled(64, 48), DepthFrame(mm), k_small, Pose())
        assert len(cloud) == int((mm > 0).sum())

    def test_matches_unproject_and_pose(self, k_small, rng):
        mm = rng.integers(1, 2000, (48, 64), dtype=np.uint16)
        pose = random_pose(rng)
        cloud = reconstruct_hologram(ColorFrame.filled(64, 48), DepthFrame(mm), k_small, pose)
        for idx in rng.integers(0, 48 * 64, 20):
            v, u = divmod(int(idx), 64)
            want = pose.transform_point(unproject(u, v, mm[v, u] / 1000, k_small))
            np.testing.assert_allclose(cloud.positions[idx], want, atol=1e-12)

    def test_colours_follow_pixels(self, k_small, rng):
        color = ColorFrame(rng.integers(0, 256, (48, 64, 3), dtype=np.uint8))
        mm = np.full((48, 64), 500, np.uint16)
        mm[0, :10] = 0
        cloud = reconstruct_hologram(color, DepthFrame(mm), k_small, Pose())
        np.testing.assert_array_equal(cloud.colors, color.pixels[mm > 0])

    def test_dimension_mismatch(self, k_small):
        with pytest.raises(CodecError):
            reconstruct_hologram(ColorFrame.filled(64, 48), DepthFrame(np.ones((48, 63), np.uint16)), k_small, Pose())

    def test_flat_wall_is_planar(self, k_small):
        depth = parse_scene("wall:1.5").render(k_small)[1]
        z = _round_trip(depth, ENV_PROFILE)
        cloud = reconstruct_hologram(ColorFrame.filled(64, 48), z, k_small, Pose())
        assert np.ptp(cloud.positions[:, 2]) == 0.0
        assert plane_fit_rms(cloud.positions) <= quantization_bound(ENV_PROFILE)

    def test_tilted_wall_plane_fit(self, k_small):
        # plane z = 1.2 + 0.3 x, so depth varies across the row
        rx, _ = np.meshgrid((np.arange(64) - k_small.cx) / k_small.fx, np.arange(48))
        z = 1.2 / (1 - 0.3 * rx)
        decoded = _round_trip(DepthFrame.from_meters(z), ENV_PROFILE)
        cloud = reconstruct_hologram(ColorFrame.filled(64, 48), decoded, k_small, Pose())
        assert plane_fit_rms(cloud.positions) <= quantization_bound(ENV_PROFILE)

    def test_face_within_self_range(self, k_small):
        _, depth = parse_scene("face").render(k_small)
        z = _round_trip(depth, SELF_PROFILE)
        cloud = reconstruct_hologram(ColorFrame.filled(64, 48), z, k_small, Pose())
        assert len(cloud) > 0
        assert cloud.positions[:, 2].max() <= SELF_PROFILE.d_max
        assert np.abs(cloud.positions[:, 2].min() - 0.31) < 0.01

    def test_grid_matches_cloud(self, k_small, rng):
        mm = rng.integers(0, 2000, (48, 64), dtype=np.uint16)
        pose = random_pose(rng)
        grid, mask = hologram_grid(DepthFrame(mm), k_small, pose)
        cloud = reconstruct_hologram(ColorFrame.filled(64, 48), DepthFrame(mm), k_small, pose)
        np.testing.assert_allclose(grid[mask], cloud.positions, atol=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidPointError):
            PointCloud(np.array([[0, np.inf, 0]]), np.zeros((1, 3), np.uint8))


class TestSpatialQuad:
    def test_hfov_90_width(self):
        q = make_spatial_quad(Pose(), intrinsics_from_fov(90, 60, 640, 480), 1.0)
        assert q.width_m == pytest.approx(2.0)

    def test_identity_centre(self, k_vga):
        q = make_spatial_quad(Pose(), k_vga, 1.0)
        np.testing.assert_allclose(q.center, [0, 0, 1], atol=1e-15)
        np.testing.assert_allclose(q.normal, [0, 0, 1], atol=1e-15)

    def test_aspect_matches_texture(self):
        k = intrinsics_from_fov(69, 42, 640, 480)
        q = make_spatial_quad(Pose(), k, 2.0)
        assert q.width_m / q.height_m == pytest.approx((640 / k.fx) / (480 / k.fy))

    def test_coplanar(self, rng, k_vga):
        q = make_spatial_quad(random_pose(rng), k_vga, 1.7)
        assert plane_fit_rms(q.corners) <= 1e-6

    def test_yaw_rotates_corners(self, k_vga):
        base = make_spatial_quad(Pose(), k_vga, 1.0)
        turned = make_spatial_quad(yaw(90), k_vga, 1.0)
        np.testing.assert_allclose(turned.corners, yaw(90).transform_points(base.corners), atol=1e-12)
        np.testing.assert_allclose(turned.center, [1, 0, 0], atol=1e-12)

    @pytest.mark.parametrize("d", [0.0, -1.0])
    def test_bad_distance(self, k_vga, d):
        with pytest.raises(ValueError):
            make_spatial_quad(Pose(), k_vga, d)


class TestPly:
    def test_empty(self):
        data = export_ply(PointCloud.empty())
        assert b"element vertex 0\n" in data and data.endswith(b"end_header\n")
        assert len(PlyData.read(io.BytesIO(data))["vertex"].data) == 0

    def test_one_point(self):
        data = export_ply(PointCloud(np.array([[0.5, -1.25, 2.0]]), np.array([[1, 2, 3]], np.uint8)))
        assert data.decode().splitlines()[-1] == "0.5 -1.25 2 1 2 3"

    def test_third_party_reader(self, rng):
        pos = rng.uniform(-5, 5, (300, 3))
        col = rng.integers(0, 256, (300, 3), dtype=np.uint8)
        v = PlyData.read(io.BytesIO(export_ply(PointCloud(pos, col))))["vertex"].data
        np.testing.assert_array_equal(np.stack([v["x"], v["y"], v["z"]], 1), pos.astype(np.float32))
        np.testing.assert_array_equal(np.stack([v["red"], v["green"], v["blue"]], 1), col)


class TestRmse:
    def test_identical(self, rng):
        c = PointCloud(rng.normal(size=(50, 3)), np.zeros((50, 3), np.uint8))
        assert cloud_rmse(c, c) == 0.0

    def test_one_mm_offset(self, rng):
        p = rng.normal(size=(50, 3))
        a = PointCloud(p, np.zeros((50, 3), np.uint8))
        b = PointCloud(p + [0, 0, 0.001], np.zeros((50, 3), np.uint8))
        assert cloud_rmse(a, b) == pytest.approx(0.001, abs=1e-12)

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            cloud_rmse(PointCloud.empty(), PointCloud(np.zeros((1, 3)), np.zeros((1, 3), np.uint8)))

    def test_ramp_round_trip(self, k_small):
        _, depth = parse_scene("ramp:0.3:1.9").render(k_small)
        truth = depth.meters()
        decoded = _round_trip(depth, ENV_PROFILE)
        bound = quantization_bound(ENV_PROFILE)
        assert np.abs(decoded - truth).max() <= bound + 1e-12
        a = reconstruct_hologram(ColorFrame.filled(64, 48), truth, k_small, Pose())
        b = reconstruct_hologram(ColorFrame.filled(64, 48), decoded, k_small, Pose())
        assert cloud_rmse(a, b) <= bound
