"""Remote reconstruction: holograms, spatial video quads, PLY export, metrics."""

from __future__ import annotations

import functools
import io
from dataclasses import dataclass

import numpy as np

from .errors import CodecError, InvalidPointError
from .frames import ColorFrame, DepthFrame
from .geometry import Intrinsics, Pose, pixel_rays, quat_to_matrix

DEFAULT_QUAD_DISTANCE = 1.0


@dataclass(frozen=True, eq=False)
class PointCloud:
    positions: np.ndarray  # (N, 3) float64, metres
    colors: np.ndarray     # (N, 3) uint8

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        c = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        if len(p) != len(c):
            raise ValueError(f"{len(p)} positions but {len(c)} colours")
        if not np.isfinite(p).all():
            raise InvalidPointError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "colors", c)

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls) -> PointCloud:
        return cls(np.empty((0, 3)), np.empty((0, 3), np.uint8))

    @classmethod
    def concatenate(cls, clouds) -> PointCloud:
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        return cls(np.vstack([c.positions for c in clouds]), np.vstack([c.colors for c in clouds]))

    def transformed(self, pose: Pose) -> PointCloud:
        return PointCloud(pose.transform_points(self.positions), self.colors)


@functools.lru_cache(maxsize=16)
def _flat_rays(k: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    rx, ry = pixel_rays(k)
    rx = np.ascontiguousarray(rx).ravel()
    ry = np.ascontiguousarray(ry).ravel()
    rx.setflags(write=False)
    ry.setflags(write=False)
    return rx, ry


def _depth_meters(depth) -> np.ndarray:
    if isinstance(depth, DepthFrame):
        return depth.meters()
    return np.asarray(depth, dtype=np.float64)


def reconstruct_hologram(color: ColorFrame, depth: DepthFrame | np.ndarray,
                         k: Intrinsics, camera_pose: Pose) -> PointCloud:
    """One coloured point per valid depth pixel, placed by ``camera_pose``.

    ``depth`` is either a millimetre DepthFrame or an array of metres (as
    produced by :func:`dualstream.depthcodec.decode_depth_m`). Pixels with
    depth <= 0 are skipped.
    """
    z = _depth_meters(depth)
    if z.shape != (color.height, color.width) or z.shape != (k.height, k.width):
        raise CodecError(
            f"dimension mismatch: colour {color.width}x{color.height}, depth {z.shape[1]}x{z.shape[0]}, "
            f"intrinsics {k.width}x{k.height}")
    rx, ry = _flat_rays(k)
    z = z.ravel()
    idx = np.flatnonzero(z > 0)
    zz = np.take(z, idx)
    x = np.take(rx, idx)
    x *= zz
    y = np.take(ry, idx)
    y *= zz
    rot = quat_to_matrix(camera_pose.rotation)
    t = camera_pose.translation
    out = np.empty((3, len(idx)))
    for r in range(3):
        row = out[r]
        np.multiply(x, rot[r, 0], out=row)
        row += rot[r, 1] * y
        row += rot[r, 2] * zz
        row += t[r]
    colors = np.take(color.pixels.reshape(-1, 3), idx, axis=0)
    return PointCloud(out.T, colors)


def hologram_grid(depth, k: Intrinsics, camera_pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel positions (H, W, 3) and validity mask, for pixel-correspondence metrics."""
    z = _depth_meters(depth)
    rx, ry = pixel_rays(k)
    cam = np.stack([rx * z, ry * z, z], axis=-1)
    pts = camera_pose.transform_points(cam.reshape(-1, 3)).reshape(cam.shape)
    return pts, z > 0


@dataclass(frozen=True, eq=False)
class SpatialQuad:
    corners: np.ndarray  # (4, 3): top-left, top-right, bottom-right, bottom-left
    texture: ColorFrame | None = None

    @property
    def center(self) -> np.ndarray:
        return self.corners.mean(axis=0)

    @property
    def width_m(self) -> float:
        return float(np.linalg.norm(self.corners[1] - self.corners[0]))

    @property
    def height_m(self) -> float:
        return float(np.linalg.norm(self.corners[3] - self.corners[0]))

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.corners[1] - self.corners[0], self.corners[3] - self.corners[0])
        return n / np.linalg.norm(n)


def make_spatial_quad(peer_pose: Pose, k: Intrinsics, distance: float = DEFAULT_QUAD_DISTANCE,
                      texture: ColorFrame | None = None) -> SpatialQuad:
    """Video rectangle on the peer's forward axis, sized to the camera's field of view."""
    if not distance > 0:
        raise ValueError(f"quad distance must be positive, got {distance}")
    hw = distance * (k.width / 2) / k.fx
    hh = distance * (k.height / 2) / k.fy
    local = np.array([[-hw, -hh, distance], [hw, -hh, distance], [hw, hh, distance], [-hw, hh, distance]])
    return SpatialQuad(peer_pose.transform_points(local), texture)


def export_ply(c: PointCloud) -> bytes:
    """ASCII PLY with float x/y/z and uchar red/green/blue."""
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(c)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    buf = io.BytesIO()
    buf.write(header.encode("ascii"))
    if len(c):
        # %.9g round-trips float32 exactly
        rows = np.hstack([c.positions.astype(np.float32).astype(np.float64), c.colors.astype(np.float64)])
        np.savetxt(buf, rows, fmt="%.9g %.9g %.9g %d %d %d")
    return buf.getvalue()


def cloud_rmse(a: PointCloud, b: PointCloud) -> float:
    """RMS distance between corresponding points (same pixel grid order)."""
    if len(a) != len(b):
        raise ValueError(f"point count mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        return 0.0
    d2 = ((a.positions - b.positions) ** 2).sum(axis=1)
    return float(np.sqrt(d2.mean()))
