"""Rigid poses, the shared anchor frame and pinhole camera math.

Conventions (see docs/coordinate-frames.md):

* right-handed frames, camera looks down +Z, +X right, +Y down (image rows);
* quaternions are unit (w, x, y, z);
* a Pose maps points from its own frame into the parent frame:
  ``p_parent = R @ p_child + t``;
* angles are degrees at API boundaries, radians internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidPointError

Vec3 = tuple[float, float, float]
Quat = tuple[float, float, float, float]

_IDENTITY_Q: Quat = (1.0, 0.0, 0.0, 0.0)


def _normalize_quat(q) -> Quat:
    w, x, y, z = (float(c) for c in q)
    n2 = w * w + x * x + y * y + z * z
    if n2 == 0.0 or not math.isfinite(n2):
        raise ValueError(f"quaternion {q!r} cannot be normalized")
    # already-unit input is kept bit-identical so wire round trips are exact
    if abs(n2 - 1.0) > 1e-14:
        n = math.sqrt(n2)
        w, x, y, z = w / n, x / n, y / n, z / n
    # Canonical hemisphere so equal rotations compare equal.
    if w < 0 or (w == 0 and (x, y, z) < (0.0, 0.0, 0.0)):
        w, x, y, z = -w, -x, -y, -z
    return (w, x, y, z)


def quat_multiply(a: Quat, b: Quat) -> Quat:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def quat_to_matrix(q: Quat) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_axis_angle(axis, angle_deg: float) -> Quat:
    ax = np.asarray(axis, dtype=float)
    ax = ax / np.linalg.norm(ax)
    half = math.radians(angle_deg) / 2.0
    s = math.sin(half)
    return _normalize_quat((math.cos(half), ax[0] * s, ax[1] * s, ax[2] * s))


def _rotate(q: Quat, v) -> Vec3:
    # v' = v + 2w (u x v) + 2 u x (u x v), u = (x, y, z)
    w, x, y, z = q
    vx, vy, vz = v
    cx = y * vz - z * vy
    cy = z * vx - x * vz
    cz = x * vy - y * vx
    return (
        vx + 2 * (w * cx + y * cz - z * cy),
        vy + 2 * (w * cy + z * cx - x * cz),
        vz + 2 * (w * cz + x * cy - y * cx),
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform: translation in metres, rotation as unit quaternion (w, x, y, z)."""

    translation: Vec3 = (0.0, 0.0, 0.0)
    rotation: Quat = _IDENTITY_Q

    def __post_init__(self):
        t = tuple(float(c) for c in self.translation)
        if len(t) != 3 or not all(math.isfinite(c) for c in t):
            raise ValueError(f"bad translation {self.translation!r}")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", _normalize_quat(self.rotation))

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> Pose:
        return cls((x, y, z))

    @classmethod
    def from_matrix(cls, m) -> Pose:
        m = np.asarray(m, dtype=float)
        return cls(tuple(m[:3, 3]), _matrix_to_quat(m[:3, :3]))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    def transform_point(self, p) -> np.ndarray:
        return np.asarray(_rotate(self.rotation, p)) + self.translation

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return pts @ quat_to_matrix(self.rotation).T + np.asarray(self.translation)

    def rotate_vector(self, v) -> np.ndarray:
        return np.asarray(_rotate(self.rotation, v))

    def as_tuple(self) -> tuple[float, ...]:
        return self.translation + self.rotation

    def allclose(self, other: Pose, tol: float = 1e-6) -> bool:
        dt = max(abs(a - b) for a, b in zip(self.translation, other.translation))
        # q and -q are the same rotation
        dot = abs(sum(a * b for a, b in zip(self.rotation, other.rotation)))
        return dt <= tol and 1.0 - dot <= tol


def _matrix_to_quat(r: np.ndarray) -> Quat:
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0:
        s = 0.5 / math.sqrt(tr + 1.0)
        q = (0.25 / s, (r[2, 1] - r[1, 2]) * s, (r[0, 2] - r[2, 0]) * s, (r[1, 0] - r[0, 1]) * s)
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = ((r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s)
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = ((r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s)
    else:
        s = 2.0 * math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = ((r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s)
    return _normalize_quat(q)


def compose(a: Pose, b: Pose) -> Pose:
    """Return a∘b: apply b first, then a."""
    t = _rotate(a.rotation, b.translation)
    return Pose(
        (t[0] + a.translation[0], t[1] + a.translation[1], t[2] + a.translation[2]),
        quat_multiply(a.rotation, b.rotation),
    )


def invert(a: Pose) -> Pose:
    w, x, y, z = a.rotation
    conj = (w, -x, -y, -z)
    t = _rotate(conj, a.translation)
    return Pose((-t[0], -t[1], -t[2]), conj)


@dataclass(frozen=True)
class AnchorFrame:
    """Pose of the shared anchor object in one peer's local tracking frame."""

    local_anchor_pose: Pose = field(default_factory=Pose)


def to_anchor_frame(device_pose_local: Pose, anchor: AnchorFrame) -> Pose:
    """Express a local device pose relative to the anchor (the wire form)."""
    return compose(invert(anchor.local_anchor_pose), device_pose_local)


def from_anchor_frame(pose_anchor_rel: Pose, anchor: AnchorFrame) -> Pose:
    return compose(anchor.local_anchor_pose, pose_anchor_rel)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera model; all values in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"bad image size {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError(f"principal point ({self.cx}, {self.cy}) outside image")

    @property
    def hfov_deg(self) -> float:
        return math.degrees(2 * math.atan((self.width / 2) / self.fx))

    @property
    def vfov_deg(self) -> float:
        return math.degrees(2 * math.atan((self.height / 2) / self.fy))

    def scaled(self, width: int, height: int) -> Intrinsics:
        sx, sy = width / self.width, height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


def intrinsics_from_fov(hfov: float, vfov: float, width: int, height: int) -> Intrinsics:
    """Centered pinhole intrinsics from horizontal/vertical FOV in degrees."""
    for name, fov in (("hfov", hfov), ("vfov", vfov)):
        if not 0 < fov < 180:
            raise ConfigError(f"{name} must be in (0, 180) degrees, got {fov}")
    fx = (width / 2) / math.tan(math.radians(hfov) / 2)
    fy = (height / 2) / math.tan(math.radians(vfov) / 2)
    return Intrinsics(fx, fy, width / 2, height / 2, width, height)


def unproject(u: float, v: float, depth: float, k: Intrinsics) -> np.ndarray:
    """Back-project pixel (u, v) at metric depth into the camera frame."""
    if not depth > 0:
        raise InvalidPointError(f"depth must be positive, got {depth}")
    if not (0 <= u < k.width and 0 <= v < k.height):
        raise InvalidPointError(f"pixel ({u}, {v}) outside {k.width}x{k.height}")
    return np.array([(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth])


def project(p, k: Intrinsics) -> tuple[float, float]:
    x, y, z = (float(c) for c in p)
    if not z > 0:
        raise InvalidPointError(f"point behind camera (z={z})")
    return (k.fx * x / z + k.cx, k.fy * y / z + k.cy)


def pixel_rays(k: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel (x/z, y/z) ray slopes, shape (height, width) each."""
    u = (np.arange(k.width, dtype=float) - k.cx) / k.fx
    v = (np.arange(k.height, dtype=float) - k.cy) / k.fy
    return np.broadcast_to(u, (k.height, k.width)), np.broadcast_to(v[:, None], (k.height, k.width))
