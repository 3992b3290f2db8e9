"""Rigid camera poses, pinhole projection and SE(3) trajectory interpolation.

Conventions, fixed once and enforced everywhere in the package:

* Poses are stored camera-to-world: ``rotation`` maps camera-frame vectors
  into the world frame and ``translation`` is the camera center in world
  coordinates.
* Right-handed coordinates. Camera frame: +x right, +y down (in the image),
  +z forward along the optical axis.
* World up is +y. Look-at rotations fall back to +x as the up hint when the
  viewing direction is within ~2.5 degrees of the pole.
* Pixel (u, v) = (fx * x/z + cx, fy * y/z + cy); depth is the camera-frame
  z coordinate, valid when z > Z_NEAR.
* Spherical coordinates (azimuth a, elevation e, radius r) map to the offset
  r * (cos e sin a, sin e, cos e cos a) from the reference center, so
  azimuth 0 / elevation 0 places the camera on the +z axis of the center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Z_NEAR = 1e-4
WORLD_UP = np.array([0.0, 1.0, 0.0])
_FALLBACK_UP = np.array([1.0, 0.0, 0.0])
_POLE_DOT = 0.999


class BehindCameraError(ValueError):
    """Raised when a point lies at or behind the near plane of a camera."""


def _as_vec3(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {np.shape(x)}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite")
    return v


# ---------------------------------------------------------------------------
# Rotation helpers (hand-rolled; scipy.spatial.transform serves as the
# independent oracle in the test suite and must not be used here).
# ---------------------------------------------------------------------------

def skew(w: np.ndarray) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def so3_exp(rotvec: np.ndarray) -> np.ndarray:
    """Rodrigues formula: rotation vector (axis * angle) to rotation matrix."""
    w = np.asarray(rotvec, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    wx = skew(w)
    if theta < 1e-8:
        # second-order Taylor expansion, error O(theta^3)
        return np.eye(3) + wx + 0.5 * (wx @ wx)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * wx + b * (wx @ wx)


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (x, y, z, w), w >= 0.

    Uses Shepperd's method (largest of the four squared components) so it is
    stable for all rotation angles including those near pi.
    """
    m = np.asarray(r, dtype=np.float64)
    t = np.trace(m)
    cand = np.array([m[0, 0], m[1, 1], m[2, 2], t])
    i = int(np.argmax(cand))
    if i == 3:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s,
                      0.25 * s])
    elif i == 0:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[2, 1] - m[1, 2]) / s])
    elif i == 1:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s,
                      (m[0, 2] - m[2, 0]) / s])
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s,
                      (m[1, 0] - m[0, 1]) / s])
    q /= np.linalg.norm(q)
    if q[3] < 0.0:
        q = -q
    return q


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (x, y, z, w) to rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=np.float64)
    n = x * x + y * y + z * z + w * w
    if n < 1e-12:
        raise ValueError("quaternion has near-zero norm")
    s = 2.0 / n
    return np.array([
        [1 - s * (y * y + z * z), s * (x * y - w * z), s * (x * z + w * y)],
        [s * (x * y + w * z), 1 - s * (x * x + z * z), s * (y * z - w * x)],
        [s * (x * z - w * y), s * (y * z + w * x), 1 - s * (x * x + y * y)],
    ])


def so3_log(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to rotation vector, robust for angles near 0 and pi."""
    q = rotmat_to_quat(r)
    vec, w = q[:3], q[3]
    s = float(np.linalg.norm(vec))
    if s < 1e-12:
        return np.zeros(3)
    angle = 2.0 * math.atan2(s, w)
    return vec * (angle / s)


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3) (closest in Frobenius norm)."""
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rigid transform: x_world = rotation @ x_cam + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3).copy()
        t = _as_vec3(self.translation, "translation").copy()
        err = np.max(np.abs(r.T @ r - np.eye(3)))
        if err > 1e-8 or np.linalg.det(r) < 0:
            raise ValueError(
                f"rotation is not orthonormal (|R^T R - I|_inf = {err:.3e}, "
                f"det = {np.linalg.det(r):.6f})")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous camera-to-world matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        p = np.asarray(points, dtype=np.float64)
        return (p - self.translation) @ self.rotation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width):
            raise ValueError(f"cx = {self.cx} outside [0, {self.width})")
        if not (0 <= self.cy < self.height):
            raise ValueError(f"cy = {self.cy} outside [0, {self.height})")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class SphericalCoord:
    """Azimuth/elevation (radians) and radius (meters) around a scene center."""

    azimuth: float
    elevation: float
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not (-math.pi / 2 < self.elevation < math.pi / 2):
            raise ValueError(f"elevation must lie in (-pi/2, pi/2), got {self.elevation}")

    def unit_offset(self) -> np.ndarray:
        ce = math.cos(self.elevation)
        return np.array([ce * math.sin(self.azimuth),
                         math.sin(self.elevation),
                         ce * math.cos(self.azimuth)])


@dataclass(frozen=True)
class Trajectory:
    """An ordered camera pose per frame."""

    poses: tuple

    def __post_init__(self):
        poses = tuple(self.poses)
        if len(poses) < 1:
            raise ValueError("trajectory needs at least one pose")
        for p in poses:
            if not isinstance(p, CameraPose):
                raise TypeError(f"trajectory entries must be CameraPose, got {type(p)}")
        object.__setattr__(self, "poses", poses)

    @property
    def frame_count(self) -> int:
        return len(self.poses)

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, i: int) -> CameraPose:
        return self.poses[i]


# ---------------------------------------------------------------------------
# Pose algebra
# ---------------------------------------------------------------------------

def pose_compose(a: CameraPose, b: CameraPose) -> CameraPose:
    """Rigid transform equal to applying b, then a."""
    return CameraPose(a.rotation @ b.rotation,
                      a.rotation @ b.translation + a.translation)


def pose_inverse(p: CameraPose) -> CameraPose:
    rt = p.rotation.T
    return CameraPose(rt, -(rt @ p.translation))


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def project(point, pose: CameraPose, k: PinholeIntrinsics) -> tuple:
    """Project a world point; returns ((u, v), depth).

    Raises BehindCameraError when the point is at or behind the near plane.
    """
    p = _as_vec3(point, "point")
    xc = pose.world_to_camera(p)
    z = xc[2]
    if z <= Z_NEAR:
        raise BehindCameraError(f"point at camera depth {z:.3e} <= z_near {Z_NEAR}")
    u = k.fx * xc[0] / z + k.cx
    v = k.fy * xc[1] / z + k.cy
    return np.array([u, v]), float(z)


def project_points(points: np.ndarray, pose: CameraPose, k: PinholeIntrinsics):
    """Vectorized projection of (N, 3) world points.

    Returns (uv (N, 2), depth (N,), in_front (N,) bool). Pixels of points
    behind the near plane are set to NaN instead of raising.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    xc = pose.world_to_camera(pts)
    z = xc[:, 2]
    in_front = z > Z_NEAR
    uv = np.full((len(pts), 2), np.nan)
    zi = np.where(in_front, z, 1.0)
    uv[:, 0] = np.where(in_front, k.fx * xc[:, 0] / zi + k.cx, np.nan)
    uv[:, 1] = np.where(in_front, k.fy * xc[:, 1] / zi + k.cy, np.nan)
    return uv, z, in_front


def backproject(pixel, depth: float, pose: CameraPose, k: PinholeIntrinsics) -> np.ndarray:
    """Lift pixel (u, v) at camera-frame depth z to a world point."""
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    xc = np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth])
    return pose.camera_to_world(xc)


def backproject_grid(depth: np.ndarray, pose: CameraPose, k: PinholeIntrinsics) -> np.ndarray:
    """Backproject a full (H, W) depth map to world points (H, W, 3).

    Entries with depth <= 0 are left at zero; mask them with depth > 0.
    """
    d = np.asarray(depth, dtype=np.float64)
    h, w = d.shape
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    ray_x = (u[None, :] - k.cx) / k.fx
    ray_y = (v[:, None] - k.cy) / k.fy
    dd = np.where(d > 0, d, 0.0)
    xc = np.stack([ray_x * dd, ray_y * dd, dd], axis=-1)
    return xc @ pose.rotation.T + pose.translation


# ---------------------------------------------------------------------------
# Spherical placement and look-at
# ---------------------------------------------------------------------------

def look_at(position, target, up=WORLD_UP) -> CameraPose:
    """Camera at `position` with the optical axis through `target`.

    Roll is resolved by the up hint; near the poles (|dot| > 0.999) the
    fallback +x hint keeps the basis well conditioned.
    """
    pos = _as_vec3(position, "position")
    tgt = _as_vec3(target, "target")
    fwd = tgt - pos
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("camera position coincides with the look-at target")
    zc = fwd / n
    hint = np.asarray(up, dtype=np.float64)
    if abs(float(np.dot(zc, hint))) > _POLE_DOT:
        hint = _FALLBACK_UP
    xc = np.cross(zc, hint)
    xc /= np.linalg.norm(xc)
    yc = np.cross(zc, xc)
    r = np.stack([xc, yc, zc], axis=1)
    return CameraPose(orthonormalize(r), pos)


def spherical_to_pose(s: SphericalCoord, center) -> CameraPose:
    """Place a camera on the sphere around `center`, looking at it."""
    c = _as_vec3(center, "center")
    pos = c + s.radius * s.unit_offset()
    return look_at(pos, c)


def pose_to_spherical(position, center) -> SphericalCoord:
    """Spherical coordinates of a camera position relative to `center`."""
    p = _as_vec3(position, "position") - _as_vec3(center, "center")
    r = float(np.linalg.norm(p))
    if r < 1e-12:
        raise ValueError("position coincides with the center")
    elevation = math.asin(np.clip(p[1] / r, -1.0, 1.0))
    azimuth = math.atan2(p[0], p[2])
    return SphericalCoord(azimuth=azimuth, elevation=elevation, radius=r)


# ---------------------------------------------------------------------------
# Trajectory interpolation
# ---------------------------------------------------------------------------

def _hermite_weights(u: float) -> tuple:
    u2 = u * u
    u3 = u2 * u
    return (2 * u3 - 3 * u2 + 1, u3 - 2 * u2 + u, -2 * u3 + 3 * u2, u3 - u2)


def interpolate_trajectory(controls, frame_count: int) -> Trajectory:
    """Cubic interpolation of four control poses to `frame_count` frames.

    Catmull-Rom spline with clamped ends, evaluated on the SE(3) manifold:
    translations are splined componentwise, rotations through per-segment
    logarithm maps relative to the segment start. The curve passes through
    all four controls (at parameters 0, 1/3, 2/3, 1) and every produced
    rotation is re-orthonormalized.
    """
    ctrls = list(controls)
    if len(ctrls) != 4:
        raise ValueError(f"expected exactly 4 control poses, got {len(ctrls)}")
    if frame_count < 2:
        raise ValueError(f"frame_count must be >= 2, got {frame_count}")

    ts = np.stack([c.translation for c in ctrls])
    rs = [np.asarray(c.rotation) for c in ctrls]

    # Per-segment relative rotation vectors and Catmull-Rom tangents. The
    # clamped ends behave like duplicated endpoint controls (d_-1 = d_3 = 0).
    d = [so3_log(rs[j].T @ rs[j + 1]) for j in range(3)]
    rot_tan = [0.5 * d[0],
               0.5 * (d[0] + d[1]),
               0.5 * (d[1] + d[2]),
               0.5 * d[2]]
    tr_tan = np.empty_like(ts)
    tr_tan[0] = 0.5 * (ts[1] - ts[0])
    tr_tan[1] = 0.5 * (ts[2] - ts[0])
    tr_tan[2] = 0.5 * (ts[3] - ts[1])
    tr_tan[3] = 0.5 * (ts[3] - ts[2])

    poses = []
    for i in range(frame_count):
        s = i / (frame_count - 1)
        x = min(s * 3.0, 3.0)
        j = min(int(x), 2)
        u = x - j
        h00, h10, h01, h11 = _hermite_weights(u)
        t = h00 * ts[j] + h10 * tr_tan[j] + h01 * ts[j + 1] + h11 * tr_tan[j + 1]
        rv = h10 * rot_tan[j] + h01 * d[j] + h11 * rot_tan[j + 1]
        r = orthonormalize(rs[j] @ so3_exp(rv))
        poses.append(CameraPose(r, t))
    return Trajectory(tuple(poses))
