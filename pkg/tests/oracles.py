"""Independent oracle implementations used by the tests.

Everything here deliberately avoids the library's fast code paths: renders
sort every point per pixel, occlusion is checked point by point, rotations
go through scipy, and ray intersections are re-derived scalar formulas.
"""

import math

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from nvs_forge.camera import Z_NEAR


def pose_matmul_oracle(a, b) -> np.ndarray:
    """Compose two poses as plain 4x4 homogeneous matrix product."""
    ma = np.eye(4)
    ma[:3, :3] = a.rotation
    ma[:3, 3] = a.translation
    mb = np.eye(4)
    mb[:3, :3] = b.rotation
    mb[:3, 3] = b.translation
    return ma @ mb


def geodesic_midpoint_oracle(a, b):
    """Midpoint of the two-pose geodesic: scipy Slerp rotation, linear
    translation (the product-manifold geodesic the spline must match)."""
    slerp = Slerp([0.0, 1.0], Rotation.from_matrix([a.rotation, b.rotation]))
    return slerp(0.5).as_matrix(), 0.5 * (a.translation + b.translation)


def rotation_angle(r) -> float:
    return float(np.linalg.norm(Rotation.from_matrix(r).as_rotvec()))


# ---------------------------------------------------------------------------
# Rendering / co-visibility oracles
# ---------------------------------------------------------------------------

def project_oracle(point, pose, k):
    """Scalar pinhole projection; returns (u, v, depth) or None if behind."""
    xc = pose.rotation.T @ (np.asarray(point, dtype=np.float64) - pose.translation)
    if xc[2] <= Z_NEAR:
        return None
    return (k.fx * xc[0] / xc[2] + k.cx, k.fy * xc[1] / xc[2] + k.cy, xc[2])


def brute_force_render(frame_points, pose, k, splat_radius=1):
    """Per-pixel sort render: collect every splat candidate per pixel and pick
    min (depth, index). Returns (color, depth, hit_index)."""
    h, w = k.height, k.width
    buckets = {}
    for i in range(frame_points.count):
        pr = project_oracle(frame_points.positions[i], pose, k)
        if pr is None:
            continue
        u, v, z = pr
        iu, iv = int(np.rint(u)), int(np.rint(v))
        for du in range(-splat_radius, splat_radius + 1):
            for dv in range(-splat_radius, splat_radius + 1):
                uu, vv = iu + du, iv + dv
                if 0 <= uu < w and 0 <= vv < h:
                    buckets.setdefault((vv, uu), []).append((z, i))
    color = np.zeros((h, w, 3), dtype=np.float32)
    depth = np.zeros((h, w), dtype=np.float64)
    hit = np.full((h, w), -1, dtype=np.int64)
    for (vv, uu), cands in buckets.items():
        cands.sort()
        z, i = cands[0]
        color[vv, uu] = frame_points.colors[i]
        depth[vv, uu] = z
        hit[vv, uu] = i
    return color, depth, hit


def exhaustive_covisibility(cloud, src_traj, novel_traj, k, depth_tol=0.01,
                            splat_radius=0):
    """Point-by-point projection + occlusion oracle for the co-visibility mask."""
    t_count = cloud.frame_count
    h, w = k.height, k.width
    mask = np.zeros((t_count, h, w), dtype=bool)
    for t in range(t_count):
        fp = cloud.frames[t]
        pose = novel_traj[t]
        # z-buffer from scratch via the brute-force renderer
        _, zbuf, _ = brute_force_render(fp, pose, k, splat_radius)
        for i in range(fp.count):
            pr = project_oracle(fp.positions[i], pose, k)
            if pr is None:
                continue
            u, v, z = pr
            iu, iv = int(np.rint(u)), int(np.rint(v))
            if not (0 <= iu < w and 0 <= iv < h):
                continue
            if zbuf[iv, iu] > 0 and z <= zbuf[iv, iu] * (1.0 + depth_tol):
                su, sv = fp.source_pixel[i]
                mask[t, sv, su] = True
    return mask


# ---------------------------------------------------------------------------
# Ray-intersection oracle (scalar, re-derived)
# ---------------------------------------------------------------------------

def ray_depth_oracle(spec, pose, k, u, v, time_s, checker_phase, dyn_phases):
    """Depth at pixel (u, v) by scalar ray casting against every primitive."""
    from nvs_forge.scenes import Box, Sphere, _object_center

    d_cam = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
    d = pose.rotation @ d_cam
    o = pose.translation
    center = np.asarray(spec.look_center, dtype=np.float64)

    best = math.inf

    # dome (from inside, far root)
    oc = o - center
    a = float(d @ d)
    b = 2.0 * float(oc @ d)
    c = float(oc @ oc) - spec.dome_radius ** 2
    disc = b * b - 4 * a * c
    if disc >= 0:
        for root in ((-b - math.sqrt(disc)) / (2 * a), (-b + math.sqrt(disc)) / (2 * a)):
            if root > 1e-9:
                best = min(best, root)
                break

    if spec.ground is not None and abs(d[1]) > 1e-12:
        t_pl = (spec.ground.height - o[1]) / d[1]
        if t_pl > 1e-9:
            hx, hz = o[0] + t_pl * d[0], o[2] + t_pl * d[2]
            if abs(hx) <= spec.ground.extent and abs(hz) <= spec.ground.extent:
                best = min(best, t_pl)

    def box_t(lo, hi):
        t0, t1 = -math.inf, math.inf
        for ax in range(3):
            if abs(d[ax]) < 1e-15:
                if not (lo[ax] <= o[ax] <= hi[ax]):
                    return math.inf
                continue
            ta = (lo[ax] - o[ax]) / d[ax]
            tb = (hi[ax] - o[ax]) / d[ax]
            t0 = max(t0, min(ta, tb))
            t1 = min(t1, max(ta, tb))
        if t1 < t0 or t1 <= 1e-9:
            return math.inf
        return t0 if t0 > 1e-9 else t1

    def sphere_t(c0, r):
        oc0 = o - c0
        bq = 2.0 * float(oc0 @ d)
        cq = float(oc0 @ oc0) - r * r
        disc0 = bq * bq - 4 * a * cq
        if disc0 < 0:
            return math.inf
        for root in ((-bq - math.sqrt(disc0)) / (2 * a), (-bq + math.sqrt(disc0)) / (2 * a)):
            if root > 1e-9:
                return root
        return math.inf

    for obj in spec.statics:
        oc_ = np.asarray(obj.center, dtype=np.float64)
        if isinstance(obj, Box):
            half = 0.5 * np.asarray(obj.size)
            best = min(best, box_t(oc_ - half, oc_ + half))
        else:
            best = min(best, sphere_t(oc_, obj.radius))

    for obj, phase in zip(spec.dynamics, dyn_phases):
        oc_ = _object_center(obj, time_s, phase)
        if isinstance(obj, Box):
            half = 0.5 * np.asarray(obj.size)
            best = min(best, box_t(oc_ - half, oc_ + half))
        else:
            best = min(best, sphere_t(oc_, obj.radius))

    return 0.0 if math.isinf(best) else best
