"""Dynamic point clouds, z-buffered point splatting and co-visibility masks.

The rendering primitive is a square splat of configurable pixel radius with
nearest-depth-wins semantics; depth ties resolve to the lower point index so
renders are bit-identical regardless of evaluation order. Depth value 0 means
"no measurement" in every depth map handled here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nvs_forge.camera import (
    CameraPose,
    PinholeIntrinsics,
    Trajectory,
    backproject_grid,
    project_points,
)
from nvs_forge.clips import VideoClip

NO_HIT = -1


@dataclass
class FramePoints:
    """One frame of a dynamic point cloud.

    positions: (N, 3) world-frame meters; colors: (N, 3) RGB in [0, 1];
    source_pixel: (N, 2) integer (u, v) each point was backprojected from;
    is_dynamic: (N,) bool. `source_frame` records the frame a point was
    lifted from, which for stacked backgrounds may differ from the frame the
    point is attached to.
    """

    positions: np.ndarray
    colors: np.ndarray
    source_pixel: np.ndarray
    is_dynamic: np.ndarray
    source_frame: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.colors = np.asarray(self.colors, dtype=np.float32).reshape(-1, 3)
        self.source_pixel = np.asarray(self.source_pixel, dtype=np.int64).reshape(-1, 2)
        self.is_dynamic = np.asarray(self.is_dynamic, dtype=bool).reshape(-1)
        if self.source_frame is None:
            self.source_frame = np.zeros(n, dtype=np.int64)
        else:
            self.source_frame = np.asarray(self.source_frame, dtype=np.int64).reshape(-1)
        lengths = {n, len(self.colors), len(self.source_pixel),
                   len(self.is_dynamic), len(self.source_frame)}
        if len(lengths) != 1:
            raise ValueError(f"per-point arrays disagree in length: {sorted(lengths)}")
        if n and not np.all(np.isfinite(self.positions)):
            raise ValueError("point positions must be finite")

    @property
    def count(self) -> int:
        return len(self.positions)

    @staticmethod
    def empty() -> "FramePoints":
        return FramePoints(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2)),
                           np.zeros(0, dtype=bool))


@dataclass
class DynamicPointCloud:
    """Per-frame colored 3D point sets of an evolving scene."""

    frames: list

    def __post_init__(self):
        self.frames = list(self.frames)
        for f in self.frames:
            if not isinstance(f, FramePoints):
                raise TypeError(f"cloud frames must be FramePoints, got {type(f)}")

    @property
    def frame_count(self) -> int:
        return len(self.frames)


@dataclass
class RenderedFrame:
    """Output of the point renderer for one frame.

    color (H, W, 3); depth (H, W) with 0 = empty; hit_index (H, W) index of
    the winning point or NO_HIT; coverage (H, W) bool, equivalent to
    depth > 0 and hit_index >= 0.
    """

    color: np.ndarray
    depth: np.ndarray
    hit_index: np.ndarray
    coverage: np.ndarray


@dataclass
class CovisibilityMask:
    """T x H x W boolean over source-view pixels.

    True marks pixels whose 3D point stays visible (in-frustum, in front of
    the camera and unoccluded) from the paired novel trajectory.
    """

    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 3:
            raise ValueError(f"mask must be (T, H, W), got {m.shape}")
        self.mask = m

    @property
    def frame_count(self) -> int:
        return self.mask.shape[0]


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------

def reconstruct_from_rgbd(frames: VideoClip, depths: np.ndarray, traj: Trajectory,
                          k: PinholeIntrinsics, dynamic_masks: np.ndarray | None = None,
                          ) -> DynamicPointCloud:
    """Lift posed RGB-D video to one world-frame point per valid depth pixel.

    depths: (T, H, W) meters, 0 = invalid. dynamic_masks marks pixels on
    moving objects; omitted means all-static.
    """
    d = np.asarray(depths, dtype=np.float64)
    t_count, h, w = frames.frames.shape[:3]
    if d.shape != (t_count, h, w):
        raise ValueError(f"depth stack {d.shape} does not match video {(t_count, h, w)}")
    if traj.frame_count != t_count:
        raise ValueError(f"trajectory has {traj.frame_count} poses for {t_count} frames")
    if (k.height, k.width) != (h, w):
        raise ValueError(f"intrinsics size {(k.height, k.width)} does not match frames {(h, w)}")
    if np.any(d < 0):
        raise ValueError("depths must be non-negative (0 = invalid)")
    if dynamic_masks is not None:
        dyn = np.asarray(dynamic_masks, dtype=bool)
        if dyn.shape != (t_count, h, w):
            raise ValueError(f"dynamic mask stack {dyn.shape} does not match {(t_count, h, w)}")
    else:
        dyn = np.zeros((t_count, h, w), dtype=bool)

    uu, vv = np.meshgrid(np.arange(w, dtype=np.int64), np.arange(h, dtype=np.int64))
    out = []
    for t in range(t_count):
        valid = d[t] > 0
        pts = backproject_grid(d[t], traj[t], k)[valid]
        out.append(FramePoints(
            positions=pts,
            colors=frames.frames[t][valid],
            source_pixel=np.stack([uu[valid], vv[valid]], axis=1),
            is_dynamic=dyn[t][valid],
            source_frame=np.full(int(valid.sum()), t, dtype=np.int64),
        ))
    return DynamicPointCloud(out)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _splat_candidates(points: np.ndarray, pose: CameraPose, k: PinholeIntrinsics,
                      splat_radius: int):
    """Project points and expand square splats into (pixel_flat, depth, index)."""
    uv, z, in_front = project_points(points, pose, k)
    iu = np.zeros(len(points), dtype=np.int64)
    iv = np.zeros(len(points), dtype=np.int64)
    iu[in_front] = np.rint(uv[in_front, 0]).astype(np.int64)
    iv[in_front] = np.rint(uv[in_front, 1]).astype(np.int64)
    idx = np.arange(len(points), dtype=np.int64)

    pix_all, z_all, idx_all = [], [], []
    r = int(splat_radius)
    for du in range(-r, r + 1):
        for dv in range(-r, r + 1):
            u2 = iu + du
            v2 = iv + dv
            ok = in_front & (u2 >= 0) & (u2 < k.width) & (v2 >= 0) & (v2 < k.height)
            if not ok.any():
                continue
            pix_all.append(v2[ok] * k.width + u2[ok])
            z_all.append(z[ok])
            idx_all.append(idx[ok])
    if not pix_all:
        return (np.zeros(0, dtype=np.int64),) * 3
    return np.concatenate(pix_all), np.concatenate(z_all), np.concatenate(idx_all)


def render(cloud_frame: FramePoints, pose: CameraPose, k: PinholeIntrinsics,
           splat_radius: int = 1) -> RenderedFrame:
    """Z-buffered square-splat rendering of one point-cloud frame.

    Each covered pixel shows the color of the nearest point whose splat
    covers it; equal depths resolve to the lower point index.
    """
    if splat_radius < 0:
        raise ValueError(f"splat_radius must be >= 0, got {splat_radius}")
    h, w = k.height, k.width
    color = np.zeros((h, w, 3), dtype=np.float32)
    depth = np.zeros((h, w), dtype=np.float64)
    hit = np.full((h, w), NO_HIT, dtype=np.int64)

    if cloud_frame.count:
        pix, z, idx = _splat_candidates(cloud_frame.positions, pose, k, splat_radius)
        if len(pix):
            # Sort by (pixel, depth, index); the first entry of every pixel
            # run is the z-buffer winner. Fully deterministic.
            order = np.lexsort((idx, z, pix))
            pix_s = pix[order]
            first = np.ones(len(pix_s), dtype=bool)
            first[1:] = pix_s[1:] != pix_s[:-1]
            win = order[first]
            py, px = np.divmod(pix[win], w)
            color[py, px] = cloud_frame.colors[idx[win]]
            depth[py, px] = z[win]
            hit[py, px] = idx[win]

    return RenderedFrame(color=color, depth=depth, hit_index=hit, coverage=depth > 0)


def render_clip(cloud: DynamicPointCloud, traj: Trajectory, k: PinholeIntrinsics,
                splat_radius: int = 1) -> tuple:
    """Render every cloud frame from the matching trajectory pose.

    Returns (VideoClip with coverage as validity, (T, H, W) depth stack).
    """
    if cloud.frame_count != traj.frame_count:
        raise ValueError(f"cloud has {cloud.frame_count} frames, trajectory "
                         f"{traj.frame_count}")
    colors, covs, depths = [], [], []
    for t in range(cloud.frame_count):
        rf = render(cloud.frames[t], traj[t], k, splat_radius)
        colors.append(rf.color)
        covs.append(rf.coverage)
        depths.append(rf.depth)
    return (VideoClip(np.stack(colors), np.stack(covs)), np.stack(depths))


# ---------------------------------------------------------------------------
# Co-visibility
# ---------------------------------------------------------------------------

def covisibility_mask(cloud: DynamicPointCloud, src_traj: Trajectory,
                      novel_traj: Trajectory, k: PinholeIntrinsics,
                      depth_tol: float = 0.01, splat_radius: int = 0,
                      ) -> CovisibilityMask:
    """Mark source pixels whose points stay visible from the novel trajectory.

    Computed per frame (time-aligned): frame t of the cloud is tested against
    pose t of `novel_traj`. A point passes when its projection lands in
    bounds, in front of the camera, and within relative `depth_tol` of the
    novel-view z-buffer (i.e. it is not occluded by a nearer point).
    """
    if src_traj.frame_count != novel_traj.frame_count:
        raise ValueError(f"trajectory frame counts differ: {src_traj.frame_count} "
                         f"vs {novel_traj.frame_count}")
    if cloud.frame_count != src_traj.frame_count:
        raise ValueError(f"cloud has {cloud.frame_count} frames, trajectories "
                         f"{src_traj.frame_count}")
    h, w = k.height, k.width
    masks = np.zeros((cloud.frame_count, h, w), dtype=bool)
    for t in range(cloud.frame_count):
        fp = cloud.frames[t]
        if not fp.count:
            continue
        zbuf = render(fp, novel_traj[t], k, splat_radius).depth
        uv, z, in_front = project_points(fp.positions, novel_traj[t], k)
        iu = np.zeros(fp.count, dtype=np.int64)
        iv = np.zeros(fp.count, dtype=np.int64)
        iu[in_front] = np.rint(uv[in_front, 0]).astype(np.int64)
        iv[in_front] = np.rint(uv[in_front, 1]).astype(np.int64)
        ok = in_front & (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
        vis = np.zeros(fp.count, dtype=bool)
        vis[ok] = z[ok] <= zbuf[iv[ok], iu[ok]] * (1.0 + depth_tol)
        sp = fp.source_pixel[vis]
        masks[t, sp[:, 1], sp[:, 0]] = True
    return CovisibilityMask(masks)


# ---------------------------------------------------------------------------
# Static-background stacking
# ---------------------------------------------------------------------------

def _voxel_size(cloud: DynamicPointCloud, fraction: float) -> float:
    all_pts = [f.positions for f in cloud.frames if f.count]
    if not all_pts:
        return 1.0
    pts = np.concatenate(all_pts)
    diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    return max(diag * fraction, 1e-12)


def stack_static_background(cloud: DynamicPointCloud,
                            voxel_fraction: float = 0.005) -> DynamicPointCloud:
    """Augment every frame with the union of all static points across time.

    The union is deduplicated by voxel hashing (voxel edge = voxel_fraction
    of the scene bounding-box diagonal, first occurrence in frame order
    wins); dynamic points remain per-frame. Frames with only dynamic points
    pass through untouched when the union is empty.
    """
    statics = [f for f in cloud.frames if (~f.is_dynamic).any()]
    if not statics:
        return DynamicPointCloud([f for f in cloud.frames])

    pos = np.concatenate([f.positions[~f.is_dynamic] for f in statics])
    col = np.concatenate([f.colors[~f.is_dynamic] for f in statics])
    spx = np.concatenate([f.source_pixel[~f.is_dynamic] for f in statics])
    sfr = np.concatenate([f.source_frame[~f.is_dynamic] for f in statics])

    voxel = _voxel_size(cloud, voxel_fraction)
    keys = np.floor(pos / voxel).astype(np.int64)
    # Deterministic dedup: stable-unique over voxel keys keeps the first
    # occurrence in (frame, point) order.
    _, keep = np.unique(keys, axis=0, return_index=True)
    keep = np.sort(keep)
    pos, col, spx, sfr = pos[keep], col[keep], spx[keep], sfr[keep]

    out = []
    for f in cloud.frames:
        dyn = f.is_dynamic
        out.append(FramePoints(
            positions=np.concatenate([pos, f.positions[dyn]]),
            colors=np.concatenate([col, f.colors[dyn]]),
            source_pixel=np.concatenate([spx, f.source_pixel[dyn]]),
            is_dynamic=np.concatenate([np.zeros(len(pos), dtype=bool),
                                       np.ones(int(dyn.sum()), dtype=bool)]),
            source_frame=np.concatenate([sfr, f.source_frame[dyn]]),
        ))
    return DynamicPointCloud(out)


# ---------------------------------------------------------------------------
# Scale alignment
# ---------------------------------------------------------------------------

def align_scale(estimated_depths: np.ndarray, reference_depths: np.ndarray) -> float:
    """Least-squares scale s minimizing sum((s * d_est - d_ref)^2).

    Only pixels valid (> 0) in both stacks contribute; closed form
    s = sum(d_est * d_ref) / sum(d_est^2).
    """
    est = np.asarray(estimated_depths, dtype=np.float64)
    ref = np.asarray(reference_depths, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"depth stacks differ in shape: {est.shape} vs {ref.shape}")
    valid = (est > 0) & (ref > 0)
    if not valid.any():
        raise ValueError("no jointly-valid pixels to align")
    e = est[valid]
    return float(np.dot(e, ref[valid]) / np.dot(e, e))
