"""Self-supervised training-pair generation.

A pair couples a masked conditioning clip with its complete target clip.
The mask comes either from 3D co-visibility geometry (structured masking:
render the reconstruction from a sampled novel trajectory, keep the source
pixels that stay visible) or from the patch-masking baselines (random,
tube). Every operation is a pure function of its inputs and an rng seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from nvs_forge.camera import (
    CameraPose,
    PinholeIntrinsics,
    SphericalCoord,
    Trajectory,
    backproject,
    interpolate_trajectory,
    pose_to_spherical,
    spherical_to_pose,
)
from nvs_forge.clips import VideoClip
from nvs_forge.geometry import (
    CovisibilityMask,
    DynamicPointCloud,
    FramePoints,
    covisibility_mask,
    render_clip,
)

# Intermediate control poses sit on the start-end segment in spherical
# coordinates, uniformly jittered around the even 1/3 and 2/3 split. The
# jitter keeps trajectories varied while bounding the spline's speed
# variation, which keeps frame-to-frame rotation steps free of jumps.
_INTERMEDIATE_JITTER = 0.08


@dataclass(frozen=True)
class SamplingRegion:
    """Bounded spherical-offset region around the source camera.

    Offsets are relative to the spherical coordinates of the first source
    camera (azimuth/elevation in radians); radius deviation is a fraction of
    the first-frame camera-to-center distance. `center` is the scene center
    every sampled camera looks at.
    """

    elevation_range: tuple
    azimuth_range: tuple
    radius_deviation_range: tuple
    center: np.ndarray

    def __post_init__(self):
        for name in ("elevation_range", "azimuth_range", "radius_deviation_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is not ordered: ({lo}, {hi})")
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        object.__setattr__(self, "center", c)

    @staticmethod
    def from_degrees(center, elevation_deg: float = 15.0, azimuth_deg: float = 30.0,
                     radius_deviation: float = 0.15) -> "SamplingRegion":
        e = math.radians(elevation_deg)
        a = math.radians(azimuth_deg)
        return SamplingRegion(elevation_range=(-e, e), azimuth_range=(-a, a),
                              radius_deviation_range=(-radius_deviation, radius_deviation),
                              center=center)


@dataclass
class TrainingPair:
    """(masked conditioning clip, complete target clip) plus provenance.

    For structured pairs, `covis` is the co-visibility mask and conditioning
    equals the target wherever it is true. Pairs built by the patch-masking
    baselines store their patch mask in `covis` with the same semantics
    (true = kept). Trajectories and intrinsics are carried along so
    downstream steps (depth-noise injection) can re-render the conditioning.
    """

    conditioning: VideoClip
    target: VideoClip
    covis: CovisibilityMask
    trajectory_id: int = 0
    src_traj: Trajectory | None = None
    novel_traj: Trajectory | None = None
    intrinsics: PinholeIntrinsics | None = None

    def __post_init__(self):
        if self.conditioning.shape != self.target.shape:
            raise ValueError(f"conditioning {self.conditioning.shape} and target "
                             f"{self.target.shape} disagree")
        if self.covis.mask.shape != self.target.frames.shape[:3]:
            raise ValueError("covis mask shape does not match the clips")


@dataclass(frozen=True)
class MaskStrategy:
    """Masking recipe: structured (geometry-driven), random, or tube."""

    kind: str = "structured"
    mask_ratio: float = 0.5
    patch_size: int = 16

    def __post_init__(self):
        if self.kind not in ("structured", "random", "tube"):
            raise ValueError(f"unknown mask strategy {self.kind!r}")
        if not (0.0 <= self.mask_ratio <= 1.0):
            raise ValueError(f"mask_ratio must be in [0, 1], got {self.mask_ratio}")
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")


# ---------------------------------------------------------------------------
# Scene center
# ---------------------------------------------------------------------------

def scene_center(first_depth: np.ndarray, pose: CameraPose, k: PinholeIntrinsics,
                 neighborhood: int = 11) -> np.ndarray:
    """Backprojection of the principal-point pixel of the first frame.

    When the depth there is invalid, the median depth of the surrounding
    11 x 11 valid pixels substitutes; if the whole neighborhood is invalid
    an error is raised.
    """
    d = np.asarray(first_depth, dtype=np.float64)
    h, w = d.shape
    iu = min(max(int(round(k.cx)), 0), w - 1)
    iv = min(max(int(round(k.cy)), 0), h - 1)
    depth = d[iv, iu]
    if depth <= 0:
        r = neighborhood // 2
        patch = d[max(0, iv - r):iv + r + 1, max(0, iu - r):iu + r + 1]
        valid = patch[patch > 0]
        if not len(valid):
            raise ValueError("no valid depth around the principal point")
        depth = float(np.median(valid))
    return backproject((k.cx, k.cy), float(depth), pose, k)


# ---------------------------------------------------------------------------
# Trajectory sampling
# ---------------------------------------------------------------------------

def _offset_spherical(base: SphericalCoord, d_az: float, d_el: float,
                      d_rad: float) -> SphericalCoord:
    el = float(np.clip(base.elevation + d_el, -math.pi / 2 + 1e-3, math.pi / 2 - 1e-3))
    return SphericalCoord(azimuth=base.azimuth + d_az, elevation=el,
                          radius=base.radius * (1.0 + d_rad))


def sample_trajectory(region: SamplingRegion, src_traj: Trajectory,
                      rng_seed: int, frame_count: int | None = None) -> Trajectory:
    """Sample a smooth novel trajectory inside the spherical region.

    Start and end offsets are uniform over the region; the two intermediate
    control poses lie on the start-end segment near its thirds. All four
    controls look at the region center; the controls are interpolated to the
    source frame count on the SE(3) manifold. Deterministic per seed.
    """
    if src_traj.frame_count < 1:
        raise ValueError("source trajectory is empty")
    t_frames = frame_count if frame_count is not None else src_traj.frame_count
    t_frames = max(t_frames, 2)
    rng = np.random.default_rng(rng_seed)
    base = pose_to_spherical(src_traj[0].translation, region.center)

    el = rng.uniform(*region.elevation_range, size=2)
    az = rng.uniform(*region.azimuth_range, size=2)
    rad = rng.uniform(*region.radius_deviation_range, size=2)
    u1 = rng.uniform(1.0 / 3.0 - _INTERMEDIATE_JITTER, 1.0 / 3.0 + _INTERMEDIATE_JITTER)
    u2 = rng.uniform(2.0 / 3.0 - _INTERMEDIATE_JITTER, 2.0 / 3.0 + _INTERMEDIATE_JITTER)

    fractions = (0.0, u1, u2, 1.0)
    controls = []
    for f in fractions:
        s = _offset_spherical(base,
                              az[0] + f * (az[1] - az[0]),
                              el[0] + f * (el[1] - el[0]),
                              rad[0] + f * (rad[1] - rad[0]))
        controls.append(spherical_to_pose(s, region.center))
    traj = interpolate_trajectory(controls, t_frames)
    if frame_count is None and src_traj.frame_count == 1:
        return Trajectory((traj.poses[0],))
    return traj


# ---------------------------------------------------------------------------
# Pair construction
# ---------------------------------------------------------------------------

def make_training_pair(cloud: DynamicPointCloud, src_traj: Trajectory,
                       novel_traj: Trajectory, k: PinholeIntrinsics,
                       depth_tol: float = 0.01, trajectory_id: int = 0,
                       ) -> TrainingPair:
    """Build one structured training pair.

    The target is the source video recovered by rendering the reconstruction
    from its own trajectory (exact on every pixel that produced a point);
    the conditioning is the target with non-co-visible pixels zeroed and the
    co-visibility mask as its validity.
    """
    covis = covisibility_mask(cloud, src_traj, novel_traj, k, depth_tol=depth_tol)
    target, _ = render_clip(cloud, src_traj, k, splat_radius=0)
    conditioning = target.masked(covis.mask)
    return TrainingPair(conditioning=conditioning, target=target, covis=covis,
                        trajectory_id=trajectory_id, src_traj=src_traj,
                        novel_traj=novel_traj, intrinsics=k)


# ---------------------------------------------------------------------------
# Masking-strategy baselines
# ---------------------------------------------------------------------------

def _patch_grid(h: int, w: int, patch: int):
    gy = (h + patch - 1) // patch
    gx = (w + patch - 1) // patch
    return gy, gx


def _patch_mask_to_pixels(keep_patches: np.ndarray, h: int, w: int, patch: int) -> np.ndarray:
    gy, gx = keep_patches.shape
    m = np.repeat(np.repeat(keep_patches, patch, axis=0), patch, axis=1)
    return m[:h, :w]


def apply_mask_strategy(clip: VideoClip, strategy: MaskStrategy, rng_seed: int,
                        geometry: tuple | None = None):
    """Mask a clip; returns (masked clip, (T, H, W) keep-mask).

    random: an independent patch mask per frame. tube: one patch mask shared
    by all frames. structured: delegates to make_training_pair, which needs
    `geometry` = (cloud, src_traj, novel_traj, intrinsics). The realized
    hidden fraction is within one patch of mask_ratio.
    """
    t, h, w = clip.frames.shape[:3]
    if strategy.kind == "structured":
        if geometry is None:
            raise ValueError("structured masking needs geometry "
                             "(cloud, src_traj, novel_traj, intrinsics)")
        pair = make_training_pair(*geometry)
        return pair.conditioning, pair.covis.mask.copy()

    rng = np.random.default_rng(rng_seed)
    gy, gx = _patch_grid(h, w, strategy.patch_size)
    n_patches = gy * gx
    n_hide = int(round(strategy.mask_ratio * n_patches))

    def one_mask():
        hide = rng.choice(n_patches, size=n_hide, replace=False)
        keep = np.ones(n_patches, dtype=bool)
        keep[hide] = False
        return _patch_mask_to_pixels(keep.reshape(gy, gx), h, w, strategy.patch_size)

    if strategy.kind == "tube":
        shared = one_mask()
        mask = np.broadcast_to(shared, (t, h, w)).copy()
    else:
        mask = np.stack([one_mask() for _ in range(t)])
    return clip.masked(mask), mask


def masked_pair_from_clip(clip: VideoClip, strategy: MaskStrategy, rng_seed: int,
                          trajectory_id: int = 0) -> TrainingPair:
    """A TrainingPair whose mask comes from a patch strategy instead of geometry."""
    masked, mask = apply_mask_strategy(clip, strategy, rng_seed)
    return TrainingPair(conditioning=masked, target=clip.copy(),
                        covis=CovisibilityMask(mask), trajectory_id=trajectory_id)


# ---------------------------------------------------------------------------
# Depth-noise injection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    """Per-point depth-residual sampler for noise injection.

    kinds: "empirical" resamples a pool of observed residuals (meters);
    "edge_gaussian" draws zero-mean Gaussians whose sigma is sigma_scale
    times the local depth-gradient magnitude at the point's source pixel;
    "constant" displaces every point by the same residual.
    """

    kind: str
    residuals: np.ndarray | None = None
    sigma_scale: float = 0.0
    sigma_maps: np.ndarray | None = None
    constant: float = 0.0

    def __post_init__(self):
        if self.kind not in ("empirical", "edge_gaussian", "constant"):
            raise ValueError(f"unknown noise model {self.kind!r}")
        if self.kind == "empirical":
            r = np.asarray(self.residuals, dtype=np.float64).reshape(-1)
            if not len(r):
                raise ValueError("empirical noise model needs at least one residual")
            object.__setattr__(self, "residuals", r)

    @staticmethod
    def empirical(residuals) -> "NoiseSpec":
        return NoiseSpec(kind="empirical", residuals=np.asarray(residuals, dtype=np.float64))

    @staticmethod
    def edge_gaussian(depths: np.ndarray, sigma_scale: float) -> "NoiseSpec":
        """Sigma proportional to the local depth-gradient magnitude."""
        d = np.asarray(depths, dtype=np.float64)
        gy, gx = np.gradient(d, axis=(1, 2))
        return NoiseSpec(kind="edge_gaussian", sigma_scale=sigma_scale,
                         sigma_maps=np.hypot(gy, gx))

    @staticmethod
    def zero() -> "NoiseSpec":
        return NoiseSpec(kind="constant", constant=0.0)

    def sample(self, rng: np.random.Generator, frame: int,
               source_pixel: np.ndarray) -> np.ndarray:
        n = len(source_pixel)
        if self.kind == "constant":
            return np.full(n, self.constant)
        if self.kind == "empirical":
            return rng.choice(self.residuals, size=n, replace=True)
        sig = self.sigma_maps[frame, source_pixel[:, 1], source_pixel[:, 0]]
        return rng.standard_normal(n) * sig * self.sigma_scale


def estimate_depth_residuals(estimated: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Residual pool (reference - estimated) over jointly-valid pixels."""
    est = np.asarray(estimated, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"depth stacks differ in shape: {est.shape} vs {ref.shape}")
    valid = (est > 0) & (ref > 0)
    if not valid.any():
        raise ValueError("no jointly-valid pixels for residual estimation")
    return (ref[valid] - est[valid]).ravel()


def inject_depth_noise(pair: TrainingPair, cloud: DynamicPointCloud,
                       noise_model: NoiseSpec, rng_seed: int,
                       depth_tol: float = 0.01) -> TrainingPair:
    """Displace dynamic points along their novel-view rays, then rebuild the
    conditioning from the displaced cloud. The target is untouched.

    Displacement happens along the ray from the frame's novel camera center
    through the point, so a residual r moves the point exactly r meters
    further from (or closer to) that camera. Co-visibility is recomputed on
    the displaced cloud and the conditioning is re-rendered from the source
    trajectory, which shows the characteristic edge smearing of noisy depth.
    A zero-noise model reproduces the input pair bit-exactly.
    """
    if pair.src_traj is None or pair.novel_traj is None or pair.intrinsics is None:
        raise ValueError("pair lacks the trajectories/intrinsics needed for re-rendering")
    rng = np.random.default_rng(rng_seed)
    k = pair.intrinsics

    displaced = []
    for t in range(cloud.frame_count):
        fp = cloud.frames[t]
        dyn = fp.is_dynamic
        pos = fp.positions.copy()
        if dyn.any():
            cam = pair.novel_traj[t].translation
            rays = pos[dyn] - cam
            rays /= np.linalg.norm(rays, axis=1, keepdims=True)
            res = noise_model.sample(rng, t, fp.source_pixel[dyn])
            pos[dyn] = pos[dyn] + res[:, None] * rays
        displaced.append(FramePoints(positions=pos, colors=fp.colors,
                                     source_pixel=fp.source_pixel,
                                     is_dynamic=fp.is_dynamic,
                                     source_frame=fp.source_frame))
    displaced_cloud = DynamicPointCloud(displaced)

    covis = covisibility_mask(displaced_cloud, pair.src_traj, pair.novel_traj, k,
                              depth_tol=depth_tol)
    subset = []
    for t in range(displaced_cloud.frame_count):
        fp = displaced_cloud.frames[t]
        keep = covis.mask[t, fp.source_pixel[:, 1], fp.source_pixel[:, 0]]
        subset.append(FramePoints(positions=fp.positions[keep], colors=fp.colors[keep],
                                  source_pixel=fp.source_pixel[keep],
                                  is_dynamic=fp.is_dynamic[keep],
                                  source_frame=fp.source_frame[keep]))
    conditioning, _ = render_clip(DynamicPointCloud(subset), pair.src_traj, k,
                                  splat_radius=0)
    return replace(pair, conditioning=conditioning, covis=covis)
