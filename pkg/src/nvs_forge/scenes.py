"""Procedural dynamic scenes with analytic ground-truth depth.

Scenes are built from closed-form primitives (inward-facing dome, finite
checkerboard ground plane, axis-aligned boxes, spheres) under flat albedo,
so every rendered pixel has an exact depth from ray-primitive intersection
and photometric round trips are exact. Dynamic objects follow linear or
circular paths. The source camera orbits the scene center, which also makes
panning/background-stacking experiments meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from nvs_forge.camera import PinholeIntrinsics, SphericalCoord, Trajectory, spherical_to_pose
from nvs_forge.clips import VideoClip

_INF = np.inf


@dataclass(frozen=True)
class Motion:
    """Rigid object motion: linear velocity or a horizontal circular orbit."""

    kind: str  # "linear" | "circular"
    velocity: tuple = (0.0, 0.0, 0.0)
    angular_speed: float = 0.0
    orbit_center: tuple = (0.0, 0.0, 0.0)
    orbit_radius: float = 0.0
    phase: float | None = None  # None: resolved from the scene seed

    def __post_init__(self):
        if self.kind not in ("linear", "circular"):
            raise ValueError(f"unknown motion kind {self.kind!r}")

    def offset(self, time_s: float, phase: float) -> np.ndarray:
        if self.kind == "linear":
            return np.asarray(self.velocity, dtype=np.float64) * time_s
        theta = phase + self.angular_speed * time_s
        base = np.asarray(self.orbit_center, dtype=np.float64)
        return base + self.orbit_radius * np.array([math.cos(theta), 0.0, math.sin(theta)])


@dataclass(frozen=True)
class Box:
    center: tuple
    size: tuple
    color: tuple
    motion: Motion | None = None


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    color: tuple
    motion: Motion | None = None


@dataclass(frozen=True)
class CheckerPlane:
    """Horizontal plane y = height with a two-color checker of given cell size."""

    height: float
    extent: float
    color_a: tuple
    color_b: tuple
    cell: float
    phase: tuple | None = None  # (x, z) checker offset; None: from scene seed


@dataclass(frozen=True)
class SceneSpec:
    """Complete description of a synthetic dynamic scene.

    Fields left at None (motion phases, checker phase) are resolved
    deterministically from the rng seed passed to generate_scene, so
    generation is a pure function of (spec, seed).
    """

    width: int = 32
    height: int = 32
    frame_count: int = 8
    frame_dt: float = 0.1
    look_center: tuple = (0.0, 0.6, 0.0)
    camera_radius: float = 2.5
    camera_elevation: float = 0.18
    camera_azimuth_start: float = -0.35
    camera_azimuth_end: float = 0.35
    hfov_deg: float = 55.0
    ground: CheckerPlane | None = field(
        default_factory=lambda: CheckerPlane(0.0, 4.0, (0.82, 0.78, 0.70),
                                             (0.35, 0.38, 0.42), 0.5))
    dome_radius: float = 9.0
    dome_color_a: tuple = (0.55, 0.68, 0.85)
    dome_color_b: tuple = (0.47, 0.58, 0.76)
    statics: tuple = ()
    dynamics: tuple = ()

    def intrinsics(self) -> PinholeIntrinsics:
        fx = (self.width / 2.0) / math.tan(math.radians(self.hfov_deg) / 2.0)
        return PinholeIntrinsics(fx=fx, fy=fx, cx=(self.width - 1) / 2.0,
                                 cy=(self.height - 1) / 2.0,
                                 width=self.width, height=self.height)

    def source_trajectory(self) -> Trajectory:
        poses = []
        for t in range(self.frame_count):
            a = self.camera_azimuth_start
            if self.frame_count > 1:
                a += (self.camera_azimuth_end - self.camera_azimuth_start) * t / (self.frame_count - 1)
            s = SphericalCoord(azimuth=a, elevation=self.camera_elevation,
                               radius=self.camera_radius)
            poses.append(spherical_to_pose(s, self.look_center))
        return Trajectory(tuple(poses))


# ---------------------------------------------------------------------------
# Ray-primitive intersections (vectorized over an (H, W) ray grid).
# Rays are o + t * d with d_z = 1 in the camera frame, so t is camera depth.
# ---------------------------------------------------------------------------

def _hit_sphere(o, dirs, center, radius):
    oc = o - np.asarray(center, dtype=np.float64)
    a = np.einsum("hwc,hwc->hw", dirs, dirs)
    b = 2.0 * np.einsum("hwc,c->hw", dirs, oc)
    c = float(np.dot(oc, oc)) - radius * radius
    disc = b * b - 4.0 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t_near = (-b - sq) / (2.0 * a)
    t_far = (-b + sq) / (2.0 * a)
    t = np.where(t_near > 1e-9, t_near, t_far)
    return np.where(hit & (t > 1e-9), t, _INF)


def _hit_box(o, dirs, lo, hi):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / dirs
        t2 = (hi - o) / dirs
    tmin = np.max(np.minimum(t1, t2), axis=-1)
    tmax = np.min(np.maximum(t1, t2), axis=-1)
    hit = (tmax >= tmin) & (tmax > 1e-9)
    t = np.where(tmin > 1e-9, tmin, tmax)
    return np.where(hit, t, _INF)


def _hit_plane_y(o, dirs, height, extent):
    dy = dirs[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (height - o[1]) / dy
    x = o[0] + t * dirs[..., 0]
    z = o[2] + t * dirs[..., 2]
    ok = (np.abs(dy) > 1e-12) & (t > 1e-9) & (np.abs(x) <= extent) & (np.abs(z) <= extent)
    return np.where(ok, t, _INF)


def _checker_colors(x, z, plane: CheckerPlane, phase):
    # positions from missed rays are non-finite; they are never selected, so
    # evaluate the checker on zeros there to keep the arithmetic clean
    x = np.where(np.isfinite(x), x, 0.0)
    z = np.where(np.isfinite(z), z, 0.0)
    par = (np.floor((x - phase[0]) / plane.cell) + np.floor((z - phase[1]) / plane.cell))
    sel = np.mod(par, 2.0) < 1.0
    ca = np.asarray(plane.color_a, dtype=np.float32)
    cb = np.asarray(plane.color_b, dtype=np.float32)
    return np.where(sel[..., None], ca, cb)


def _dome_colors(hit_dir, spec: SceneSpec):
    az = np.arctan2(hit_dir[..., 0], hit_dir[..., 2])
    el = np.arcsin(np.clip(hit_dir[..., 1], -1.0, 1.0))
    par = np.floor(az / 0.7) + np.floor(el / 0.7)
    sel = np.mod(par, 2.0) < 1.0
    ca = np.asarray(spec.dome_color_a, dtype=np.float32)
    cb = np.asarray(spec.dome_color_b, dtype=np.float32)
    return np.where(sel[..., None], ca, cb)


def _object_center(obj, time_s: float, phase: float) -> np.ndarray:
    base = np.asarray(obj.center, dtype=np.float64)
    if obj.motion is None:
        return base
    if obj.motion.kind == "linear":
        return base + obj.motion.offset(time_s, phase)
    return obj.motion.offset(time_s, phase)


def _resolve_phases(spec: SceneSpec, rng: np.random.Generator):
    """Draw values for spec fields left at None. Consumes rng deterministically."""
    checker_phase = (0.0, 0.0)
    if spec.ground is not None:
        checker_phase = spec.ground.phase
        if checker_phase is None:
            checker_phase = tuple(rng.uniform(0.0, spec.ground.cell, size=2))
    phases = []
    for obj in spec.dynamics:
        if obj.motion is not None and obj.motion.phase is None:
            phases.append(float(rng.uniform(0.0, 2.0 * math.pi)))
        else:
            phases.append(0.0 if obj.motion is None else obj.motion.phase)
    return checker_phase, phases


def generate_scene(spec: SceneSpec, rng_seed: int = 0, trajectory: Trajectory | None = None):
    """Ray-cast the scene; returns (frames, depths, traj, intrinsics, dyn_masks).

    Depth is the analytically exact camera-frame z of the nearest hit (0
    would mean no hit, which the enclosing dome prevents); dynamic masks are
    true exactly where the nearest hit belongs to a dynamic object. Passing
    `trajectory` renders the same scene content (same seed, same phases)
    from an arbitrary camera path, e.g. for held-out novel views.
    """
    rng = np.random.default_rng(rng_seed)
    checker_phase, dyn_phases = _resolve_phases(spec, rng)
    k = spec.intrinsics()
    traj = trajectory if trajectory is not None else spec.source_trajectory()
    if traj.frame_count != spec.frame_count:
        raise ValueError(f"trajectory has {traj.frame_count} poses, spec wants "
                         f"{spec.frame_count}")
    h, w = spec.height, spec.width

    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    ray_cam = np.stack(np.broadcast_arrays(
        (u[None, :] - k.cx) / k.fx,
        (v[:, None] - k.cy) / k.fy,
        np.ones((h, w))), axis=-1)

    frames = np.zeros((spec.frame_count, h, w, 3), dtype=np.float32)
    depths = np.zeros((spec.frame_count, h, w), dtype=np.float64)
    dyn_masks = np.zeros((spec.frame_count, h, w), dtype=bool)
    center = np.asarray(spec.look_center, dtype=np.float64)

    for t in range(spec.frame_count):
        pose = traj[t]
        o = pose.translation
        dirs = ray_cam @ pose.rotation.T
        time_s = t * spec.frame_dt

        depth_layers = []
        color_layers = []
        dyn_layers = []

        # enclosing dome: guarantees every ray has a valid depth
        t_dome = _hit_sphere(o, dirs, center, spec.dome_radius)
        p_dir = (o + t_dome[..., None] * dirs) - center
        p_dir /= np.linalg.norm(p_dir, axis=-1, keepdims=True)
        depth_layers.append(t_dome)
        color_layers.append(_dome_colors(p_dir, spec))
        dyn_layers.append(False)

        if spec.ground is not None:
            t_g = _hit_plane_y(o, dirs, spec.ground.height, spec.ground.extent)
            gx = o[0] + t_g * dirs[..., 0]
            gz = o[2] + t_g * dirs[..., 2]
            depth_layers.append(t_g)
            color_layers.append(_checker_colors(gx, gz, spec.ground, checker_phase))
            dyn_layers.append(False)

        for obj in spec.statics:
            depth_layers.append(_intersect_object(o, dirs, obj, obj_center=np.asarray(obj.center)))
            color_layers.append(np.asarray(obj.color, dtype=np.float32))
            dyn_layers.append(False)

        for obj, phase in zip(spec.dynamics, dyn_phases):
            oc = _object_center(obj, time_s, phase)
            depth_layers.append(_intersect_object(o, dirs, obj, obj_center=oc))
            color_layers.append(np.asarray(obj.color, dtype=np.float32))
            dyn_layers.append(True)

        stack = np.stack(depth_layers)
        nearest = np.argmin(stack, axis=0)
        depth = np.take_along_axis(stack, nearest[None], axis=0)[0]
        img = np.zeros((h, w, 3), dtype=np.float32)
        dyn = np.zeros((h, w), dtype=bool)
        for i, (col, is_dyn) in enumerate(zip(color_layers, dyn_layers)):
            sel = nearest == i
            img[sel] = col[sel] if np.ndim(col) == 3 else col
            if is_dyn:
                dyn[sel] = True
        miss = ~np.isfinite(depth)
        depth[miss] = 0.0
        frames[t] = img
        depths[t] = depth
        dyn_masks[t] = dyn & ~miss

    return VideoClip(frames), depths, traj, k, dyn_masks


def _intersect_object(o, dirs, obj, obj_center):
    if isinstance(obj, Box):
        half = 0.5 * np.asarray(obj.size, dtype=np.float64)
        return _hit_box(o, dirs, obj_center - half, obj_center + half)
    if isinstance(obj, Sphere):
        return _hit_sphere(o, dirs, obj_center, obj.radius)
    raise TypeError(f"unknown primitive {type(obj)}")


# ---------------------------------------------------------------------------
# Randomized scenes and the evaluation benchmark
# ---------------------------------------------------------------------------

_PALETTE = np.array([
    (0.85, 0.25, 0.22), (0.22, 0.55, 0.83), (0.93, 0.72, 0.20),
    (0.30, 0.68, 0.35), (0.70, 0.35, 0.75), (0.90, 0.50, 0.15),
    (0.25, 0.75, 0.72), (0.80, 0.30, 0.50),
])


def random_scene_spec(rng_seed: int, width: int = 32, height: int = 32,
                      frame_count: int = 8) -> SceneSpec:
    """A randomized dynamic scene: checker ground, 2-3 static boxes and 1-2
    moving objects in front of an orbiting camera."""
    rng = np.random.default_rng(rng_seed)
    palette = _PALETTE[rng.permutation(len(_PALETTE))]

    statics = []
    for i in range(int(rng.integers(2, 4))):
        size = rng.uniform(0.35, 0.75, size=3)
        pos = np.array([rng.uniform(-0.9, 0.9), size[1] / 2.0, rng.uniform(-0.9, 0.9)])
        statics.append(Box(center=tuple(pos), size=tuple(size),
                           color=tuple(palette[i % len(palette)])))

    dynamics = []
    n_dyn = int(rng.integers(1, 3))
    for i in range(n_dyn):
        color = tuple(palette[(3 + i) % len(palette)])
        if rng.random() < 0.5:
            speed = rng.uniform(0.4, 0.9)
            direction = rng.choice([-1.0, 1.0])
            motion = Motion(kind="linear", velocity=(direction * speed, 0.0, 0.0))
            start = np.array([-direction * 0.55, 0.55 + 0.25 * i, rng.uniform(0.2, 0.8)])
            dynamics.append(Box(center=tuple(start), size=(0.3, 0.3, 0.3),
                                color=color, motion=motion))
        else:
            motion = Motion(kind="circular", angular_speed=rng.uniform(0.8, 1.6),
                            orbit_center=(0.0, 0.5 + 0.3 * i, 0.0),
                            orbit_radius=rng.uniform(0.5, 0.8), phase=None)
            dynamics.append(Sphere(center=(0.0, 0.0, 0.0), radius=rng.uniform(0.16, 0.24),
                                   color=color, motion=motion))

    return SceneSpec(
        width=width, height=height, frame_count=frame_count,
        camera_radius=float(rng.uniform(2.2, 2.8)),
        camera_elevation=float(rng.uniform(0.10, 0.30)),
        camera_azimuth_start=float(rng.uniform(-0.55, -0.15)),
        camera_azimuth_end=float(rng.uniform(0.15, 0.55)),
        statics=tuple(statics),
        dynamics=tuple(dynamics),
    )


@dataclass
class BenchmarkCase:
    """One held-out evaluation scene with an exact novel-view ground truth."""

    name: str
    spec: SceneSpec
    scene_seed: int
    frames: VideoClip
    depths: np.ndarray
    traj: Trajectory
    intrinsics: PinholeIntrinsics
    dyn_masks: np.ndarray
    novel_traj: Trajectory
    novel_frames: VideoClip
    novel_depths: np.ndarray


def generate_benchmark(suite_seed: int, count: int = 5, width: int = 32,
                       height: int = 32, frame_count: int = 8) -> list:
    """A fixed suite of held-out scenes with exact novel-view ground truth.

    Novel trajectories are drawn from a wider spherical region (elevation
    +-25 deg, azimuth +-50 deg, radius deviation +-0.25) than the training
    sampling region, guaranteeing a nontrivial inpainting task.
    """
    from nvs_forge.pairs import SamplingRegion, sample_trajectory

    if count < 1:
        raise ValueError("benchmark needs at least one scene")
    rng = np.random.default_rng(suite_seed)
    cases = []
    for i in range(count):
        scene_seed = int(rng.integers(0, 2**31 - 1))
        traj_seed = int(rng.integers(0, 2**31 - 1))
        spec = random_scene_spec(scene_seed, width=width, height=height,
                                 frame_count=frame_count)
        frames, depths, traj, k, dyn = generate_scene(spec, scene_seed)
        region = SamplingRegion(
            elevation_range=(-math.radians(25), math.radians(25)),
            azimuth_range=(-math.radians(50), math.radians(50)),
            radius_deviation_range=(-0.25, 0.25),
            center=np.asarray(spec.look_center, dtype=np.float64))
        novel_traj = sample_trajectory(region, traj, traj_seed)
        novel_frames, novel_depths, _, _, _ = generate_scene(spec, scene_seed,
                                                             trajectory=novel_traj)
        cases.append(BenchmarkCase(
            name=f"bench_{i:02d}", spec=spec, scene_seed=scene_seed,
            frames=frames, depths=depths, traj=traj, intrinsics=k,
            dyn_masks=dyn, novel_traj=novel_traj,
            novel_frames=novel_frames, novel_depths=novel_depths))
    return cases
