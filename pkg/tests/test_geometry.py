"""Reconstruction, z-buffer splatting, co-visibility and background stacking."""

import math

import numpy as np
import pytest

from nvs_forge.camera import (
    CameraPose,
    PinholeIntrinsics,
    SphericalCoord,
    Trajectory,
    spherical_to_pose,
)
from nvs_forge.clips import VideoClip
from nvs_forge.geometry import (
    FramePoints,
    DynamicPointCloud,
    align_scale,
    covisibility_mask,
    reconstruct_from_rgbd,
    render,
    render_clip,
    stack_static_background,
)
from oracles import brute_force_render, exhaustive_covisibility


def identity_traj(n):
    return Trajectory((CameraPose.identity(),) * n)


def plane_scene(k, depth=2.0, t_frames=1):
    """Fronto-parallel plane: every pixel valid at constant depth."""
    h, w = k.height, k.width
    rng = np.random.default_rng(9)
    frames = rng.random((t_frames, h, w, 3)).astype(np.float32)
    depths = np.full((t_frames, h, w), depth)
    return VideoClip(frames), depths


# ---------------------------------------------------------------------------
# reconstruct_from_rgbd
# ---------------------------------------------------------------------------

class TestReconstruct:
    def test_single_pixel_on_axis(self, k32):
        h, w = 32, 32
        depths = np.zeros((1, h, w))
        ippu, ippv = int(round(k32.cx)), int(round(k32.cy))
        depths[0, ippv, ippu] = 2.5
        clip = VideoClip(np.zeros((1, h, w, 3), dtype=np.float32))
        cloud = reconstruct_from_rgbd(clip, depths, identity_traj(1), k32)
        assert cloud.frames[0].count == 1
        p = cloud.frames[0].positions[0]
        # pixel (16, 16) with cx = 15.5 sits half a pixel off axis
        expected = np.array([(ippu - k32.cx) / k32.fx, (ippv - k32.cy) / k32.fy, 1.0]) * 2.5
        np.testing.assert_allclose(p, expected, atol=1e-12)

    def test_all_invalid_depth_gives_empty_frame(self, k32):
        clip = VideoClip(np.zeros((2, 32, 32, 3), dtype=np.float32))
        cloud = reconstruct_from_rgbd(clip, np.zeros((2, 32, 32)), identity_traj(2), k32)
        assert cloud.frames[0].count == 0
        assert cloud.frames[1].count == 0

    def test_plane_depths_in_camera_frame(self):
        k = PinholeIntrinsics(fx=8.0, fy=8.0, cx=3.5, cy=3.5, width=8, height=8)
        clip, depths = plane_scene(k, depth=2.0)
        cloud = reconstruct_from_rgbd(clip, depths, identity_traj(1), k)
        fp = cloud.frames[0]
        assert fp.count == 64
        # identity pose: camera frame == world frame, z must be exactly 2
        assert np.abs(fp.positions[:, 2] - 2.0).max() < 1e-6

    def test_shape_mismatch_raises(self, k32):
        clip = VideoClip(np.zeros((2, 32, 32, 3), dtype=np.float32))
        with pytest.raises(ValueError):
            reconstruct_from_rgbd(clip, np.zeros((3, 32, 32)), identity_traj(2), k32)
        with pytest.raises(ValueError):
            reconstruct_from_rgbd(clip, np.zeros((2, 16, 32)), identity_traj(2), k32)

    def test_colors_and_source_pixels_copied(self, k32, rng):
        clip, depths = plane_scene(k32, depth=3.0)
        cloud = reconstruct_from_rgbd(clip, depths, identity_traj(1), k32)
        fp = cloud.frames[0]
        sel = rng.integers(0, fp.count, size=20)
        for i in sel:
            u, v = fp.source_pixel[i]
            np.testing.assert_array_equal(fp.colors[i], clip.frames[0, v, u])


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------

class TestRender:
    def test_identity_roundtrip(self, k32):
        clip, depths = plane_scene(k32, depth=2.0)
        cloud = reconstruct_from_rgbd(clip, depths, identity_traj(1), k32)
        rf = render(cloud.frames[0], CameraPose.identity(), k32, splat_radius=0)
        assert rf.coverage.all()
        assert np.abs(rf.color - clip.frames[0]).max() <= 1.0 / 255.0
        assert np.abs(rf.depth - depths[0]).max() < 1e-4

    def test_zbuffer_orders_two_points(self, k32):
        fp = FramePoints(
            positions=np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 1.0]]),
            colors=np.array([[1, 0, 0], [0, 1, 0]], dtype=np.float32),
            source_pixel=np.array([[0, 0], [1, 0]]),
            is_dynamic=np.zeros(2, dtype=bool))
        rf = render(fp, CameraPose.identity(), k32, splat_radius=0)
        iu, iv = int(round(k32.cx)), int(round(k32.cy))
        np.testing.assert_array_equal(rf.color[iv, iu], [0, 1, 0])
        assert rf.depth[iv, iu] == 1.0
        assert rf.hit_index[iv, iu] == 1

    def test_equal_depth_tie_breaks_to_lower_index(self, k32):
        fp = FramePoints(
            positions=np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]),
            colors=np.array([[1, 0, 0], [0, 0, 1]], dtype=np.float32),
            source_pixel=np.zeros((2, 2)),
            is_dynamic=np.zeros(2, dtype=bool))
        rf = render(fp, CameraPose.identity(), k32, splat_radius=0)
        iu, iv = int(round(k32.cx)), int(round(k32.cy))
        assert rf.hit_index[iv, iu] == 0
        np.testing.assert_array_equal(rf.color[iv, iu], [1, 0, 0])

    def test_empty_cloud_renders_empty(self, k32):
        rf = render(FramePoints.empty(), CameraPose.identity(), k32)
        assert not rf.coverage.any()
        assert (rf.hit_index == -1).all()
        assert (rf.depth == 0).all()

    def test_matches_brute_force_oracle_from_offset_view(self):
        # 16x16 scene of three colored boxes of points, viewed 30 deg away
        k = PinholeIntrinsics(fx=16.0, fy=16.0, cx=7.5, cy=7.5, width=16, height=16)
        rng = np.random.default_rng(3)
        pts, cols = [], []
        for ci, base in enumerate([(0.9, 0.1, 0.1), (0.1, 0.9, 0.1), (0.1, 0.1, 0.9)]):
            n = 160
            offset = np.array([ci * 0.5 - 0.5, 0.0, ci * 0.3])
            pts.append(rng.uniform(-0.25, 0.25, size=(n, 3)) + offset)
            cols.append(np.tile(np.asarray(base, dtype=np.float32), (n, 1)))
        fp = FramePoints(positions=np.concatenate(pts),
                         colors=np.concatenate(cols),
                         source_pixel=np.zeros((480, 2)),
                         is_dynamic=np.zeros(480, dtype=bool))
        pose = spherical_to_pose(SphericalCoord(math.radians(30), 0.1, 2.2), np.zeros(3))
        for radius in (0, 1):
            rf = render(fp, pose, k, splat_radius=radius)
            color_o, depth_o, hit_o = brute_force_render(fp, pose, k, radius)
            np.testing.assert_array_equal(rf.color, color_o)
            np.testing.assert_array_equal(rf.hit_index, hit_o)
            np.testing.assert_array_equal(rf.depth, depth_o)

    def test_coverage_monotone_in_splat_radius(self, k32, rng):
        fp = FramePoints(positions=rng.uniform(-1, 1, (200, 3)) + [0, 0, 3],
                         colors=rng.random((200, 3)).astype(np.float32),
                         source_pixel=np.zeros((200, 2)),
                         is_dynamic=np.zeros(200, dtype=bool))
        pose = CameraPose.identity()
        prev = -1
        for radius in (0, 1, 2, 3):
            cov = int(render(fp, pose, k32, splat_radius=radius).coverage.sum())
            assert cov >= prev
            prev = cov

    def test_negative_radius_rejected(self, k32):
        with pytest.raises(ValueError):
            render(FramePoints.empty(), CameraPose.identity(), k32, splat_radius=-1)

    def test_rendered_depth_is_minimum_over_splats(self, k32, rng):
        # exhaustive z-buffer correctness on a random scene
        n = 500
        fp = FramePoints(positions=rng.uniform(-1, 1, (n, 3)) + [0, 0, 2.5],
                         colors=rng.random((n, 3)).astype(np.float32),
                         source_pixel=np.zeros((n, 2)),
                         is_dynamic=np.zeros(n, dtype=bool))
        rf = render(fp, CameraPose.identity(), k32, splat_radius=1)
        _, depth_o, _ = brute_force_render(fp, CameraPose.identity(), k32, 1)
        np.testing.assert_array_equal(rf.depth, depth_o)


# ---------------------------------------------------------------------------
# covisibility_mask
# ---------------------------------------------------------------------------

def two_plane_cloud(k, t_frames=1):
    """Front plane occluding the middle of a back plane."""
    h, w = k.height, k.width
    rng = np.random.default_rng(5)
    frames = rng.random((t_frames, h, w, 3)).astype(np.float32)
    depths = np.full((t_frames, h, w), 4.0)
    depths[:, h // 4: 3 * h // 4, w // 4: 3 * w // 4] = 1.5
    clip = VideoClip(frames)
    return reconstruct_from_rgbd(clip, depths, identity_traj(t_frames), k), depths


class TestCovisibility:
    def test_identity_trajectory_equals_validity(self, k32):
        clip, depths = plane_scene(k32, depth=2.0, t_frames=2)
        depths[0, :5, :7] = 0.0
        traj = identity_traj(2)
        cloud = reconstruct_from_rgbd(clip, depths, traj, k32)
        cm = covisibility_mask(cloud, traj, traj, k32)
        np.testing.assert_array_equal(cm.mask, depths > 0)

    def test_camera_facing_away_gives_all_false(self, k32):
        clip, depths = plane_scene(k32, depth=2.0)
        traj = identity_traj(1)
        cloud = reconstruct_from_rgbd(clip, depths, traj, k32)
        flipped = CameraPose(
            np.array([[-1.0, 0, 0], [0, 1.0, 0], [0, 0, -1.0]]), np.zeros(3))
        cm = covisibility_mask(cloud, traj, Trajectory((flipped,)), k32)
        assert not cm.mask.any()

    def test_two_plane_occlusion_matches_oracle(self):
        k = PinholeIntrinsics(fx=32.0, fy=32.0, cx=15.5, cy=15.5, width=32, height=32)
        cloud, _ = two_plane_cloud(k)
        src = identity_traj(1)
        lateral = Trajectory((spherical_to_pose(
            SphericalCoord(math.radians(35), 0.0, 2.0), np.array([0, 0, 2.0])),))
        cm = covisibility_mask(cloud, src, lateral, k)
        oracle = exhaustive_covisibility(cloud, src, lateral, k)
        np.testing.assert_array_equal(cm.mask, oracle)
        # the lateral view must actually hide something and keep something
        assert cm.mask.any() and not cm.mask.all()

    def test_randomized_scenes_match_oracle(self, rng):
        k = PinholeIntrinsics(fx=32.0, fy=32.0, cx=15.5, cy=15.5, width=32, height=32)
        for trial in range(5):
            h = w = 32
            depths = rng.uniform(1.0, 5.0, (1, h, w))
            depths[0, rng.random((h, w)) < 0.1] = 0.0
            clip = VideoClip(rng.random((1, h, w, 3)).astype(np.float32))
            cloud = reconstruct_from_rgbd(clip, depths, identity_traj(1), k)
            novel = Trajectory((spherical_to_pose(
                SphericalCoord(rng.uniform(-0.8, 0.8), rng.uniform(-0.4, 0.4),
                               rng.uniform(1.5, 3.0)),
                np.array([0, 0, 2.5])),))
            cm = covisibility_mask(cloud, identity_traj(1), novel, k)
            oracle = exhaustive_covisibility(cloud, identity_traj(1), novel, k)
            np.testing.assert_array_equal(cm.mask, oracle)

    def test_frame_count_mismatch(self, k32):
        clip, depths = plane_scene(k32, t_frames=2)
        cloud = reconstruct_from_rgbd(clip, depths, identity_traj(2), k32)
        with pytest.raises(ValueError):
            covisibility_mask(cloud, identity_traj(2), identity_traj(1), k32)


# ---------------------------------------------------------------------------
# stack_static_background
# ---------------------------------------------------------------------------

class TestStackBackground:
    def test_all_dynamic_passthrough(self, k32):
        clip, depths = plane_scene(k32, t_frames=2)
        cloud = reconstruct_from_rgbd(clip, depths, identity_traj(2), k32,
                                      dynamic_masks=np.ones((2, 32, 32), dtype=bool))
        out = stack_static_background(cloud)
        for a, b in zip(out.frames, cloud.frames):
            np.testing.assert_array_equal(a.positions, b.positions)
            np.testing.assert_array_equal(a.is_dynamic, b.is_dynamic)

    def test_disjoint_static_regions_union(self):
        # two frames seeing disjoint point sets A and B, spacing >> voxel
        pos_a = np.stack([np.arange(5) * 1.0, np.zeros(5), np.full(5, 2.0)], axis=1)
        pos_b = pos_a + np.array([0.0, 10.0, 0.0])
        mk = lambda pos, frame: FramePoints(
            positions=pos, colors=np.zeros((len(pos), 3), dtype=np.float32),
            source_pixel=np.zeros((len(pos), 2)), is_dynamic=np.zeros(len(pos), bool),
            source_frame=np.full(len(pos), frame))
        cloud = DynamicPointCloud([mk(pos_a, 0), mk(pos_b, 1)])
        out = stack_static_background(cloud)
        expected = {tuple(p) for p in np.vstack([pos_a, pos_b])}
        for f in out.frames:
            assert f.count == len(pos_a) + len(pos_b)
            assert {tuple(p) for p in f.positions} == expected

    def test_duplicate_points_are_deduped(self):
        pos = np.array([[0.0, 0.0, 2.0], [5.0, 0.0, 2.0]])
        mk = lambda frame: FramePoints(
            positions=pos.copy(), colors=np.zeros((2, 3), dtype=np.float32),
            source_pixel=np.zeros((2, 2)), is_dynamic=np.zeros(2, bool),
            source_frame=np.full(2, frame))
        cloud = DynamicPointCloud([mk(0), mk(1)])
        out = stack_static_background(cloud)
        assert out.frames[0].count == 2
        assert out.frames[1].count == 2

    def test_panning_coverage_monotone(self, k32):
        # orbiting camera: stacked frames must cover at least as much as
        # unstacked from every source pose
        center = np.array([0.0, 0.0, 0.0])
        poses = [spherical_to_pose(SphericalCoord(a, 0.15, 2.5), center)
                 for a in np.linspace(-0.5, 0.5, 4)]
        traj = Trajectory(tuple(poses))
        rng = np.random.default_rng(2)
        depths = rng.uniform(1.8, 2.6, (4, 32, 32))
        clip = VideoClip(rng.random((4, 32, 32, 3)).astype(np.float32))
        cloud = reconstruct_from_rgbd(clip, depths, traj, k32)
        stacked = stack_static_background(cloud)
        for t in range(4):
            base_cov = render(cloud.frames[t], traj[t], k32).coverage.sum()
            stack_cov = render(stacked.frames[t], traj[t], k32).coverage.sum()
            assert stack_cov >= base_cov

    def test_dynamic_points_stay_per_frame(self, k32):
        clip, depths = plane_scene(k32, t_frames=2)
        dyn = np.zeros((2, 32, 32), dtype=bool)
        dyn[:, :4, :4] = True
        cloud = reconstruct_from_rgbd(clip, depths, identity_traj(2), k32, dyn)
        out = stack_static_background(cloud)
        for t in range(2):
            n_dyn = int(out.frames[t].is_dynamic.sum())
            assert n_dyn == 16


# ---------------------------------------------------------------------------
# align_scale
# ---------------------------------------------------------------------------

class TestAlignScale:
    def test_exact_double(self, rng):
        ref = rng.uniform(1, 5, (2, 8, 8))
        assert align_scale(0.5 * ref, ref) == pytest.approx(2.0, abs=1e-12)

    def test_identity(self, rng):
        ref = rng.uniform(1, 5, (2, 8, 8))
        assert align_scale(ref, ref) == pytest.approx(1.0, abs=1e-12)

    def test_noisy_double(self, rng):
        ref = rng.uniform(1.0, 5.0, (4, 32, 32))
        est = 0.5 * ref * (1.0 + 0.01 * rng.standard_normal(ref.shape))
        # least-squares oracle on the flattened system
        e, r = est.ravel(), ref.ravel()
        s_oracle = np.linalg.lstsq(e[:, None], r, rcond=None)[0][0]
        s = align_scale(est, ref)
        assert s == pytest.approx(s_oracle, abs=1e-12)
        assert s == pytest.approx(2.0, abs=0.02)

    def test_only_joint_pixels_count(self):
        est = np.array([[[1.0, 0.0], [3.0, 1.0]]])
        ref = np.array([[[2.0, 5.0], [0.0, 2.0]]])
        # joint pixels: (0,0) and (1,1) -> s = (1*2 + 1*2) / (1 + 1) = 2
        assert align_scale(est, ref) == pytest.approx(2.0)

    def test_no_joint_pixels_raises(self):
        with pytest.raises(ValueError):
            align_scale(np.zeros((1, 2, 2)), np.ones((1, 2, 2)))


class TestRenderClip:
    def test_identity_roundtrip_full_clip(self, k32):
        clip, depths = plane_scene(k32, t_frames=3)
        traj = identity_traj(3)
        cloud = reconstruct_from_rgbd(clip, depths, traj, k32)
        out, out_depths = render_clip(cloud, traj, k32, splat_radius=0)
        np.testing.assert_array_equal(out.frames, clip.frames)
        assert np.abs(out_depths - depths).max() < 1e-4
