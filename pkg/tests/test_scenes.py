"""Synthetic scenes: analytic depth, dynamic masks, benchmark suite."""

import numpy as np
import pytest

from nvs_forge.camera import project
from nvs_forge.geometry import reconstruct_from_rgbd, render
from nvs_forge.scenes import (
    Box,
    Motion,
    SceneSpec,
    _resolve_phases,
    generate_benchmark,
    generate_scene,
    random_scene_spec,
)
from oracles import ray_depth_oracle


class TestGenerateScene:
    def test_static_scene_static_camera_is_constant(self):
        spec = SceneSpec(frame_count=4, camera_azimuth_start=0.2,
                         camera_azimuth_end=0.2, statics=(), dynamics=())
        frames, depths, traj, k, dyn = generate_scene(spec, 0)
        for t in range(1, 4):
            np.testing.assert_array_equal(frames.frames[t], frames.frames[0])
            np.testing.assert_array_equal(depths[t], depths[0])
        assert not dyn.any()

    def test_every_pixel_has_valid_depth(self):
        spec = random_scene_spec(3)
        _, depths, _, _, _ = generate_scene(spec, 3)
        assert (depths > 0).all()

    def test_depth_matches_scalar_ray_oracle(self, rng):
        for seed in (0, 7):
            spec = random_scene_spec(seed)
            frames, depths, traj, k, dyn = generate_scene(spec, seed)
            phase_rng = np.random.default_rng(seed)
            checker_phase, dyn_phases = _resolve_phases(spec, phase_rng)
            for _ in range(40):
                t = int(rng.integers(0, spec.frame_count))
                u = int(rng.integers(0, spec.width))
                v = int(rng.integers(0, spec.height))
                d_o = ray_depth_oracle(spec, traj[t], k, u, v,
                                       t * spec.frame_dt, checker_phase, dyn_phases)
                assert abs(depths[t, v, u] - d_o) < 1e-9, (seed, t, u, v)

    def test_deterministic_per_seed(self):
        spec = random_scene_spec(11)
        a = generate_scene(spec, 11)
        b = generate_scene(spec, 11)
        np.testing.assert_array_equal(a[0].frames, b[0].frames)
        np.testing.assert_array_equal(a[1], b[1])
        np.testing.assert_array_equal(a[4], b[4])

    def test_moving_box_mask_centroid_advances(self):
        motion = Motion(kind="linear", velocity=(1.0, 0.0, 0.0))  # 0.1 m / frame
        box = Box(center=(-0.4, 0.5, 0.3), size=(0.3, 0.3, 0.3),
                  color=(0.9, 0.2, 0.2), motion=motion)
        spec = SceneSpec(width=64, height=64, frame_count=6, frame_dt=0.1,
                         camera_azimuth_start=0.0, camera_azimuth_end=0.0,
                         dynamics=(box,))
        frames, depths, traj, k, dyn = generate_scene(spec, 0)
        centroids = []
        for t in range(6):
            ys, xs = np.nonzero(dyn[t])
            assert len(xs) > 0
            centroids.append(xs.mean())
        # projection oracle: project the box center at consecutive times
        for t in range(5):
            c0 = np.array(box.center) + np.array(motion.velocity) * (t * 0.1)
            c1 = np.array(box.center) + np.array(motion.velocity) * ((t + 1) * 0.1)
            (u0, _), _ = project(c0, traj[t], k), None
            (u1, _), _ = project(c1, traj[t + 1], k), None
            predicted = u1[0] - u0[0] if False else (u1 - u0)[0]
            measured = centroids[t + 1] - centroids[t]
            assert abs(measured - predicted) < 0.5

    def test_dynamic_mask_partition(self):
        spec = random_scene_spec(5)
        frames, depths, traj, k, dyn = generate_scene(spec, 5)
        # dynamic pixels are a subset of valid pixels; everything else static
        assert (depths[dyn] > 0).all()
        assert dyn.mean() < 0.5

    def test_trajectory_override_shares_content(self):
        spec = random_scene_spec(2)
        frames, depths, traj, k, dyn = generate_scene(spec, 2)
        again, depths2, _, _, _ = generate_scene(spec, 2, trajectory=traj)
        np.testing.assert_array_equal(frames.frames, again.frames)
        np.testing.assert_array_equal(depths, depths2)

    def test_trajectory_override_frame_count_checked(self):
        spec = random_scene_spec(2)
        _, _, traj, _, _ = generate_scene(spec, 2)
        bad = type(traj)(traj.poses[:-1])
        with pytest.raises(ValueError):
            generate_scene(spec, 2, trajectory=bad)


class TestBenchmark:
    @pytest.fixture(scope="class")
    def suite(self):
        return generate_benchmark(99, count=5)

    def test_regeneration_is_bit_identical(self, suite):
        again = generate_benchmark(99, count=5)
        for a, b in zip(suite, again):
            np.testing.assert_array_equal(a.frames.frames, b.frames.frames)
            np.testing.assert_array_equal(a.novel_frames.frames, b.novel_frames.frames)
            for pa, pb in zip(a.novel_traj.poses, b.novel_traj.poses):
                np.testing.assert_array_equal(pa.rotation, pb.rotation)

    def test_covisible_fraction_in_bounds(self, suite):
        # bounds frozen after first generation: the inpainting task must be
        # nontrivial but not hopeless
        for case in suite:
            cloud = reconstruct_from_rgbd(case.frames, case.depths, case.traj,
                                          case.intrinsics, case.dyn_masks)
            cover = np.mean([
                render(cloud.frames[t], case.novel_traj[t], case.intrinsics,
                       splat_radius=1).coverage.mean()
                for t in range(case.frames.frame_count)])
            assert 0.4 <= cover <= 0.95, (case.name, cover)

    def test_novel_ground_truth_roundtrip(self, suite):
        # rendering the source reconstruction from the novel pose reproduces
        # the ray-traced ground truth on covered pixels, up to the sub-pixel
        # color-boundary band (exact-match threshold frozen at 0.80 after the
        # first generation; measured 0.85-0.89 on this suite)
        for case in suite[:2]:
            cloud = reconstruct_from_rgbd(case.frames, case.depths, case.traj,
                                          case.intrinsics, case.dyn_masks)
            match, total = 0, 0
            for t in range(case.frames.frame_count):
                rf = render(cloud.frames[t], case.novel_traj[t], case.intrinsics,
                            splat_radius=0)
                cov = rf.coverage
                exact = np.all(rf.color == case.novel_frames.frames[t], axis=-1)
                match += int((exact & cov).sum())
                total += int(cov.sum())
            assert match / total >= 0.80, case.name

    def test_novel_trajectory_differs_from_source(self, suite):
        for case in suite:
            d = [np.linalg.norm(a.translation - b.translation)
                 for a, b in zip(case.traj.poses, case.novel_traj.poses)]
            assert max(d) > 0.05

    def test_count_validated(self):
        with pytest.raises(ValueError):
            generate_benchmark(0, count=0)
