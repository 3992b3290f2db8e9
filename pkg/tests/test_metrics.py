"""PSNR / SSIM closed forms, oracle comparisons, masked variants."""

import numpy as np
import pytest
from skimage.metrics import structural_similarity as skimage_ssim

from nvs_forge.clips import VideoClip
from nvs_forge.metrics import (
    PSNR_CAP_DB,
    SSIM_C1,
    SSIM_C2,
    MetricReport,
    evaluate_clip,
    psnr,
    ssim,
)


class TestPsnr:
    def test_identical_capped(self, rng):
        a = rng.random((2, 16, 16, 3)).astype(np.float32)
        assert psnr(a, a.copy()) == PSNR_CAP_DB

    def test_mse_001_gives_20db(self):
        a = np.zeros((1, 8, 8, 3))
        b = np.full((1, 8, 8, 3), 0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_all_true_mask_equals_unmasked(self, rng):
        a = rng.random((2, 12, 12, 3)).astype(np.float32)
        b = rng.random((2, 12, 12, 3)).astype(np.float32)
        mask = np.ones((2, 12, 12), dtype=bool)
        assert psnr(a, b, mask) == psnr(a, b)

    def test_empty_mask_raises(self, rng):
        a = rng.random((1, 8, 8, 3)).astype(np.float32)
        with pytest.raises(ValueError):
            psnr(a, a, np.zeros((1, 8, 8), dtype=bool))

    def test_shape_mismatch_raises(self, rng):
        with pytest.raises(ValueError):
            psnr(np.zeros((1, 8, 8, 3)), np.zeros((1, 8, 9, 3)))

    def test_monotone_decreasing_in_mse(self):
        a = np.zeros((1, 8, 8, 3))
        prev = np.inf
        for err in (0.02, 0.05, 0.1, 0.3):
            val = psnr(a, a + err)
            assert val < prev
            prev = val

    def test_symmetric(self, rng):
        a = rng.random((1, 8, 8, 3))
        b = rng.random((1, 8, 8, 3))
        assert psnr(a, b) == psnr(b, a)

    def test_accepts_clips(self, rng):
        f = rng.random((2, 16, 16, 3)).astype(np.float32)
        assert psnr(VideoClip(f), VideoClip(f.copy())) == PSNR_CAP_DB


class TestSsim:
    def test_identical_is_one(self, rng):
        a = rng.random((16, 16, 3)).astype(np.float32)
        assert ssim(a, a.copy()) == pytest.approx(1.0, abs=1e-12)

    def test_anticorrelated_checkerboard_negative(self):
        yy, xx = np.mgrid[0:16, 0:16]
        a = ((yy + xx) % 2).astype(np.float64)[..., None].repeat(3, axis=-1)
        assert ssim(a, 1.0 - a) < 0.0

    def test_constant_images_closed_form(self):
        mu1, mu2 = 0.2, 0.4
        a = np.full((8, 8, 3), mu1)
        b = np.full((8, 8, 3), mu2)
        expected = (2 * mu1 * mu2 + SSIM_C1) / (mu1 ** 2 + mu2 ** 2 + SSIM_C1)
        assert ssim(a, b, window=5) == pytest.approx(expected, abs=1e-6)

    def test_window_larger_than_image_raises(self, rng):
        a = rng.random((8, 8, 3))
        with pytest.raises(ValueError):
            ssim(a, a)

    def test_matches_skimage_reference(self, rng):
        for _ in range(5):
            a = rng.random((24, 24)).astype(np.float64)
            b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
            ref = skimage_ssim(a, b, win_size=11, data_range=1.0,
                               gaussian_weights=True, sigma=1.5,
                               use_sample_covariance=False)
            # skimage averages over the full (crop-padded) map; compare on
            # interior-only maps by cropping its padded border
            mine = ssim(a[..., None].repeat(3, -1), b[..., None].repeat(3, -1))
            assert mine == pytest.approx(ref, abs=2e-3)

    def test_symmetric(self, rng):
        a = rng.random((16, 16, 3))
        b = rng.random((16, 16, 3))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


class TestEvaluateClip:
    def test_identity_report(self, rng):
        f = rng.random((3, 16, 16, 3)).astype(np.float32)
        clip = VideoClip(f)
        mask = np.ones((3, 16, 16), dtype=bool)
        rep = evaluate_clip(clip, VideoClip(f.copy()), mask)
        assert rep.psnr == PSNR_CAP_DB
        assert rep.ssim == pytest.approx(1.0, abs=1e-12)
        assert rep.m_psnr == PSNR_CAP_DB
        assert rep.m_ssim == pytest.approx(1.0, abs=1e-12)
        assert rep.pixel_count == 3 * 16 * 16
        assert rep.masked_pixel_count == 3 * 16 * 16
        assert len(rep.per_frame) == 3

    def test_deterministic_and_json_roundtrip(self, rng):
        a = VideoClip(rng.random((2, 16, 16, 3)).astype(np.float32))
        b = VideoClip(rng.random((2, 16, 16, 3)).astype(np.float32))
        r1 = evaluate_clip(a, b)
        r2 = evaluate_clip(a, b)
        assert r1.to_json() == r2.to_json()
        back = MetricReport.from_json(r1.to_json())
        assert back.psnr == r1.psnr

    def test_masked_metrics_equal_cropped_region(self, rng):
        # half-true rectangular mask == unmasked metrics of the crop
        h, w = 24, 32
        a = rng.random((2, h, w, 3)).astype(np.float32)
        b = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1).astype(np.float32)
        mask = np.zeros((2, h, w), dtype=bool)
        mask[:, :, : w // 2] = True
        rep = evaluate_clip(VideoClip(a), VideoClip(b), mask)
        crop = evaluate_clip(VideoClip(a[:, :, : w // 2]), VideoClip(b[:, :, : w // 2]))
        assert rep.m_psnr == pytest.approx(crop.psnr, abs=1e-9)
        assert rep.m_ssim == pytest.approx(crop.ssim, abs=1e-9)

    def test_empty_mask_frames_dropped(self, rng):
        f = rng.random((2, 16, 16, 3)).astype(np.float32)
        mask = np.zeros((2, 16, 16), dtype=bool)
        mask[0] = True
        rep = evaluate_clip(VideoClip(f), VideoClip(f.copy()), mask)
        assert rep.per_frame[1]["m_psnr"] is None
        assert rep.m_psnr == PSNR_CAP_DB

    def test_shape_mismatch_raises(self, rng):
        a = VideoClip(rng.random((1, 16, 16, 3)).astype(np.float32))
        b = VideoClip(rng.random((2, 16, 16, 3)).astype(np.float32))
        with pytest.raises(ValueError):
            evaluate_clip(a, b)
