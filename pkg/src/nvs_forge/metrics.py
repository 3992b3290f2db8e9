"""Photometric evaluation: PSNR, SSIM and their masked variants.

SSIM uses the reference configuration: 11 x 11 Gaussian window, sigma 1.5,
c1 = 0.01^2 and c2 = 0.03^2 on unit dynamic range, sample statistics without
Bessel correction. Masked SSIM averages the local SSIM map over window
centers whose full window lies inside the mask, which makes it exactly equal
to the unmasked SSIM of the cropped region for rectangular masks. PSNR of
identical inputs is capped at 99 dB so reports stay finite and sortable.
Metrics are computed at the native resolution of their inputs; mismatched
shapes are an error, never a silent resize.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import convolve, minimum_filter

from nvs_forge.clips import VideoClip
from nvs_forge.geometry import CovisibilityMask

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

REPORT_SCHEMA_VERSION = 1


def _frames_of(x) -> np.ndarray:
    if isinstance(x, VideoClip):
        return x.frames
    return np.asarray(x)


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"inputs differ in shape: {a.shape} vs {b.shape}")


def psnr(a, b, mask: np.ndarray | None = None) -> float:
    """PSNR in dB over all (or mask-true) pixels, MAX = 1.0, capped at 99 dB."""
    fa = _frames_of(a).astype(np.float64)
    fb = _frames_of(b).astype(np.float64)
    _check_pair(fa, fb)
    se = (fa - fb) ** 2
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != fa.shape[:-1]:
            raise ValueError(f"mask shape {m.shape} does not match image {fa.shape[:-1]}")
        if not m.any():
            raise ValueError("mask selects no pixels")
        mse = float(se[m].mean())
    else:
        mse = float(se.mean())
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(float(10.0 * np.log10(1.0 / mse)), PSNR_CAP_DB)


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    r = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _ssim_map_single(a: np.ndarray, b: np.ndarray, window: int, sigma: float,
                     c1: float, c2: float) -> np.ndarray:
    """Local SSIM map of one channel, valid window centers only."""
    kern = _gaussian_kernel(window, sigma)

    def filt(x):
        full = convolve(x, kern, mode="constant")
        r = window // 2
        return full[r:x.shape[0] - r, r:x.shape[1] - r]

    mu_a = filt(a)
    mu_b = filt(b)
    aa = filt(a * a) - mu_a * mu_a
    bb = filt(b * b) - mu_b * mu_b
    ab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * ab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (aa + bb + c2)
    return num / den


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW,
             sigma: float = SSIM_SIGMA, c1: float = SSIM_C1, c2: float = SSIM_C2,
             ) -> np.ndarray:
    """Channel-averaged local SSIM map of one image pair, valid centers only."""
    fa = np.asarray(a, dtype=np.float64)
    fb = np.asarray(b, dtype=np.float64)
    _check_pair(fa, fb)
    if fa.shape[0] < window or fa.shape[1] < window:
        raise ValueError(f"image {fa.shape[:2]} smaller than the {window}x{window} window")
    if fa.ndim == 2:
        fa = fa[..., None]
        fb = fb[..., None]
    maps = [_ssim_map_single(fa[..., c], fb[..., c], window, sigma, c1, c2)
            for c in range(fa.shape[-1])]
    return np.mean(maps, axis=0)


def _window_interior(mask: np.ndarray, window: int) -> np.ndarray:
    """Centers (in valid-map coordinates) whose full window is mask-true."""
    r = window // 2
    inside = minimum_filter(mask.astype(np.uint8), size=window,
                            mode="constant", cval=0).astype(bool)
    return inside[r:mask.shape[0] - r, r:mask.shape[1] - r]


def ssim(a, b, mask: np.ndarray | None = None, window: int = SSIM_WINDOW,
         sigma: float = SSIM_SIGMA, c1: float = SSIM_C1, c2: float = SSIM_C2) -> float:
    """Mean local SSIM of a frame (or clip, averaged per frame then across).

    With a mask, the mean runs over window centers whose full window lies
    inside the mask; an error is raised when no center qualifies.
    """
    fa = _frames_of(a)
    fb = _frames_of(b)
    _check_pair(fa, fb)
    if fa.ndim == 3:
        fa = fa[None]
        fb = fb[None]
        if mask is not None and np.asarray(mask).ndim == 2:
            mask = np.asarray(mask)[None]
    vals = []
    for t in range(fa.shape[0]):
        m = ssim_map(fa[t], fb[t], window, sigma, c1, c2)
        if mask is None:
            vals.append(m.mean())
        else:
            sel = _window_interior(np.asarray(mask, dtype=bool)[t], window)
            if not sel.any():
                raise ValueError(f"frame {t}: no full SSIM window fits inside the mask")
            vals.append(m[sel].mean())
    return float(np.mean(vals))


@dataclass
class MetricReport:
    """Clip-level photometric report; aggregates are frame means."""

    psnr: float
    ssim: float
    m_psnr: float | None
    m_ssim: float | None
    per_frame: list
    pixel_count: int
    masked_pixel_count: int
    schema_version: int = REPORT_SCHEMA_VERSION
    # reserved for external tools that merge learned perceptual metrics
    lpips: float | None = None
    fid: float | None = None
    kid: float | None = None

    def to_json(self, **kwargs) -> str:
        return json.dumps(asdict(self), sort_keys=True, **kwargs)

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        return MetricReport(**json.loads(text))


def evaluate_clip(pred: VideoClip, gt: VideoClip,
                  covis: CovisibilityMask | np.ndarray | None = None) -> MetricReport:
    """Full report: PSNR/SSIM plus masked variants over the co-visible pixels.

    Per-frame values are averaged arithmetically into the clip aggregates.
    Frames whose mask is empty (or admits no full SSIM window) contribute no
    masked value; if that happens on every frame the masked aggregate is None.
    """
    fp = _frames_of(pred)
    fg = _frames_of(gt)
    _check_pair(fp, fg)
    mask = None
    if covis is not None:
        mask = covis.mask if isinstance(covis, CovisibilityMask) else np.asarray(covis, dtype=bool)
        if mask.shape != fp.shape[:3]:
            raise ValueError(f"mask shape {mask.shape} does not match clips {fp.shape[:3]}")

    per_frame = []
    for t in range(fp.shape[0]):
        row = {
            "frame": t,
            "psnr": psnr(fp[t], fg[t]),
            "ssim": ssim(fp[t], fg[t]),
            "m_psnr": None,
            "m_ssim": None,
        }
        if mask is not None and mask[t].any():
            row["m_psnr"] = psnr(fp[t], fg[t], mask[t])
            try:
                row["m_ssim"] = ssim(fp[t], fg[t], mask[t])
            except ValueError:
                row["m_ssim"] = None
        per_frame.append(row)

    def agg(key):
        vals = [r[key] for r in per_frame if r[key] is not None]
        return float(np.mean(vals)) if vals else None

    return MetricReport(
        psnr=agg("psnr"), ssim=agg("ssim"),
        m_psnr=agg("m_psnr"), m_ssim=agg("m_ssim"),
        per_frame=per_frame,
        pixel_count=int(np.prod(fp.shape[:3])),
        masked_pixel_count=int(mask.sum()) if mask is not None else 0,
    )
