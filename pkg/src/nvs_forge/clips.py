"""Video clips: frame stacks with an optional per-pixel validity mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class VideoClip:
    """T x H x W x 3 RGB frames in [0, 1] plus an optional validity mask.

    `validity` is None (everything valid) or a T x H x W boolean array;
    False marks pixels carrying no observation (rendered holes, masked-out
    conditioning, missing depth).
    """

    frames: np.ndarray
    validity: np.ndarray | None = None

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim != 4 or f.shape[-1] != 3:
            raise ValueError(f"frames must be (T, H, W, 3), got {f.shape}")
        self.frames = f
        if self.validity is not None:
            v = np.asarray(self.validity, dtype=bool)
            if v.shape != f.shape[:3]:
                raise ValueError(
                    f"validity shape {v.shape} does not match frames {f.shape[:3]}")
            self.validity = v

    @property
    def shape(self) -> tuple:
        return self.frames.shape

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    def validity_mask(self) -> np.ndarray:
        """The validity mask, materialized as all-true when absent."""
        if self.validity is None:
            return np.ones(self.frames.shape[:3], dtype=bool)
        return self.validity

    def copy(self) -> "VideoClip":
        return VideoClip(self.frames.copy(),
                         None if self.validity is None else self.validity.copy())

    def masked(self, mask: np.ndarray) -> "VideoClip":
        """Zero out pixels where `mask` is False and record it as validity."""
        m = np.asarray(mask, dtype=bool)
        if m.shape != self.frames.shape[:3]:
            raise ValueError(f"mask shape {m.shape} does not match clip {self.frames.shape[:3]}")
        combined = m & self.validity_mask()
        return VideoClip(np.where(combined[..., None], self.frames, 0.0).astype(np.float32),
                         combined)
