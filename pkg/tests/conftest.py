import numpy as np
import pytest

from nvs_forge.camera import CameraPose, PinholeIntrinsics, so3_exp


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def k32():
    """Square toy intrinsics matching the 32x32 synthetic scenes."""
    return PinholeIntrinsics(fx=30.0, fy=30.0, cx=15.5, cy=15.5, width=32, height=32)


def random_pose(rng, t_scale: float = 2.0) -> CameraPose:
    rotvec = rng.normal(size=3)
    return CameraPose(so3_exp(rotvec), rng.normal(size=3) * t_scale)


@pytest.fixture
def make_pose(rng):
    return lambda: random_pose(rng)
