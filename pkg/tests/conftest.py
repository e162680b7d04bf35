import numpy as np
import pytest

from agglom.raster import BinaryMask, GrayImage


def disk_mask(shape, cy, cx, r) -> np.ndarray:
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    return (yy - cy) ** 2 + (xx - cx) ** 2 < r * r


@pytest.fixture
def rng():
    return np.random.default_rng(20250808)


@pytest.fixture
def constant_image():
    return GrayImage(np.full((16, 16), 0.5))


@pytest.fixture
def dumbbell_mask():
    """Two tangent disks of radius 30, centers 60 apart."""
    m = disk_mask((140, 160), 70, 50, 30) | disk_mask((140, 160), 70, 110, 30)
    return BinaryMask(m)
