import numpy as np
import pytest

from lib.config import EnergyConfig
from lib.raster import ImageBuffer


def smooth_image(width, height, seed=0, low=0.1, high=0.9, channels=3):
    """Low-frequency random image; survives repeated bilinear resampling."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    data = np.empty((height, width, channels))
    for c in range(channels):
        fx, fy = rng.uniform(0.5, 1.5, size=2) * 2 * np.pi / np.array([width, height])
        px, py = rng.uniform(0, 2 * np.pi, size=2)
        data[..., c] = 0.5 * (np.sin(fx * xx + px) * np.cos(fy * yy + py) + 1.0)
    return ImageBuffer(low + (high - low) * data)


@pytest.fixture
def make_image():
    return smooth_image


@pytest.fixture
def small_cfg():
    """128x96 raster under a 4x3 mesh."""
    return EnergyConfig(mesh_u=4, mesh_v=3, image_w=128, image_h=96)


@pytest.fixture
def source_dir(tmp_path):
    """Directory of smooth 160x120 source PNGs."""
    from lib.raster import save_image

    src = tmp_path / 'src'
    src.mkdir()
    for k in range(3):
        save_image(smooth_image(160, 120, seed=100 + k), src / f"photo_{k}.png")
    return src
