import numpy as np
import pytest

from lib.metrics import (PSNR_CAP, MetricError, evaluate_directories, interior_mask, psnr,
                         psnr_in_region, sample_key, ssim)
from lib.raster import ImageBuffer, MaskBuffer, load_image, save_image


def constant(value, width=32, height=24):
    return ImageBuffer(np.full((height, width, 3), value))


def test_psnr_known_values():
    assert psnr(constant(0.3), constant(0.3)) == PSNR_CAP
    assert psnr(constant(0.0), constant(1.0)) == pytest.approx(0.0)
    assert psnr(constant(0.4), constant(0.5)) == pytest.approx(20.0)
    assert psnr(constant(0.5), constant(0.5 + 1e-12)) == PSNR_CAP


def test_psnr_rejects_shape_mismatch():
    with pytest.raises(MetricError):
        psnr(constant(0.1), constant(0.1, width=16))


def test_psnr_in_region():
    a = constant(0.5)
    data = np.full((24, 32, 3), 0.5)
    data[:, 16:] = 0.0
    b = ImageBuffer(data)
    left = np.zeros((24, 32), dtype=bool)
    left[:, :16] = True
    assert psnr_in_region(a, b, left) == PSNR_CAP
    assert psnr_in_region(a, b, ~left) == pytest.approx(10 * np.log10(4.0))
    with pytest.raises(MetricError):
        psnr_in_region(a, b, np.zeros((24, 32), dtype=bool))
    with pytest.raises(MetricError):
        psnr_in_region(a, b, np.ones((10, 10), dtype=bool))


def test_interior_mask_erodes_from_void_and_border():
    data = np.ones((20, 20))
    data[:, :5] = 0.0
    region = interior_mask(MaskBuffer(data), erosion=2)
    assert not region[:, :7].any()
    assert region[2:-2, 7:-2].all()
    assert not region[:2].any() and not region[:, -2:].any()
    assert interior_mask(MaskBuffer(data), erosion=0).sum() == 20 * 15


def test_ssim_identity_and_inversion(make_image):
    a = make_image(64, 48, seed=3)
    assert ssim(a, a) == pytest.approx(1.0)
    noise = ImageBuffer(np.random.default_rng(0).uniform(0, 1, size=(48, 64, 3)))
    inverted = ssim(noise, ImageBuffer(1.0 - noise.data))
    assert -1.0 <= inverted <= 0.0


def test_ssim_rejects_tiny_images():
    with pytest.raises(MetricError):
        ssim(constant(0.1, 8, 8), constant(0.1, 8, 8))


def windowed_ssim(x, y, size=11, sigma=1.5):
    """Mean SSIM over every window lying fully inside the image, one window at a time."""
    offsets = np.arange(size) - size // 2
    g = np.exp(-offsets ** 2 / (2 * sigma ** 2))
    weights = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    r = size // 2
    values = []
    for row in range(r, x.shape[0] - r):
        for col in range(r, x.shape[1] - r):
            px = x[row - r:row + r + 1, col - r:col + r + 1]
            py = y[row - r:row + r + 1, col - r:col + r + 1]
            mx, my = np.sum(weights * px), np.sum(weights * py)
            vx = np.sum(weights * px * px) - mx * mx
            vy = np.sum(weights * py * py) - my * my
            cxy = np.sum(weights * px * py) - mx * my
            values.append(((2 * mx * my + c1) * (2 * cxy + c2))
                          / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(values))


@pytest.mark.parametrize('seed', range(10))
def test_ssim_matches_windowed_definition(seed):
    rng = np.random.default_rng(seed)
    a = ImageBuffer(rng.uniform(0, 1, size=(24, 30, 3)))
    b = ImageBuffer(np.clip(a.data + rng.normal(0, 0.1 + 0.05 * seed, size=a.data.shape), 0, 1))
    assert ssim(a, b) == pytest.approx(windowed_ssim(a.gray(), b.gray()), abs=1e-4)


def test_sample_key():
    from pathlib import Path
    assert sample_key(Path('gt_00012.png')) == '00012'
    assert sample_key(Path('scan_2_00012.png')) == '00012'
    assert sample_key(Path('beach.png')) == 'beach'


@pytest.fixture
def eval_dirs(tmp_path, make_image):
    gt_dir = tmp_path / 'data'
    pred_dir = tmp_path / 'pred'
    for k in range(3):
        label = make_image(64, 48, seed=k)
        save_image(label, gt_dir / f"gt_{k:05d}.png")
        save_image(ImageBuffer(np.clip(label.data + 0.08, 0, 1)), gt_dir / f"input_{k:05d}.png")
        if k < 2:
            save_image(ImageBuffer(np.clip(label.data + 0.02, 0, 1)), pred_dir / f"out_{k:05d}.png")
    return pred_dir, gt_dir


def test_evaluate_directories(eval_dirs):
    pred_dir, gt_dir = eval_dirs
    report = evaluate_directories(str(pred_dir), str(gt_dir))

    assert report.count == 2
    assert report.missing == ['gt_00002.png']
    expected = [psnr(load_image(pred_dir / f"out_{k:05d}.png"), load_image(gt_dir / f"gt_{k:05d}.png"))
                for k in range(2)]
    assert report.mean_psnr == pytest.approx(np.mean(expected))
    assert 'baseline' not in report.to_dict()


def test_evaluate_directories_with_baseline(eval_dirs):
    pred_dir, gt_dir = eval_dirs
    summary = evaluate_directories(str(pred_dir), str(gt_dir), baseline_dir=str(gt_dir)).to_dict()
    assert summary['baseline']['psnr_gain'] > 0
    assert summary['baseline']['psnr_gain'] == pytest.approx(
        summary['mean_psnr'] - summary['baseline']['mean_psnr'])


def test_evaluate_directories_missing_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        evaluate_directories(str(tmp_path / 'nope'), str(tmp_path))
