"""PSNR / SSIM metrics and directory evaluation."""

import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy import ndimage
from skimage.metrics import structural_similarity

from .raster import ImageBuffer, MaskBuffer, load_image

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


class MetricError(ValueError):
    """Raised when images cannot be compared."""
    pass


def _check_pair(a: ImageBuffer, b: ImageBuffer):
    if a.data.shape != b.data.shape:
        raise MetricError(f"Image shapes differ: {a.data.shape} vs {b.data.shape}")


def _psnr_from_mse(mse: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0; identical images report 99 dB."""
    _check_pair(a, b)
    return _psnr_from_mse(float(np.mean((a.data - b.data) ** 2)))


def psnr_in_region(a: ImageBuffer, b: ImageBuffer, region: np.ndarray) -> float:
    """PSNR restricted to the pixels where region is True."""
    _check_pair(a, b)
    if region.shape != a.data.shape[:2]:
        raise MetricError(f"Region is {region.shape}, images are {a.data.shape[:2]}")
    if not np.any(region):
        raise MetricError("Region is empty")
    return _psnr_from_mse(float(np.mean((a.data[region] - b.data[region]) ** 2)))


def interior_mask(mask: MaskBuffer, erosion: int = 2) -> np.ndarray:
    """Pixels fully covered by the mask, eroded by `erosion` pixels (raster border counts as void)."""
    full = mask.data >= 1.0 - 1e-9
    if erosion <= 0:
        return full
    return ndimage.binary_erosion(full, iterations=erosion)


def ssim(a: ImageBuffer, b: ImageBuffer) -> float:
    """Single-scale SSIM on luma, 11x11 Gaussian window (sigma 1.5), mean over valid windows."""
    _check_pair(a, b)
    if a.width < SSIM_WINDOW or a.height < SSIM_WINDOW:
        raise MetricError(f"Images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    return float(structural_similarity(
        a.gray(), b.gray(),
        gaussian_weights=True, sigma=SSIM_SIGMA,
        use_sample_covariance=False, data_range=1.0,
    ))


@dataclass
class ImageScore:
    name: str
    psnr: float
    ssim: float
    baseline_psnr: Optional[float] = None
    baseline_ssim: Optional[float] = None


@dataclass
class EvalReport:
    """Per-image scores and dataset means."""
    images: List[ImageScore] = field(default_factory=list)
    missing: List[str] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.images)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([s.psnr for s in self.images])) if self.images else 0.0

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([s.ssim for s in self.images])) if self.images else 0.0

    @property
    def has_baseline(self) -> bool:
        return bool(self.images) and all(s.baseline_psnr is not None for s in self.images)

    def to_dict(self) -> Dict:
        report = {
            'count': self.count,
            'missing': list(self.missing),
            'mean_psnr': self.mean_psnr,
            'mean_ssim': self.mean_ssim,
            'images': [asdict(s) for s in self.images],
        }
        if self.has_baseline:
            base_psnr = float(np.mean([s.baseline_psnr for s in self.images]))
            base_ssim = float(np.mean([s.baseline_ssim for s in self.images]))
            report['baseline'] = {
                'mean_psnr': base_psnr,
                'mean_ssim': base_ssim,
                'psnr_gain': self.mean_psnr - base_psnr,
                'ssim_gain': self.mean_ssim - base_ssim,
            }
        return report


def sample_key(path: Path) -> str:
    """Pairing key for a file: its last run of digits, else its stem."""
    digits = re.findall(r'\d+', path.stem)
    return digits[-1] if digits else path.stem


def _index_pngs(directory: Path, prefix: Optional[str] = None) -> Dict[str, Path]:
    files = {}
    for path in sorted(directory.glob('*.png')):
        if prefix and not path.name.startswith(prefix):
            continue
        files.setdefault(sample_key(path), path)
    return files


def evaluate_directories(pred_dir: str, gt_dir: str,
                         baseline_dir: Optional[str] = None) -> EvalReport:
    """Score every prediction against the ground truth sharing its index.

    Ground-truth directories written by the synthesizer hold inputs and masks too,
    so files there are restricted to the gt_ prefix when any exist.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for directory in (pred_dir, gt_dir):
        if not directory.is_dir():
            raise FileNotFoundError(f"Directory not found: {directory}")

    gt_prefix = 'gt_' if any(gt_dir.glob('gt_*.png')) else None
    gt_files = _index_pngs(gt_dir, gt_prefix)
    pred_files = _index_pngs(pred_dir)
    baseline_files = {}
    if baseline_dir is not None:
        base_path = Path(baseline_dir)
        base_prefix = 'input_' if any(base_path.glob('input_*.png')) else None
        baseline_files = _index_pngs(base_path, base_prefix)

    report = EvalReport()
    for key in sorted(gt_files):
        if key not in pred_files:
            report.missing.append(gt_files[key].name)
            logger.warning("No prediction for %s", gt_files[key].name)
            continue
        gt = load_image(gt_files[key])
        pred = load_image(pred_files[key])
        score = ImageScore(name=pred_files[key].name, psnr=psnr(pred, gt), ssim=ssim(pred, gt))
        if key in baseline_files:
            base = load_image(baseline_files[key])
            score.baseline_psnr = psnr(base, gt)
            score.baseline_ssim = ssim(base, gt)
        report.images.append(score)
    return report
