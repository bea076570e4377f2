"""Synthetic (stitched, mask, label) triplets by inverse mesh warping."""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image
from scipy.interpolate import RegularGridInterpolator

from .config import DEFAULT_ALPHA, EnergyConfig
from .energy import intra_grid_loss
from .mesh import (MeshGrid, MeshMotion, apply_motion, build_rigid_mesh, cell_jacobians,
                   footprint_area, mesh_to_json, rigid_extent)
from .metrics import interior_mask, psnr_in_region
from .raster import (ImageBuffer, MaskBuffer, RasterError, from_pil, load_image, load_mask, save_image,
                     save_mask, to_pil)
from .warp import warp_from_rigid, warp_mask_to_rigid, warp_to_rigid

logger = logging.getLogger(__name__)

VOID_RANGE = (0.10, 0.40)
VOID_TARGET = (0.13, 0.37)
MAX_PROJECTION_ATTEMPTS = 100
MAX_SAMPLE_ATTEMPTS = 10
ROUND_TRIP_MIN_PSNR = 30.0
DEFAULT_MAGNITUDE = 32.0
SPLIT_COUNTS = {'train': 5839, 'test': 519}


class DatasetError(Exception):
    """Raised when a deformation or dataset cannot be produced."""
    pass


@dataclass
class Triplet:
    """Stitched image I, mask M and rectangling label R with their generator."""
    stitched: ImageBuffer
    mask: MaskBuffer
    label: ImageBuffer
    generator_motion: MeshMotion
    seed: Optional[int] = None

    @property
    def void_fraction(self) -> float:
        return self.mask.void_fraction()


def _smooth_field(rng: np.random.Generator, rows: int, cols: int, amplitude: float) -> np.ndarray:
    """Random 3x3 control values bilinearly upsampled to the vertex grid."""
    coarse = rng.uniform(-1.0, 1.0, size=(3, 3, 2)) * amplitude
    axis = np.linspace(0.0, 1.0, 3)
    interp = RegularGridInterpolator((axis, axis), coarse, method='linear')
    gi, gj = np.meshgrid(np.linspace(0.0, 1.0, rows), np.linspace(0.0, 1.0, cols), indexing='ij')
    points = np.stack([gi.ravel(), gj.ravel()], axis=-1)
    return interp(points).reshape(rows, cols, 2)


def _inset_field(rng: np.random.Generator, rows: int, cols: int, magnitude: float) -> np.ndarray:
    """Inward pull of each border, blended linearly across the grid."""
    top = rng.uniform(0.0, magnitude, size=cols)
    bottom = rng.uniform(0.0, magnitude, size=cols)
    left = rng.uniform(0.0, magnitude, size=rows)
    right = rng.uniform(0.0, magnitude, size=rows)
    wi = (np.arange(rows) / (rows - 1))[:, None]
    wj = (np.arange(cols) / (cols - 1))[None, :]
    inset = np.zeros((rows, cols, 2))
    inset[..., 0] = left[:, None] * (1 - wj) - right[:, None] * wj
    inset[..., 1] = top[None, :] * (1 - wi) - bottom[None, :] * wi
    return inset


def _void_estimate(rigid: MeshGrid, offsets: np.ndarray) -> float:
    width, height = rigid_extent(rigid)
    return 1.0 - footprint_area(MeshGrid(rigid.vertices + offsets)) / (width * height)


def _inset_scale(rigid: MeshGrid, field: np.ndarray, inset: np.ndarray) -> Optional[float]:
    """Scale of the inset that brings the estimated void fraction into VOID_TARGET."""
    lo_target, hi_target = VOID_TARGET
    void = _void_estimate(rigid, field + inset)
    if lo_target <= void <= hi_target:
        return 1.0
    target = lo_target if void < lo_target else hi_target
    lo, hi = 0.0, 1.0
    if void < lo_target:
        while _void_estimate(rigid, field + hi * inset) < target:
            lo, hi = hi, hi * 2.0
            if hi > 64.0:
                return None
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _void_estimate(rigid, field + mid * inset) < target:
            lo = mid
        else:
            hi = mid
    return hi


def _is_valid(rigid: MeshGrid, offsets: np.ndarray, alpha: float) -> bool:
    mesh = MeshGrid(rigid.vertices + offsets)
    width, height = rigid_extent(rigid)
    v = mesh.vertices
    if (np.any(v[..., 0] < 0) or np.any(v[..., 0] > width)
            or np.any(v[..., 1] < 0) or np.any(v[..., 1] > height)):
        return False
    if np.any(cell_jacobians(mesh) <= 0):
        return False
    cfg = EnergyConfig(mesh_u=rigid.rows - 1, mesh_v=rigid.cols - 1, alpha=alpha,
                       image_w=int(round(width)), image_h=int(round(height)))
    return intra_grid_loss([mesh], cfg) == 0.0


def random_deformation(rigid: MeshGrid, magnitude: float, rng_seed: int,
                       alpha: float = DEFAULT_ALPHA) -> MeshMotion:
    """Smooth random motion whose mesh has an irregular, inset outline.

    A low-frequency field (amplitude magnitude/2, zero across the borders) is added to
    an inward pull of each border vertex drawn from [0, magnitude]. The pull is rescaled
    until the outline leaves 10-40% of the raster void, and the draw is repeated until
    every cell has a positive Jacobian and no edge violates the intra-grid threshold.
    """
    if magnitude < 0:
        raise DatasetError(f"Deformation magnitude must be >= 0, got {magnitude}")
    rows, cols = rigid.shape
    if magnitude == 0:
        return MeshMotion.zeros(rows, cols)

    rng = np.random.default_rng(rng_seed)
    for attempt in range(MAX_PROJECTION_ATTEMPTS):
        field = _smooth_field(rng, rows, cols, 0.5 * magnitude)
        field[0, :, 1] = 0.0
        field[-1, :, 1] = 0.0
        field[:, 0, 0] = 0.0
        field[:, -1, 0] = 0.0
        inset = _inset_field(rng, rows, cols, magnitude)
        scale = _inset_scale(rigid, field, inset)
        if scale is None:
            continue
        offsets = field + scale * inset
        if _is_valid(rigid, offsets, alpha):
            logger.debug("Deformation for seed %d accepted after %d attempts", rng_seed, attempt + 1)
            return MeshMotion(offsets)
    raise DatasetError(
        f"Could not project a valid deformation after {MAX_PROJECTION_ATTEMPTS} attempts (seed {rng_seed})"
    )


def synthesize_triplet(rect: ImageBuffer, motion: MeshMotion, cfg: EnergyConfig,
                       seed: Optional[int] = None) -> Triplet:
    """Warp a rectangular image onto rigid+motion; the coverage becomes the mask."""
    rigid = build_rigid_mesh(rect.width, rect.height, cfg.mesh_u, cfg.mesh_v)
    mesh = apply_motion(rigid, motion)
    stitched, mask = warp_from_rigid(rect, rigid, mesh, rect.width, rect.height, fill=0.0)
    return Triplet(stitched=stitched, mask=mask, label=rect, generator_motion=motion, seed=seed)


def round_trip_psnr(triplet: Triplet, cfg: EnergyConfig, erosion: int = 2) -> float:
    """PSNR of the generator warp back to the rigid raster against the label, on the eroded interior."""
    rect = triplet.label
    rigid = build_rigid_mesh(rect.width, rect.height, cfg.mesh_u, cfg.mesh_v)
    mesh = apply_motion(rigid, triplet.generator_motion)
    recovered = warp_to_rigid(triplet.stitched, mesh, rigid)
    region = interior_mask(warp_mask_to_rigid(triplet.mask, mesh, rigid), erosion)
    return psnr_in_region(recovered, rect, region)


def fit_to_raster(image: ImageBuffer, width: int, height: int) -> Optional[ImageBuffer]:
    """Centre-crop to the target aspect and downscale; None when the source is too small."""
    if image.width < width or image.height < height:
        return None
    if image.size == (width, height):
        return image
    target = width / height
    crop_w, crop_h = image.width, image.height
    if crop_w / crop_h > target:
        crop_w = int(round(crop_h * target))
    else:
        crop_h = int(round(crop_w / target))
    left = (image.width - crop_w) // 2
    top = (image.height - crop_h) // 2
    img = to_pil(image).crop((left, top, left + crop_w, top + crop_h))
    return from_pil(img.resize((width, height), Image.BILINEAR))


def sample_seed(seed: int, index: int, attempt: int) -> int:
    return int(np.random.SeedSequence([seed, index, attempt]).generate_state(1)[0])


def _load_sources(src_dir: Path, width: int, height: int) -> List[Tuple[str, ImageBuffer]]:
    usable = []
    for path in sorted(src_dir.glob('*.png')):
        try:
            image = load_image(path)
        except RasterError as e:
            logger.warning("Skipping unreadable source %s: %s", path.name, e)
            continue
        fitted = fit_to_raster(image, width, height)
        if fitted is None:
            logger.warning("Skipping undersized source %s (%dx%d < %dx%d)",
                           path.name, image.width, image.height, width, height)
            continue
        usable.append((path.name, fitted))
    return usable


def build_dataset(src_dir: str, out_dir: str, count: int, cfg: EnergyConfig, seed: int,
                  magnitude: float = DEFAULT_MAGNITUDE, split: Optional[str] = None) -> Dict:
    """Write `count` triplets plus manifest.json; deterministic from (sources, seed)."""
    if count < 0:
        raise DatasetError(f"Count must be >= 0, got {count}")
    if split is not None and split not in SPLIT_COUNTS:
        raise DatasetError(f"Unknown split '{split}'. Valid: {', '.join(SPLIT_COUNTS)}")
    manifest = {
        'count': 0,
        'seed': seed,
        'split': split,
        'magnitude': magnitude,
        'mesh': f"{cfg.mesh_u}x{cfg.mesh_v}",
        'size': f"{cfg.image_w}x{cfg.image_h}",
        'samples': [],
    }
    if count == 0:
        return manifest

    src_path = Path(src_dir)
    if not src_path.is_dir():
        raise FileNotFoundError(f"Source directory not found: {src_path}")
    sources = _load_sources(src_path, cfg.image_w, cfg.image_h)
    if not sources:
        raise DatasetError(f"No usable source images in {src_path}")

    out_path = Path(out_dir) / split if split else Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    rigid = build_rigid_mesh(cfg.image_w, cfg.image_h, cfg.mesh_u, cfg.mesh_v)

    for index in range(count):
        name, rect = sources[index % len(sources)]
        for attempt in range(MAX_SAMPLE_ATTEMPTS):
            triplet_seed = sample_seed(seed, index, attempt)
            motion = random_deformation(rigid, magnitude, triplet_seed, cfg.alpha)
            triplet = synthesize_triplet(rect, motion, cfg, triplet_seed)
            void = triplet.void_fraction
            quality = round_trip_psnr(triplet, cfg)
            if VOID_RANGE[0] <= void <= VOID_RANGE[1] and quality >= ROUND_TRIP_MIN_PSNR:
                break
            logger.warning("Rejected sample %d attempt %d (void %.3f, round trip %.2f dB)",
                           index, attempt, void, quality)
        else:
            raise DatasetError(f"Sample {index} failed validation {MAX_SAMPLE_ATTEMPTS} times (seed {seed})")

        tag = f"{index:05d}"
        save_image(triplet.stitched, out_path / f"input_{tag}.png")
        save_mask(triplet.mask, out_path / f"mask_{tag}.png")
        save_image(triplet.label, out_path / f"gt_{tag}.png")
        (out_path / f"mesh_{tag}.json").write_text(mesh_to_json(apply_motion(rigid, motion)))
        manifest['samples'].append({
            'index': index,
            'source': name,
            'seed': triplet_seed,
            'void_fraction': round(void, 6),
            'round_trip_psnr': round(quality, 4),
        })
        logger.info("Triplet %s from %s: void %.3f", tag, name, void)

    manifest['count'] = len(manifest['samples'])
    (out_path / 'manifest.json').write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_triplets(data_dir: str, limit: Optional[int] = None) -> List[Tuple[str, ImageBuffer, MaskBuffer, ImageBuffer]]:
    """(tag, stitched, mask, label) for every complete input_/mask_/gt_ set in a dataset directory."""
    data_path = Path(data_dir)
    if not data_path.is_dir():
        raise FileNotFoundError(f"Dataset directory not found: {data_path}")
    triplets = []
    for input_path in sorted(data_path.glob('input_*.png')):
        tag = input_path.stem[len('input_'):]
        mask_path = data_path / f"mask_{tag}.png"
        gt_path = data_path / f"gt_{tag}.png"
        if not (mask_path.exists() and gt_path.exists()):
            logger.warning("Skipping incomplete triplet %s", tag)
            continue
        triplets.append((tag, load_image(input_path), load_mask(mask_path), load_image(gt_path)))
        if limit is not None and len(triplets) >= limit:
            break
    return triplets
