"""Per-image mesh-motion recovery: primary pass, then residual refinement."""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .config import EnergyConfig, OptimizerSettings
from .energy import EnergyBreakdown, Objective
from .features import FeatureExtractor, PyramidFeatures
from .mesh import MeshGrid, MeshMotion, apply_motion, build_rigid_mesh
from .raster import ImageBuffer, MaskBuffer, resize_image, resize_mask
from .warp import warp_to_rigid

logger = logging.getLogger(__name__)

MEGAPIXEL = 1_000_000


class NumericalError(Exception):
    """Raised when the objective becomes non-finite."""
    pass


@dataclass
class StageResult:
    """Outcome of one descent pass."""
    motion: MeshMotion
    history: List[EnergyBreakdown]
    converged: bool
    iterations: int


@dataclass
class SolveResult:
    """Primary and final motions with per-iteration diagnostics."""
    motion_p: MeshMotion
    motion_f: MeshMotion
    primary_history: List[EnergyBreakdown]
    residual_history: List[EnergyBreakdown]
    converged: bool
    iterations_used: int
    primary_converged: bool = True
    residual_converged: bool = True
    scale: Tuple[float, float] = (1.0, 1.0)

    @property
    def history(self) -> List[EnergyBreakdown]:
        return self.primary_history + self.residual_history

    def to_dict(self) -> Dict:
        return {
            'energy': {
                'primary': self.primary_history[-1].to_dict(),
                'residual': self.residual_history[-1].to_dict(),
            },
            'iterations': {
                'primary': len(self.primary_history) - 1,
                'residual': len(self.residual_history) - 1,
                'total': self.iterations_used,
            },
            'converged': self.converged,
        }


EnergyFn = Callable[[np.ndarray], Tuple[EnergyBreakdown, np.ndarray]]


def _descend(energy_fn: EnergyFn, x0: np.ndarray, settings: OptimizerSettings,
             stage: str) -> Tuple[np.ndarray, List[EnergyBreakdown], bool, int]:
    """Adam-style descent that only accepts non-increasing iterates.

    A rejected step is retried with half the step size up to max_halvings times.
    Converged once |delta total| < tolerance for `patience` consecutive iterations.
    """
    x = x0.copy()
    bd, grad = energy_fn(x)
    if not bd.is_finite():
        raise NumericalError(f"{stage}: non-finite energy at the starting point ({bd.total})")
    history = [bd]
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    stall = 0
    converged = False
    iterations = 0

    for k in range(1, settings.iterations + 1):
        iterations = k
        m = settings.beta1 * m + (1 - settings.beta1) * grad
        v = settings.beta2 * v + (1 - settings.beta2) * grad * grad
        m_hat = m / (1 - settings.beta1 ** k)
        v_hat = v / (1 - settings.beta2 ** k)
        direction = m_hat / (np.sqrt(v_hat) + settings.epsilon)
        if not np.all(np.isfinite(direction)):
            raise NumericalError(f"{stage}: non-finite gradient at iteration {k}")

        step = settings.step
        accepted = False
        for _ in range(settings.max_halvings + 1):
            candidate = x - step * direction
            cand_bd, cand_grad = energy_fn(candidate)
            if not cand_bd.is_finite():
                raise NumericalError(f"{stage}: non-finite energy at iteration {k} ({cand_bd.total})")
            if cand_bd.total <= bd.total:
                accepted = True
                break
            step *= 0.5

        delta = 0.0
        if accepted:
            delta = bd.total - cand_bd.total
            x, bd, grad = candidate, cand_bd, cand_grad
            history.append(bd)

        stall = stall + 1 if abs(delta) < settings.tolerance else 0
        if stall >= settings.patience:
            converged = True
            break

    logger.info("%s: %d iterations, total %.6g -> %.6g, converged=%s",
                stage, iterations, history[0].total, history[-1].total, converged)
    return x, history, converged, iterations


def solve_primary(image: ImageBuffer, mask: MaskBuffer, rigid: MeshGrid,
                  label: Optional[ImageBuffer], cfg: EnergyConfig,
                  phi: Optional[FeatureExtractor] = None,
                  objective: Optional[Objective] = None) -> StageResult:
    """Minimize the energy with m_f tied to m_p, starting from the rigid mesh."""
    objective = objective or Objective(image, mask, rigid, label, cfg, phi)
    shape = rigid.vertices.shape

    def energy_fn(x):
        return objective.evaluate_shared(MeshMotion(x.reshape(shape)))

    x, history, converged, iterations = _descend(energy_fn, np.zeros(shape), cfg.optimizer, 'primary')
    return StageResult(MeshMotion(x.reshape(shape)), history, converged, iterations)


def solve_residual(image: ImageBuffer, mask: MaskBuffer, rigid: MeshGrid,
                   motion_p: MeshMotion, label: Optional[ImageBuffer], cfg: EnergyConfig,
                   phi: Optional[FeatureExtractor] = None,
                   objective: Optional[Objective] = None) -> StageResult:
    """Refine m_f = rigid + motion_p + r with m_p frozen; returns motion_p + r."""
    objective = objective or Objective(image, mask, rigid, label, cfg, phi)
    shape = rigid.vertices.shape
    m_p = apply_motion(rigid, motion_p)

    def energy_fn(r):
        m_f = MeshGrid(m_p.vertices + r.reshape(shape))
        bd, _, g_f = objective.evaluate_meshes(m_p, m_f)
        return bd, g_f

    r, history, converged, iterations = _descend(energy_fn, np.zeros(shape), cfg.optimizer, 'residual')
    return StageResult(motion_p + MeshMotion(r.reshape(shape)), history, converged, iterations)


def solve(image: ImageBuffer, mask: MaskBuffer, cfg: EnergyConfig,
          label: Optional[ImageBuffer] = None,
          phi: Optional[FeatureExtractor] = None) -> SolveResult:
    """Both passes on the raster of `image`."""
    cfg = cfg.for_image(image.width, image.height)
    rigid = build_rigid_mesh(image.width, image.height, cfg.mesh_u, cfg.mesh_v)
    objective = Objective(image, mask, rigid, label, cfg, phi or PyramidFeatures())
    primary = solve_primary(image, mask, rigid, label, cfg, objective=objective)
    residual = solve_residual(image, mask, rigid, primary.motion, label, cfg, objective=objective)
    return SolveResult(
        motion_p=primary.motion,
        motion_f=residual.motion,
        primary_history=primary.history,
        residual_history=residual.history,
        converged=primary.converged and residual.converged,
        iterations_used=primary.iterations + residual.iterations,
        primary_converged=primary.converged,
        residual_converged=residual.converged,
    )


def downsample_size(width: int, height: int, limit: int = MEGAPIXEL) -> Tuple[int, int]:
    """Raster at most `limit` pixels with the same aspect ratio; unchanged below the limit."""
    if width * height <= limit:
        return width, height
    factor = math.sqrt(limit / (width * height))
    return max(2, int(width * factor)), max(2, int(height * factor))


def rectangle_image(image: ImageBuffer, mask: MaskBuffer, cfg: EnergyConfig,
                    label: Optional[ImageBuffer] = None,
                    phi: Optional[FeatureExtractor] = None,
                    downsample: bool = False) -> Tuple[ImageBuffer, SolveResult]:
    """Solve both passes and warp the image by m_f onto the rigid raster.

    With downsample, the mesh is solved on a raster of at most one megapixel and
    its motions are scaled back up before warping the full-resolution image.
    """
    if (mask.width, mask.height) != (image.width, image.height):
        raise ValueError(f"Mask is {mask.width}x{mask.height}, image is {image.width}x{image.height}")
    if label is not None and (label.width, label.height) != (image.width, image.height):
        raise ValueError(f"Label is {label.width}x{label.height}, image is {image.width}x{image.height}")

    small_w, small_h = downsample_size(image.width, image.height) if downsample else image.size
    if (small_w, small_h) != image.size:
        logger.info("Solving at %dx%d for a %dx%d input", small_w, small_h, image.width, image.height)
        result = solve(
            resize_image(image, small_w, small_h),
            resize_mask(mask, small_w, small_h),
            cfg,
            label=resize_image(label, small_w, small_h) if label is not None else None,
            phi=phi,
        )
        sx, sy = image.width / small_w, image.height / small_h
        result.motion_p = result.motion_p.scaled(sx, sy)
        result.motion_f = result.motion_f.scaled(sx, sy)
        result.scale = (sx, sy)
    else:
        result = solve(image, mask, cfg, label=label, phi=phi)

    rigid = build_rigid_mesh(image.width, image.height, cfg.mesh_u, cfg.mesh_v)
    output = warp_to_rigid(image, apply_motion(rigid, result.motion_f), rigid)
    return output, result
