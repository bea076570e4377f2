"""Central finite-difference check of the analytic energy gradient."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .config import DEFAULT_ALPHA, EnergyConfig
from .energy import Objective, intra_grid_loss, intra_kink_distance, intra_thresholds
from .features import FeatureExtractor, PyramidFeatures
from .mesh import MeshGrid, MeshMotion, apply_motion, build_rigid_mesh
from .raster import ImageBuffer, MaskBuffer

logger = logging.getLogger(__name__)

STEP = 1e-3
TOLERANCE = 1e-3
KINK_MARGIN = 1e-2
MAX_MOTION = 3.0
RASTER = (96, 72)
MESH = (4, 3)
SQUEEZE_ALPHA = 0.5


@dataclass
class GradcheckCase:
    """One random configuration: rasters, two motions and the objective over them."""
    image: ImageBuffer
    mask: MaskBuffer
    label: ImageBuffer
    rigid: MeshGrid
    motion_p: MeshMotion
    motion_f: MeshMotion
    cfg: EnergyConfig


@dataclass
class GradcheckReport:
    trials: int = 0
    checked: int = 0
    excluded: int = 0
    hinge_trials: int = 0
    max_rel_error: float = 0.0
    worst: Optional[Dict] = None
    errors: List[float] = field(default_factory=list)
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.trials > 0 and self.max_rel_error <= self.tolerance

    def to_dict(self) -> Dict:
        return {
            'trials': self.trials,
            'checked': self.checked,
            'excluded': self.excluded,
            'hinge_trials': self.hinge_trials,
            'max_rel_error': self.max_rel_error,
            'tolerance': self.tolerance,
            'passed': self.passed,
            'worst': self.worst,
        }


def _smooth_image(rng: np.random.Generator, width: int, height: int,
                  low: float, high: float, channels: int = 3) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    data = np.empty((height, width, channels))
    for c in range(channels):
        fx, fy = rng.uniform(0.5, 2.0, size=2) * 2 * np.pi / np.array([width, height])
        px, py = rng.uniform(0, 2 * np.pi, size=2)
        wave = 0.5 * (np.sin(fx * xx + px) * np.cos(fy * yy + py) + 1.0)
        data[..., c] = low + (high - low) * wave
    return data


def _bilinear_ramp(rng: np.random.Generator, width: int, height: int,
                   low: float, high: float, channels: int) -> np.ndarray:
    """Random corner values blended bilinearly over the raster.

    Bilinear sampling reproduces such a ramp exactly, so the sampled rasters carry
    no lattice kinks and the objective is polynomial in the vertices.
    """
    sx = np.linspace(0.0, 1.0, width)[None, :, None]
    sy = np.linspace(0.0, 1.0, height)[:, None, None]
    c00, c01, c10, c11 = rng.uniform(low, high, size=(4, channels))
    return ((1 - sx) * (1 - sy) * c00 + sx * (1 - sy) * c01
            + (1 - sx) * sy * c10 + sx * sy * c11)


def _inward_motion(rng: np.random.Generator, rows: int, cols: int) -> MeshMotion:
    """Small random motion that keeps every sample of the warp inside the raster."""
    offsets = rng.uniform(-MAX_MOTION, MAX_MOTION, size=(rows, cols, 2))
    offsets[:, 0, 0] = rng.uniform(1.5, MAX_MOTION, size=rows)
    offsets[:, -1, 0] = -rng.uniform(1.5, MAX_MOTION, size=rows)
    offsets[0, :, 1] = rng.uniform(1.5, MAX_MOTION, size=cols)
    offsets[-1, :, 1] = -rng.uniform(1.5, MAX_MOTION, size=cols)
    return MeshMotion(offsets)


def _squeezed_motion(rng: np.random.Generator, rigid: MeshGrid, cfg: EnergyConfig) -> MeshMotion:
    """Inward motion with one interior grid line pushed against a neighbour.

    The squeezed edges end up between 0.3 and 0.7 of the intra threshold, so the
    hinge is active; the first edge of the line lands exactly on the threshold.
    """
    rows, cols = rigid.shape
    offsets = _inward_motion(rng, rows, cols).offsets.copy()
    p = rigid.vertices + offsets
    thr_h, thr_v = intra_thresholds(cfg)
    if rows < 3 or (cols >= 3 and rng.random() < 0.5):
        j = int(rng.integers(1, cols - 1))
        lengths = rng.uniform(0.3, 0.7, size=rows) * thr_h
        lengths[0] = thr_h
        offsets[:, j, 0] = p[:, j + 1, 0] - lengths - rigid.vertices[:, j, 0]
    else:
        i = int(rng.integers(1, rows - 1))
        lengths = rng.uniform(0.3, 0.7, size=cols) * thr_v
        lengths[0] = thr_v
        offsets[i, :, 1] = p[i + 1, :, 1] - lengths - rigid.vertices[i, :, 1]
    return MeshMotion(offsets)


def random_case(rng: np.random.Generator, cfg: Optional[EnergyConfig] = None,
                squeeze: bool = False) -> GradcheckCase:
    """Random rasters and motions; with squeeze, both meshes violate the intra-grid hinge."""
    width, height = RASTER
    cfg = cfg or EnergyConfig(mesh_u=MESH[0], mesh_v=MESH[1], image_w=width, image_h=height,
                              alpha=SQUEEZE_ALPHA if squeeze else DEFAULT_ALPHA)
    rigid = build_rigid_mesh(width, height, cfg.mesh_u, cfg.mesh_v)
    rows, cols = rigid.shape

    def draw() -> MeshMotion:
        return _squeezed_motion(rng, rigid, cfg) if squeeze else _inward_motion(rng, rows, cols)

    return GradcheckCase(
        image=ImageBuffer(_bilinear_ramp(rng, width, height, 0.1, 0.5, 3)),
        mask=MaskBuffer(_bilinear_ramp(rng, width, height, 0.2, 0.9, 1)[..., 0]),
        label=ImageBuffer(_smooth_image(rng, width, height, 0.6, 0.9)),
        rigid=rigid,
        motion_p=draw(),
        motion_f=draw(),
        cfg=cfg,
    )


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(|a|, |n|, 1e-2 * max|n|), elementwise."""
    floor = max(1e-2 * float(np.max(np.abs(numeric))), 1e-12)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray,
                     skip: np.ndarray, h: float = STEP) -> np.ndarray:
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for k in np.flatnonzero(~skip.reshape(-1)):
        saved = flat_x[k]
        flat_x[k] = saved + h
        up = fn(x)
        flat_x[k] = saved - h
        down = fn(x)
        flat_x[k] = saved
        flat_g[k] = (up - down) / (2 * h)
    return grad


def _kink_adjacent(rigid: MeshGrid, offsets: np.ndarray, cfg: EnergyConfig) -> np.ndarray:
    return intra_kink_distance(MeshGrid(rigid.vertices + offsets), cfg) < KINK_MARGIN


def check_case(case: GradcheckCase,
               phi: Optional[FeatureExtractor] = None) -> List[Tuple[str, np.ndarray, np.ndarray]]:
    """Relative errors of the joint (m_p, m_f) and shared-motion gradients.

    Returns (name, errors, skipped) per checked gradient; skipped coordinates are
    within KINK_MARGIN of an intra-grid hinge and carry error 0.
    """
    objective = Objective(case.image, case.mask, case.rigid, case.label, case.cfg,
                          phi or PyramidFeatures())
    rigid = case.rigid
    p = case.motion_p.offsets.copy()
    f = case.motion_f.offsets.copy()
    results = []

    _, g_p, g_f = objective.evaluate(case.motion_p, case.motion_f)
    skip_p = _kink_adjacent(rigid, p, case.cfg)
    skip_f = _kink_adjacent(rigid, f, case.cfg)
    n_p = numeric_gradient(
        lambda x: objective.breakdown(MeshGrid(rigid.vertices + x), apply_motion(rigid, case.motion_f)).total,
        p, skip_p)
    n_f = numeric_gradient(
        lambda x: objective.breakdown(apply_motion(rigid, case.motion_p), MeshGrid(rigid.vertices + x)).total,
        f, skip_f)
    analytic = np.concatenate([np.where(skip_p, 0.0, g_p).ravel(), np.where(skip_f, 0.0, g_f).ravel()])
    numeric = np.concatenate([n_p.ravel(), n_f.ravel()])
    results.append(('joint', relative_errors(analytic, numeric),
                    np.concatenate([skip_p.ravel(), skip_f.ravel()])))

    _, g_s = objective.evaluate_shared(case.motion_p)
    n_s = numeric_gradient(lambda x: objective.evaluate_shared(MeshMotion(x), need_grad=False)[0].total,
                           p, skip_p)
    results.append(('shared', relative_errors(np.where(skip_p, 0.0, g_s).ravel(), n_s.ravel()),
                    skip_p.ravel()))
    return results


def run_gradcheck(seed: int, trials: int = 100,
                  phi: Optional[FeatureExtractor] = None) -> GradcheckReport:
    """Check the analytic gradient on `trials` random configurations drawn from `seed`.

    Every other trial squeezes one grid line under the intra-grid threshold so the
    hinge contributes to the gradient being checked.
    """
    if trials < 1:
        raise ValueError(f"Trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    phi = phi or PyramidFeatures()
    report = GradcheckReport()
    for trial in range(trials):
        case = random_case(rng, squeeze=trial % 2 == 1)
        meshes = [apply_motion(case.rigid, case.motion_p), apply_motion(case.rigid, case.motion_f)]
        if intra_grid_loss(meshes, case.cfg) > 0:
            report.hinge_trials += 1
        for name, errors, skipped in check_case(case, phi):
            report.checked += int(np.count_nonzero(~skipped))
            report.excluded += int(np.count_nonzero(skipped))
            worst = int(np.argmax(errors))
            report.errors.append(float(errors[worst]))
            if errors[worst] > report.max_rel_error or report.worst is None:
                report.max_rel_error = float(max(report.max_rel_error, errors[worst]))
                report.worst = {'trial': trial, 'gradient': name, 'coordinate': worst}
        report.trials += 1
        logger.debug("Trial %d: max relative error so far %.3e", trial, report.max_rel_error)

    logger.info("Gradient check over %d trials: max relative error %.3e", trials, report.max_rel_error)
    return report
