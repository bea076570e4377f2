"""Rectangling objective: boundary, mesh and content terms with analytic gradients.

Aggregation over the two meshes {m_p, m_f}: boundary, intra-grid and inter-grid
terms average the per-mesh values, appearance and perception terms sum them.
Hence E(m_p, m_f) = (E(m_p, m_p) + E(m_f, m_f)) / 2.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import EnergyConfig
from .features import FeatureExtractor, PyramidFeatures, feature_count
from .mesh import MeshGrid, MeshMotion, apply_motion
from .raster import ImageBuffer, MaskBuffer
from .warp import RigidPlan, rigid_plan, sample_image, sample_mask

logger = logging.getLogger(__name__)

EDGE_EPSILON = 1e-8
COVERAGE_SNAP = 1e-9


class EnergyError(ValueError):
    """Raised when energy inputs are inconsistent."""
    pass


@dataclass(frozen=True)
class EnergyBreakdown:
    """Per-term energies; total = boundary + mesh + weighted content."""
    boundary: float
    mesh_intra: float
    mesh_inter: float
    content_appearance: float
    content_perception: float
    total: float

    @classmethod
    def assemble(cls, boundary: float, mesh_intra: float, mesh_inter: float,
                 content_appearance: float, content_perception: float,
                 cfg: EnergyConfig) -> 'EnergyBreakdown':
        total = (boundary + (mesh_intra + mesh_inter)
                 + (cfg.omega_a * content_appearance + cfg.omega_p * content_perception))
        return cls(
            boundary=float(boundary),
            mesh_intra=float(mesh_intra),
            mesh_inter=float(mesh_inter),
            content_appearance=float(content_appearance),
            content_perception=float(content_perception),
            total=float(total),
        )

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in asdict(self).values())

    def to_dict(self) -> Dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Mesh terms (pure geometry)
# ---------------------------------------------------------------------------

def intra_thresholds(cfg: EnergyConfig) -> Tuple[float, float]:
    return cfg.alpha * cfg.image_w / cfg.mesh_v, cfg.alpha * cfg.image_h / cfg.mesh_u


def _check_mesh_shape(mesh: MeshGrid, cfg: EnergyConfig):
    if mesh.shape != cfg.mesh_shape:
        raise EnergyError(
            f"Mesh shape {mesh.shape} does not match configured {cfg.mesh_u}x{cfg.mesh_v} resolution"
        )


def _intra_term(vertices: np.ndarray, cfg: EnergyConfig,
                need_grad: bool = True) -> Tuple[float, Optional[np.ndarray]]:
    thr_h, thr_v = intra_thresholds(cfg)
    ex = vertices[:, 1:, 0] - vertices[:, :-1, 0]
    ey = vertices[1:, :, 1] - vertices[:-1, :, 1]
    value = np.mean(np.maximum(thr_h - ex, 0.0)) + np.mean(np.maximum(thr_v - ey, 0.0))
    if not need_grad:
        return float(value), None

    grad = np.zeros_like(vertices)
    # subgradient 0 at the kink: only strictly violated edges contribute
    d_ex = -(ex < thr_h).astype(np.float64) / ex.size
    d_ey = -(ey < thr_v).astype(np.float64) / ey.size
    grad[:, 1:, 0] += d_ex
    grad[:, :-1, 0] -= d_ex
    grad[1:, :, 1] += d_ey
    grad[:-1, :, 1] -= d_ey
    return float(value), grad


def _cosine_pairs(a: np.ndarray, b: np.ndarray, need_grad: bool):
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    dot = np.sum(a * b, axis=-1)
    denom = na * nb + EDGE_EPSILON
    cos = dot / denom
    if not need_grad:
        return cos, None, None
    safe_na = np.where(na > 0, na, 1.0)[..., None]
    safe_nb = np.where(nb > 0, nb, 1.0)[..., None]
    d = denom[..., None]
    dcos_da = b / d - (dot[..., None] * nb[..., None] * (a / safe_na)) / d ** 2
    dcos_db = a / d - (dot[..., None] * na[..., None] * (b / safe_nb)) / d ** 2
    return cos, dcos_da, dcos_db


def _inter_term(vertices: np.ndarray,
                need_grad: bool = True) -> Tuple[float, Optional[np.ndarray]]:
    eh = vertices[:, 1:] - vertices[:, :-1]
    ev = vertices[1:, :] - vertices[:-1, :]
    cos_h, dha, dhb = _cosine_pairs(eh[:, :-1], eh[:, 1:], need_grad)
    cos_v, dva, dvb = _cosine_pairs(ev[:-1, :], ev[1:, :], need_grad)
    n = cos_h.size + cos_v.size
    if n == 0:
        return 0.0, (np.zeros_like(vertices) if need_grad else None)
    value = (np.sum(1.0 - cos_h) + np.sum(1.0 - cos_v)) / n
    if not need_grad:
        return float(value), None

    g_eh = np.zeros_like(eh)
    g_eh[:, :-1] -= dha / n
    g_eh[:, 1:] -= dhb / n
    g_ev = np.zeros_like(ev)
    g_ev[:-1, :] -= dva / n
    g_ev[1:, :] -= dvb / n

    grad = np.zeros_like(vertices)
    grad[:, 1:] += g_eh
    grad[:, :-1] -= g_eh
    grad[1:, :] += g_ev
    grad[:-1, :] -= g_ev
    return float(value), grad


def intra_grid_loss(meshes: List[MeshGrid], cfg: EnergyConfig) -> float:
    """Hinge penalty on short or reversed edge projections, averaged over meshes."""
    if not meshes:
        raise EnergyError("At least one mesh is required")
    for mesh in meshes:
        _check_mesh_shape(mesh, cfg)
    return float(np.mean([_intra_term(m.vertices, cfg, need_grad=False)[0] for m in meshes]))


def inter_grid_loss(meshes: List[MeshGrid]) -> float:
    """Mean (1 - cos) between successive edges, averaged over meshes."""
    if not meshes:
        raise EnergyError("At least one mesh is required")
    return float(np.mean([_inter_term(m.vertices, need_grad=False)[0] for m in meshes]))


def intra_kink_distance(mesh: MeshGrid, cfg: EnergyConfig) -> np.ndarray:
    """Per-coordinate distance to the nearest hinge kink among incident edges."""
    thr_h, thr_v = intra_thresholds(cfg)
    p = mesh.vertices
    dist = np.full(p.shape, np.inf)
    gap_h = np.abs((p[:, 1:, 0] - p[:, :-1, 0]) - thr_h)
    gap_v = np.abs((p[1:, :, 1] - p[:-1, :, 1]) - thr_v)
    dist[:, 1:, 0] = np.minimum(dist[:, 1:, 0], gap_h)
    dist[:, :-1, 0] = np.minimum(dist[:, :-1, 0], gap_h)
    dist[1:, :, 1] = np.minimum(dist[1:, :, 1], gap_v)
    dist[:-1, :, 1] = np.minimum(dist[:-1, :, 1], gap_v)
    return dist


# ---------------------------------------------------------------------------
# Raster terms
# ---------------------------------------------------------------------------

def _check_raster(width: int, height: int, plan: RigidPlan, what: str):
    if (width, height) != (plan.width, plan.height):
        raise EnergyError(
            f"{what} is {width}x{height} but the rigid mesh spans {plan.width}x{plan.height}"
        )


def _coverage_gap(warped: np.ndarray) -> np.ndarray:
    """1 - warped mask, with rounding-level gaps at full coverage treated as none."""
    gap = 1.0 - warped
    gap[np.abs(gap) < COVERAGE_SNAP] = 0.0
    return gap


def _boundary_term(mask: np.ndarray, mesh: MeshGrid, plan: RigidPlan, need_grad: bool = True):
    x, y = plan.positions(mesh)
    if not need_grad:
        gap = _coverage_gap(sample_mask(mask, x, y))
        return float(np.mean(np.abs(gap))), None, None
    warped, dx, dy = sample_mask(mask, x, y, with_grad=True)
    gap = _coverage_gap(warped)
    d_warped = -np.sign(gap) / gap.size
    return float(np.mean(np.abs(gap))), d_warped * dx, d_warped * dy


class _Content:
    """Appearance and perception terms against a fixed label."""

    def __init__(self, label: np.ndarray, phi: FeatureExtractor):
        self.label = label
        self.phi = phi
        self.label_flat = label.reshape(-1, label.shape[2])
        self.label_features = phi.extract(label)
        self.n_features = feature_count(self.label_features)

    def evaluate(self, image: np.ndarray, mesh: MeshGrid, plan: RigidPlan,
                 omega_a: float, omega_p: float, need_grad: bool = True):
        x, y = plan.positions(mesh)
        if need_grad:
            warped, dx, dy = sample_image(image, x, y, with_grad=True)
        else:
            warped = sample_image(image, x, y)
        diff = warped - self.label_flat
        appearance = float(np.mean(np.abs(diff)))

        warped_img = warped.reshape(self.label.shape)
        features = self.phi.extract(warped_img)
        residuals = [f - r for f, r in zip(features, self.label_features)]
        perception = float(sum(np.sum(r * r) for r in residuals) / self.n_features)
        if not need_grad:
            return appearance, perception, None, None

        d_warped = omega_a * np.sign(diff) / diff.size
        if omega_p > 0:
            d_features = [2.0 * r / self.n_features for r in residuals]
            d_img = self.phi.vjp(warped_img, d_features)
            d_warped = d_warped + omega_p * d_img.reshape(diff.shape)
        return appearance, perception, np.sum(d_warped * dx, axis=1), np.sum(d_warped * dy, axis=1)


def _label_check(image: ImageBuffer, label: ImageBuffer, plan: RigidPlan):
    _check_raster(label.width, label.height, plan, "Label")
    if label.channels != image.channels:
        raise EnergyError(f"Label has {label.channels} channels, image has {image.channels}")


def boundary_loss(mask: MaskBuffer, mesh: MeshGrid, rigid: MeshGrid) -> float:
    """Mean |1 - W(M, mesh)| over the rigid raster."""
    plan = rigid_plan(rigid)
    _check_raster(mask.width, mask.height, plan, "Mask")
    return _boundary_term(mask.data, mesh, plan, need_grad=False)[0]


def appearance_loss(image: ImageBuffer, meshes: List[MeshGrid], rigid: MeshGrid,
                    label: ImageBuffer) -> float:
    """Sum over meshes of the mean absolute error between the warped image and the label."""
    plan = rigid_plan(rigid)
    _label_check(image, label, plan)
    total = 0.0
    for mesh in meshes:
        warped = sample_image(image.data, *plan.positions(mesh))
        total += float(np.mean(np.abs(warped - label.data.reshape(-1, label.channels))))
    return total


def perception_loss(image: ImageBuffer, meshes: List[MeshGrid], rigid: MeshGrid,
                    label: ImageBuffer, phi: Optional[FeatureExtractor] = None) -> float:
    """Sum over meshes of the mean squared feature distance to the label."""
    phi = phi or PyramidFeatures()
    plan = rigid_plan(rigid)
    _label_check(image, label, plan)
    content = _Content(label.data, phi)
    return float(sum(content.evaluate(image.data, m, plan, 0.0, 0.0, need_grad=False)[1] for m in meshes))


# ---------------------------------------------------------------------------
# Full objective
# ---------------------------------------------------------------------------

class Objective:
    """Total energy and its gradient for one (image, mask, label) problem."""

    def __init__(self, image: ImageBuffer, mask: MaskBuffer, rigid: MeshGrid,
                 label: Optional[ImageBuffer], cfg: EnergyConfig,
                 phi: Optional[FeatureExtractor] = None):
        self.plan = rigid_plan(rigid)
        _check_raster(image.width, image.height, self.plan, "Image")
        _check_raster(mask.width, mask.height, self.plan, "Mask")
        if rigid.shape != cfg.mesh_shape:
            raise EnergyError(
                f"Rigid mesh shape {rigid.shape} does not match configured {cfg.mesh_u}x{cfg.mesh_v}"
            )
        if (cfg.image_w, cfg.image_h) != (self.plan.width, self.plan.height):
            raise EnergyError(
                f"Config raster {cfg.image_w}x{cfg.image_h} does not match image "
                f"{self.plan.width}x{self.plan.height}"
            )
        self.image = image
        self.mask = mask
        self.rigid = rigid
        self.cfg = cfg
        self.content = None
        if label is not None:
            _label_check(image, label, self.plan)
            self.content = _Content(label.data, phi or PyramidFeatures())

    @property
    def label_free(self) -> bool:
        return self.content is None

    def _single(self, mesh: MeshGrid, need_grad: bool):
        """Unaggregated per-mesh terms and their gradients."""
        boundary, gbx, gby = _boundary_term(self.mask.data, mesh, self.plan, need_grad)
        intra, g_intra = _intra_term(mesh.vertices, self.cfg, need_grad)
        inter, g_inter = _inter_term(mesh.vertices, need_grad)
        if self.content is None:
            appearance = perception = 0.0
            gcx = gcy = None
        else:
            appearance, perception, gcx, gcy = self.content.evaluate(
                self.image.data, mesh, self.plan, self.cfg.omega_a, self.cfg.omega_p, need_grad)
        return {
            'boundary': boundary, 'intra': intra, 'inter': inter,
            'appearance': appearance, 'perception': perception,
            'gbx': gbx, 'gby': gby, 'gcx': gcx, 'gcy': gcy,
            'g_mesh': None if not need_grad else g_intra + g_inter,
        }

    def _vertex_grad(self, terms: Dict, raster_weight: float, content_weight: float,
                     mesh_weight: float) -> np.ndarray:
        gx = raster_weight * terms['gbx']
        gy = raster_weight * terms['gby']
        if terms['gcx'] is not None:
            gx = gx + content_weight * terms['gcx']
            gy = gy + content_weight * terms['gcy']
        return self.plan.pull_back(gx, gy) + mesh_weight * terms['g_mesh']

    def breakdown(self, m_p: MeshGrid, m_f: MeshGrid) -> EnergyBreakdown:
        return self.evaluate_meshes(m_p, m_f, need_grad=False)[0]

    def evaluate_meshes(self, m_p: MeshGrid, m_f: MeshGrid, need_grad: bool = True):
        tp = self._single(m_p, need_grad)
        tf = tp if m_f == m_p else self._single(m_f, need_grad)
        bd = EnergyBreakdown.assemble(
            boundary=0.5 * (tp['boundary'] + tf['boundary']),
            mesh_intra=0.5 * (tp['intra'] + tf['intra']),
            mesh_inter=0.5 * (tp['inter'] + tf['inter']),
            content_appearance=tp['appearance'] + tf['appearance'],
            content_perception=tp['perception'] + tf['perception'],
            cfg=self.cfg,
        )
        if not need_grad:
            return bd, None, None
        g_p = self._vertex_grad(tp, 0.5, 1.0, 0.5)
        g_f = g_p if tf is tp else self._vertex_grad(tf, 0.5, 1.0, 0.5)
        return bd, g_p, g_f

    def evaluate(self, motion_p: MeshMotion, motion_f: MeshMotion, need_grad: bool = True):
        """Breakdown and per-vertex gradients (rows, cols, 2) for m_p and m_f."""
        return self.evaluate_meshes(apply_motion(self.rigid, motion_p),
                                    apply_motion(self.rigid, motion_f), need_grad)

    def evaluate_shared(self, motion: MeshMotion, need_grad: bool = True):
        """Energy with m_f tied to m_p, and its gradient w.r.t. the shared motion."""
        mesh = apply_motion(self.rigid, motion)
        terms = self._single(mesh, need_grad)
        bd = EnergyBreakdown.assemble(
            boundary=terms['boundary'],
            mesh_intra=terms['intra'],
            mesh_inter=terms['inter'],
            content_appearance=2.0 * terms['appearance'],
            content_perception=2.0 * terms['perception'],
            cfg=self.cfg,
        )
        if not need_grad:
            return bd, None
        return bd, self._vertex_grad(terms, 1.0, 2.0, 1.0)


def total_energy(image: ImageBuffer, mask: MaskBuffer, m_p: MeshGrid, m_f: MeshGrid,
                 rigid: MeshGrid, label: Optional[ImageBuffer], cfg: EnergyConfig,
                 phi: Optional[FeatureExtractor] = None) -> EnergyBreakdown:
    """Total objective; without a label the content term is 0."""
    return Objective(image, mask, rigid, label, cfg, phi).breakdown(m_p, m_f)


def energy_gradient(image: ImageBuffer, mask: MaskBuffer, motion_p: MeshMotion,
                    motion_f: MeshMotion, rigid: MeshGrid, label: Optional[ImageBuffer],
                    cfg: EnergyConfig,
                    phi: Optional[FeatureExtractor] = None) -> Tuple[MeshMotion, MeshMotion]:
    """Analytic gradient of total_energy w.r.t. both motions."""
    _, g_p, g_f = Objective(image, mask, rigid, label, cfg, phi).evaluate(motion_p, motion_f)
    return MeshMotion(g_p), MeshMotion(g_f)
