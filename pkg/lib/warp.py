"""Backward mesh warps between rigid and irregular meshes."""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np
from scipy import sparse

from .mesh import MeshGrid, cell_jacobians, is_rigid, rigid_extent
from .raster import ImageBuffer, MaskBuffer

logger = logging.getLogger(__name__)

CELL_TOLERANCE = 1e-9


class WarpError(Exception):
    """Raised when a warp cannot be computed."""
    pass


class DegenerateCellError(WarpError):
    """Raised when a destination cell is folded or has non-positive area."""

    def __init__(self, cell: Tuple[int, int], message: str):
        super().__init__(message)
        self.cell = cell


class InverseBilinearError(WarpError):
    """Raised when inverse bilinear mapping does not converge."""
    pass


@dataclass(frozen=True)
class RigidPlan:
    """Per-pixel bilinear weights of a rigid raster as a sparse (H*W, rows*cols) matrix.

    Source positions of every output pixel are blend @ vertices, which is what makes
    the rigid-destination warp a matrix product.
    """
    width: int
    height: int
    rows: int
    cols: int
    blend: sparse.csr_matrix

    def positions(self, mesh: MeshGrid) -> Tuple[np.ndarray, np.ndarray]:
        if mesh.shape != (self.rows, self.cols):
            raise WarpError(f"Mesh shape {mesh.shape} does not match rigid shape {(self.rows, self.cols)}")
        flat = mesh.vertices.reshape(-1, 2)
        return self.blend @ flat[:, 0], self.blend @ flat[:, 1]

    def pull_back(self, grad_x: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
        """Transpose of positions(): per-pixel position gradients to per-vertex gradients."""
        gx = self.blend.T @ grad_x
        gy = self.blend.T @ grad_y
        return np.stack([gx, gy], axis=-1).reshape(self.rows, self.cols, 2)


@lru_cache(maxsize=4)
def _build_plan(width: int, height: int, rows: int, cols: int) -> RigidPlan:
    u, v = rows - 1, cols - 1
    cell_w = width / v
    cell_h = height / u
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    j = np.minimum(np.floor(xs / cell_w).astype(np.int64), v - 1)
    i = np.minimum(np.floor(ys / cell_h).astype(np.int64), u - 1)
    s = (xs - j * width / v) / cell_w
    t = (ys - i * height / u) / cell_h

    ii, jj = np.meshgrid(i, j, indexing='ij')
    tt, ss = np.meshgrid(t, s, indexing='ij')
    ii, jj, ss, tt = ii.ravel(), jj.ravel(), ss.ravel(), tt.ravel()

    corner = ii * cols + jj
    col_idx = np.stack([corner, corner + 1, corner + cols, corner + cols + 1], axis=1)
    weights = np.stack([
        (1 - ss) * (1 - tt),
        ss * (1 - tt),
        (1 - ss) * tt,
        ss * tt,
    ], axis=1)
    n_pix = width * height
    row_idx = np.repeat(np.arange(n_pix), 4)
    blend = sparse.csr_matrix(
        (weights.ravel(), (row_idx, col_idx.ravel())),
        shape=(n_pix, rows * cols),
    )
    return RigidPlan(width=width, height=height, rows=rows, cols=cols, blend=blend)


def rigid_plan(rigid: MeshGrid) -> RigidPlan:
    width, height = rigid_extent(rigid)
    out_w, out_h = int(round(width)), int(round(height))
    if out_w < 1 or out_h < 1:
        raise WarpError(f"Rigid mesh spans a zero-sized raster ({width}x{height})")
    if not is_rigid(rigid) or abs(out_w - width) > 1e-6 or abs(out_h - height) > 1e-6:
        raise WarpError("Destination mesh is not a uniform grid over an integer raster")
    return _build_plan(out_w, out_h, rigid.rows, rigid.cols)


def sample_image(data: np.ndarray, x: np.ndarray, y: np.ndarray,
                 with_grad: bool = False):
    """Bilinear sampling of an HxWxC array with border clamp.

    Returns values (N, C) and, with with_grad, d/dx and d/dy of the values (0 where clamped).
    """
    h, w = data.shape[:2]
    xc = np.clip(x, 0.0, w - 1)
    yc = np.clip(y, 0.0, h - 1)
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xc - x0)[:, None]
    fy = (yc - y0)[:, None]

    v00 = data[y0, x0]
    v01 = data[y0, x1]
    v10 = data[y1, x0]
    v11 = data[y1, x1]
    top = v00 + fx * (v01 - v00)
    bottom = v10 + fx * (v11 - v10)
    values = top + fy * (bottom - top)
    if not with_grad:
        return values

    inside_x = ((x >= 0) & (x <= w - 1) & (w > 1))[:, None]
    inside_y = ((y >= 0) & (y <= h - 1) & (h > 1))[:, None]
    dx = ((1 - fy) * (v01 - v00) + fy * (v11 - v10)) * inside_x
    dy = (bottom - top) * inside_y
    return values, dx, dy


def sample_mask(data: np.ndarray, x: np.ndarray, y: np.ndarray,
                with_grad: bool = False):
    """Bilinear sampling of an HxW array where everything outside the raster is 0."""
    h, w = data.shape
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0

    def fetch(yy, xx):
        ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        out = np.zeros(xx.shape, dtype=np.float64)
        out[ok] = data[yy[ok], xx[ok]]
        return out

    v00 = fetch(y0, x0)
    v01 = fetch(y0, x0 + 1)
    v10 = fetch(y0 + 1, x0)
    v11 = fetch(y0 + 1, x0 + 1)
    top = v00 + fx * (v01 - v00)
    bottom = v10 + fx * (v11 - v10)
    values = top + fy * (bottom - top)
    if not with_grad:
        return values
    dx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    dy = bottom - top
    return values, dx, dy


def warp_to_rigid(src: ImageBuffer, src_mesh: MeshGrid, rigid: MeshGrid) -> ImageBuffer:
    """Warp src from src_mesh onto the rigid mesh's raster by backward interpolation."""
    plan = rigid_plan(rigid)
    x, y = plan.positions(src_mesh)
    values = sample_image(src.data, x, y)
    return ImageBuffer(values.reshape(plan.height, plan.width, src.channels))


def warp_mask_to_rigid(mask: MaskBuffer, src_mesh: MeshGrid, rigid: MeshGrid) -> MaskBuffer:
    """As warp_to_rigid for a mask; samples falling outside the source raster read as void."""
    plan = rigid_plan(rigid)
    x, y = plan.positions(src_mesh)
    values = sample_mask(mask.data, x, y)
    return MaskBuffer(values.reshape(plan.height, plan.width))


def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def inverse_bilinear(quad: np.ndarray, px: np.ndarray, py: np.ndarray,
                     tol: float = CELL_TOLERANCE) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cell coordinates (s, t) of points inside a bilinear quad.

    quad holds corners [A, B, C, D] = [(0,0), (1,0), (0,1), (1,1)] in (s, t).
    Solves the quadratic in t analytically, then applies one Newton step.
    Returns s, t and a boolean array marking points that fall inside the quad.
    """
    a, b, c, d = quad
    ex, ey = b - a
    fx, fy = c - a
    gx, gy = a - b - c + d
    hx, hy = px - a[0], py - a[1]

    k2 = _cross(gx, gy, fx, fy)
    k1 = _cross(ex, ey, fx, fy) + _cross(hx, hy, gx, gy)
    k0 = _cross(hx, hy, ex, ey)

    with np.errstate(divide='ignore', invalid='ignore'):
        disc = k1 * k1 - 4.0 * k2 * k0
        real = disc >= 0
        root = np.sqrt(np.where(real, disc, 0.0))
        q = -0.5 * (k1 + np.where(k1 >= 0, root, -root))
        scale = abs(k1) if np.ndim(k1) == 0 else np.abs(k1)
        if abs(k2) <= 1e-12 * (np.max(scale) + 1.0):
            t_a = -k0 / k1
            t_b = t_a
        else:
            t_a = k0 / q
            t_b = q / k2

        def s_from_t(t):
            den_x = ex + gx * t
            den_y = ey + gy * t
            use_x = np.abs(den_x) >= np.abs(den_y)
            return np.where(use_x, (hx - fx * t) / den_x, (hy - fy * t) / den_y)

        s_a = s_from_t(t_a)
        s_b = s_from_t(t_b)

    def in_cell(s, t):
        return (np.isfinite(s) & np.isfinite(t)
                & (s >= -tol) & (s <= 1 + tol) & (t >= -tol) & (t <= 1 + tol))

    ok_a = real & in_cell(s_a, t_a)
    ok_b = real & in_cell(s_b, t_b)
    s = np.where(ok_a, s_a, s_b)
    t = np.where(ok_a, t_a, t_b)
    inside = ok_a | ok_b
    s = np.where(inside, s, 0.0)
    t = np.where(inside, t, 0.0)

    def newton_step(s, t):
        rx = a[0] + ex * s + fx * t + gx * s * t - px
        ry = a[1] + ey * s + fy * t + gy * s * t - py
        j11, j12 = ex + gx * t, fx + gx * s
        j21, j22 = ey + gy * t, fy + gy * s
        det = j11 * j22 - j12 * j21
        with np.errstate(divide='ignore', invalid='ignore'):
            ds = (j22 * rx - j12 * ry) / det
            dt = (j11 * ry - j21 * rx) / det
        return ds, dt

    ds, dt = newton_step(s, t)
    s = np.where(inside, s - ds, s)
    t = np.where(inside, t - dt, t)

    ds, dt = newton_step(s, t)
    residual = np.where(inside, np.maximum(np.abs(ds), np.abs(dt)), 0.0)
    if np.any(~np.isfinite(residual)) or np.any(residual > tol):
        raise InverseBilinearError(
            f"Inverse bilinear mapping did not converge (residual {np.nanmax(residual):.3g})"
        )
    return np.clip(s, 0.0, 1.0), np.clip(t, 0.0, 1.0), inside


def warp_from_rigid(src: ImageBuffer, rigid: MeshGrid, dst_mesh: MeshGrid,
                    out_w: int, out_h: int, fill: float = 0.0) -> Tuple[ImageBuffer, MaskBuffer]:
    """Warp src from the rigid mesh onto an irregular dst_mesh raster of out_w x out_h.

    Each output pixel is located in the first dst cell (row-major) containing it, its
    cell coordinates are recovered by inverse bilinear mapping, and src is sampled at
    the matching rigid position. Uncovered pixels get fill and mask 0.
    """
    if rigid.shape != dst_mesh.shape:
        raise WarpError(f"Mesh shapes differ: {rigid.shape} vs {dst_mesh.shape}")
    if out_w < 1 or out_h < 1:
        raise WarpError(f"Output raster must be non-empty, got {out_w}x{out_h}")
    verts = dst_mesh.vertices
    slack = CELL_TOLERANCE * max(out_w, out_h)
    if (np.any(verts[..., 0] < -slack) or np.any(verts[..., 0] > out_w + slack)
            or np.any(verts[..., 1] < -slack) or np.any(verts[..., 1] > out_h + slack)):
        raise WarpError(f"Destination mesh leaves the {out_w}x{out_h} raster")

    jac = cell_jacobians(dst_mesh)
    bad = np.argwhere(np.any(jac <= 0, axis=-1))
    if len(bad):
        cell = (int(bad[0][0]), int(bad[0][1]))
        raise DegenerateCellError(cell, f"Destination cell {cell} is folded or degenerate")

    covered = np.zeros((out_h, out_w), dtype=bool)
    src_x = np.zeros((out_h, out_w))
    src_y = np.zeros((out_h, out_w))
    rv = rigid.vertices

    for i in range(dst_mesh.rows - 1):
        for j in range(dst_mesh.cols - 1):
            quad = np.array([verts[i, j], verts[i, j + 1], verts[i + 1, j], verts[i + 1, j + 1]])
            x_lo = max(int(np.floor(quad[:, 0].min())), 0)
            x_hi = min(int(np.ceil(quad[:, 0].max())), out_w - 1)
            y_lo = max(int(np.floor(quad[:, 1].min())), 0)
            y_hi = min(int(np.ceil(quad[:, 1].max())), out_h - 1)
            if x_lo > x_hi or y_lo > y_hi:
                continue
            ys, xs = np.mgrid[y_lo:y_hi + 1, x_lo:x_hi + 1]
            free = ~covered[ys, xs]
            px = xs[free].astype(np.float64)
            py = ys[free].astype(np.float64)
            if px.size == 0:
                continue
            s, t, inside = inverse_bilinear(quad, px, py)
            if not np.any(inside):
                continue
            s, t = s[inside], t[inside]
            rquad = np.array([rv[i, j], rv[i, j + 1], rv[i + 1, j], rv[i + 1, j + 1]])
            pos = (((1 - s) * (1 - t))[:, None] * rquad[0] + (s * (1 - t))[:, None] * rquad[1]
                   + ((1 - s) * t)[:, None] * rquad[2] + (s * t)[:, None] * rquad[3])
            yi = py[inside].astype(np.int64)
            xi = px[inside].astype(np.int64)
            covered[yi, xi] = True
            src_x[yi, xi] = pos[:, 0]
            src_y[yi, xi] = pos[:, 1]

    out = np.full((out_h, out_w, src.channels), float(fill))
    if np.any(covered):
        values = sample_image(src.data, src_x[covered], src_y[covered])
        out[covered] = values
    logger.debug("warp_from_rigid covered %.4f of %dx%d", covered.mean(), out_w, out_h)
    return ImageBuffer(out), MaskBuffer(covered.astype(np.float64))
