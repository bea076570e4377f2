"""Mesh geometry: rigid target mesh, mesh motions and edge accessors."""

import json
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np


class MeshError(ValueError):
    """Raised when a mesh or motion is malformed."""
    pass


def _frozen(array: np.ndarray) -> np.ndarray:
    out = np.array(array, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class MeshGrid:
    """(U+1)x(V+1) grid of vertex positions in pixel coordinates, row-major.

    vertices[i, j] = (x, y) with the origin at the top-left and y pointing down.
    """
    vertices: np.ndarray

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64)
        if vertices.ndim != 3 or vertices.shape[2] != 2:
            raise MeshError(f"Mesh vertices must have shape (rows, cols, 2), got {vertices.shape}")
        if vertices.shape[0] < 2 or vertices.shape[1] < 2:
            raise MeshError(f"Mesh needs at least 2x2 vertices, got {vertices.shape[0]}x{vertices.shape[1]}")
        if not np.all(np.isfinite(vertices)):
            raise MeshError("Mesh vertices must be finite")
        object.__setattr__(self, 'vertices', _frozen(vertices))

    @property
    def rows(self) -> int:
        return self.vertices.shape[0]

    @property
    def cols(self) -> int:
        return self.vertices.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rows, self.cols

    def translated(self, dx: float, dy: float) -> 'MeshGrid':
        return MeshGrid(self.vertices + np.array([dx, dy]))

    def scaled(self, factor: float, center: Tuple[float, float] = (0.0, 0.0)) -> 'MeshGrid':
        c = np.asarray(center, dtype=np.float64)
        return MeshGrid(c + (self.vertices - c) * factor)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MeshGrid):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.vertices, other.vertices)

    def to_dict(self) -> Dict:
        return {
            'rows': self.rows,
            'cols': self.cols,
            'vertices': self.vertices.reshape(-1, 2).tolist(),
        }


@dataclass(frozen=True, eq=False)
class MeshMotion:
    """Per-vertex displacement (dx, dy) in pixels relative to a rigid mesh."""
    offsets: np.ndarray

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=np.float64)
        if offsets.ndim != 3 or offsets.shape[2] != 2:
            raise MeshError(f"Motion must have shape (rows, cols, 2), got {offsets.shape}")
        if not np.all(np.isfinite(offsets)):
            raise MeshError("Motion must be finite")
        object.__setattr__(self, 'offsets', _frozen(offsets))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> 'MeshMotion':
        return cls(np.zeros((rows, cols, 2)))

    @classmethod
    def uniform(cls, rows: int, cols: int, dx: float, dy: float) -> 'MeshMotion':
        offsets = np.empty((rows, cols, 2))
        offsets[..., 0] = dx
        offsets[..., 1] = dy
        return cls(offsets)

    @property
    def rows(self) -> int:
        return self.offsets.shape[0]

    @property
    def cols(self) -> int:
        return self.offsets.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rows, self.cols

    @property
    def dx(self) -> np.ndarray:
        return self.offsets[..., 0]

    @property
    def dy(self) -> np.ndarray:
        return self.offsets[..., 1]

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.offsets)))

    def __add__(self, other: 'MeshMotion') -> 'MeshMotion':
        if not isinstance(other, MeshMotion):
            return NotImplemented
        if self.shape != other.shape:
            raise MeshError(f"Motion shapes differ: {self.shape} vs {other.shape}")
        return MeshMotion(self.offsets + other.offsets)

    def __neg__(self) -> 'MeshMotion':
        return MeshMotion(-self.offsets)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MeshMotion):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.offsets, other.offsets)

    def scaled(self, sx: float, sy: float) -> 'MeshMotion':
        return MeshMotion(self.offsets * np.array([sx, sy]))

    def to_dict(self) -> Dict:
        return {
            'rows': self.rows,
            'cols': self.cols,
            'offsets': self.offsets.reshape(-1, 2).tolist(),
        }


def build_rigid_mesh(width: float, height: float, u: int, v: int) -> MeshGrid:
    """Uniform grid with vertex (i, j) at (j*width/v, i*height/u)."""
    if not (width > 0 and height > 0):
        raise MeshError(f"Mesh extent must be positive, got {width}x{height}")
    if int(u) != u or int(v) != v or u < 1 or v < 1:
        raise MeshError(f"Mesh resolution must be integers >= 1, got {u}x{v}")
    u, v = int(u), int(v)
    # j*width is formed before dividing so the last column lands exactly on width
    xs = np.arange(v + 1, dtype=np.float64) * width / v
    ys = np.arange(u + 1, dtype=np.float64) * height / u
    gx, gy = np.meshgrid(xs, ys)
    return MeshGrid(np.stack([gx, gy], axis=-1))


def rigid_extent(rigid: MeshGrid) -> Tuple[float, float]:
    """(width, height) spanned by a rigid mesh."""
    return float(rigid.vertices[0, -1, 0]), float(rigid.vertices[-1, 0, 1])


def is_rigid(mesh: MeshGrid, tol: float = 1e-9) -> bool:
    width, height = rigid_extent(mesh)
    if width <= 0 or height <= 0:
        return False
    expected = build_rigid_mesh(width, height, mesh.rows - 1, mesh.cols - 1)
    return bool(np.allclose(mesh.vertices, expected.vertices, rtol=0.0, atol=tol * max(width, height)))


def apply_motion(rigid: MeshGrid, motion: MeshMotion) -> MeshGrid:
    if rigid.shape != motion.shape:
        raise MeshError(f"Motion shape {motion.shape} does not match mesh shape {rigid.shape}")
    return MeshGrid(rigid.vertices + motion.offsets)


def motion_between(rigid: MeshGrid, mesh: MeshGrid) -> MeshMotion:
    if rigid.shape != mesh.shape:
        raise MeshError(f"Mesh shapes differ: {rigid.shape} vs {mesh.shape}")
    return MeshMotion(mesh.vertices - rigid.vertices)


def mesh_edges(mesh: MeshGrid) -> Tuple[np.ndarray, np.ndarray]:
    """Horizontal edges ((U+1)*V, 2) and vertical edges (U*(V+1), 2) as vectors."""
    vertices = mesh.vertices
    horizontal = vertices[:, 1:] - vertices[:, :-1]
    vertical = vertices[1:, :] - vertices[:-1, :]
    return horizontal.reshape(-1, 2), vertical.reshape(-1, 2)


def cell_jacobians(mesh: MeshGrid) -> np.ndarray:
    """Bilinear Jacobian determinant at the four corners of every cell, shape (U, V, 4).

    The determinant is affine in each cell coordinate, so positive corners imply a
    positive Jacobian over the whole cell.
    """
    p = mesh.vertices
    a, b, c, d = p[:-1, :-1], p[:-1, 1:], p[1:, :-1], p[1:, 1:]
    e = b - a
    f = c - a
    g = a - b - c + d

    def cross(p1, p2):
        return p1[..., 0] * p2[..., 1] - p1[..., 1] * p2[..., 0]

    return np.stack([
        cross(e, f),
        cross(e, f + g),
        cross(e + g, f),
        cross(e + g, f + g),
    ], axis=-1)


def outline(mesh: MeshGrid) -> np.ndarray:
    """Boundary vertices in clockwise image order (top, right, bottom, left)."""
    p = mesh.vertices
    top = p[0, :-1]
    right = p[:-1, -1]
    bottom = p[-1, :0:-1]
    left = p[:0:-1, 0]
    return np.concatenate([top, right, bottom, left])


def footprint_area(mesh: MeshGrid) -> float:
    """Shoelace area enclosed by the mesh outline."""
    ring = outline(mesh)
    x, y = ring[:, 0], ring[:, 1]
    return float(0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def mesh_from_dict(data: Dict) -> MeshGrid:
    try:
        rows, cols = int(data['rows']), int(data['cols'])
        vertices = np.asarray(data['vertices'], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as e:
        raise MeshError(f"Invalid mesh JSON: {e}")
    if vertices.shape != (rows * cols, 2):
        raise MeshError(f"Mesh JSON lists {vertices.shape[0]} vertices, expected {rows * cols}")
    return MeshGrid(vertices.reshape(rows, cols, 2))


def mesh_to_json(mesh: MeshGrid) -> str:
    return json.dumps(mesh.to_dict(), indent=2)


def mesh_from_json(text: str) -> MeshGrid:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise MeshError(f"Invalid mesh JSON: {e}")
    return mesh_from_dict(data)


def motion_to_json(motion: MeshMotion) -> str:
    return json.dumps(motion.to_dict(), indent=2)
