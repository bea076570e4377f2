import numpy as np
import pytest
from numpy.testing import assert_allclose

from lib.mesh import (MeshError, MeshGrid, MeshMotion, apply_motion, build_rigid_mesh,
                      cell_jacobians, footprint_area, is_rigid, mesh_edges, mesh_from_json,
                      mesh_to_json, motion_between, motion_to_json, outline, rigid_extent)


def test_rigid_mesh_positions():
    rigid = build_rigid_mesh(512, 384, 8, 6)
    assert rigid.shape == (9, 7)
    assert_allclose(rigid.vertices[0, 0], [0.0, 0.0])
    assert_allclose(rigid.vertices[1, 1], [512 / 6, 48.0])
    assert_allclose(rigid.vertices[8, 6], [512.0, 384.0])
    assert rigid_extent(rigid) == (512.0, 384.0)
    assert is_rigid(rigid)


def test_rigid_mesh_minimum_resolution():
    rigid = build_rigid_mesh(10, 10, 1, 1)
    assert rigid.shape == (2, 2)
    assert_allclose(rigid.vertices.reshape(-1, 2), [[0, 0], [10, 0], [0, 10], [10, 10]])


@pytest.mark.parametrize('u,v', [(0, 6), (8, 0), (2.5, 3)])
def test_rigid_mesh_rejects_bad_resolution(u, v):
    with pytest.raises(MeshError):
        build_rigid_mesh(512, 384, u, v)


def test_rigid_mesh_rejects_empty_extent():
    with pytest.raises(MeshError):
        build_rigid_mesh(0, 384, 8, 6)


def test_mesh_rejects_non_finite():
    vertices = build_rigid_mesh(64, 48, 2, 2).vertices.copy()
    vertices[1, 1, 0] = np.nan
    with pytest.raises(MeshError):
        MeshGrid(vertices)


def test_mesh_vertices_are_read_only():
    rigid = build_rigid_mesh(64, 48, 2, 2)
    with pytest.raises(ValueError):
        rigid.vertices[0, 0, 0] = 1.0


def test_apply_and_recover_motion():
    rigid = build_rigid_mesh(64, 48, 4, 3)
    rng = np.random.default_rng(0)
    motion = MeshMotion(rng.uniform(-2, 2, size=(5, 4, 2)))
    mesh = apply_motion(rigid, motion)
    assert motion_between(rigid, mesh) == motion
    assert apply_motion(rigid, MeshMotion.zeros(5, 4)) == rigid
    assert not is_rigid(mesh)


def test_motion_shape_mismatch():
    rigid = build_rigid_mesh(64, 48, 4, 3)
    with pytest.raises(MeshError):
        apply_motion(rigid, MeshMotion.zeros(4, 4))


def test_motion_arithmetic():
    a = MeshMotion.uniform(2, 2, 1.0, -2.0)
    b = MeshMotion.uniform(2, 2, 0.5, 0.5)
    assert_allclose((a + b).dx, 1.5)
    assert_allclose((a + b).dy, -1.5)
    assert (-a).max_abs() == 2.0
    assert_allclose(a.scaled(2.0, 3.0).dy, -6.0)


def test_mesh_edges_counts():
    rigid = build_rigid_mesh(512, 384, 8, 6)
    horizontal, vertical = mesh_edges(rigid)
    assert horizontal.shape == (9 * 6, 2)
    assert vertical.shape == (8 * 7, 2)
    assert_allclose(horizontal, [[512 / 6, 0.0]] * 54)
    assert_allclose(vertical, [[0.0, 48.0]] * 56)


def test_cell_jacobians_of_rigid_mesh():
    rigid = build_rigid_mesh(512, 384, 8, 6)
    jac = cell_jacobians(rigid)
    assert jac.shape == (8, 6, 4)
    assert_allclose(jac, 512 / 6 * 48)


def test_cell_jacobians_detect_fold():
    vertices = build_rigid_mesh(60, 60, 2, 2).vertices.copy()
    vertices[1, 1] = [65.0, 30.0]
    jac = cell_jacobians(MeshGrid(vertices))
    assert np.all(jac[0, 0] > 0)
    assert np.any(jac[0, 1] <= 0)


def test_outline_and_footprint():
    rigid = build_rigid_mesh(512, 384, 8, 6)
    ring = outline(rigid)
    assert len(ring) == 2 * (8 + 6)
    assert footprint_area(rigid) == pytest.approx(512 * 384)
    shrunk = rigid.scaled(0.5, center=(256, 192))
    assert footprint_area(shrunk) == pytest.approx(0.25 * 512 * 384)


def test_mesh_json_round_trip():
    rigid = build_rigid_mesh(64, 48, 4, 3)
    mesh = apply_motion(rigid, MeshMotion.uniform(5, 4, 0.25, -0.5))
    assert mesh_from_json(mesh_to_json(mesh)) == mesh


def test_motion_json_layout():
    text = motion_to_json(MeshMotion.uniform(2, 3, 1.0, 2.0))
    assert '"offsets"' in text and '"rows": 2' in text


@pytest.mark.parametrize('text', ['not json', '{"rows": 2}', '{"rows": 2, "cols": 2, "vertices": [[0, 0]]}'])
def test_mesh_json_rejects_malformed(text):
    with pytest.raises(MeshError):
        mesh_from_json(text)
