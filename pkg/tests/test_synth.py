import json
import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose

from lib.config import EnergyConfig
from lib.energy import intra_grid_loss
from lib.mesh import MeshMotion, apply_motion, build_rigid_mesh, cell_jacobians, mesh_from_json
from lib.raster import load_image, load_mask, save_image
from lib.synth import (ROUND_TRIP_MIN_PSNR, VOID_RANGE, DatasetError, build_dataset, fit_to_raster,
                       load_triplets, random_deformation, round_trip_psnr, sample_seed,
                       synthesize_triplet)


@pytest.fixture
def synth_cfg():
    return EnergyConfig(mesh_u=4, mesh_v=3, image_w=128, image_h=96)


def test_zero_magnitude_is_rigid():
    rigid = build_rigid_mesh(128, 96, 4, 3)
    assert random_deformation(rigid, 0.0, rng_seed=1) == MeshMotion.zeros(5, 4)


def test_negative_magnitude_rejected():
    rigid = build_rigid_mesh(128, 96, 4, 3)
    with pytest.raises(DatasetError):
        random_deformation(rigid, -1.0, rng_seed=1)


def test_deformation_is_deterministic_per_seed():
    rigid = build_rigid_mesh(128, 96, 4, 3)
    assert random_deformation(rigid, 8.0, rng_seed=3) == random_deformation(rigid, 8.0, rng_seed=3)
    assert not random_deformation(rigid, 8.0, rng_seed=3) == random_deformation(rigid, 8.0, rng_seed=4)


@pytest.mark.parametrize('seed', range(5))
def test_deformation_is_valid(seed, synth_cfg):
    rigid = build_rigid_mesh(128, 96, 4, 3)
    mesh = apply_motion(rigid, random_deformation(rigid, 8.0, rng_seed=seed))
    assert np.all(cell_jacobians(mesh) > 0)
    assert intra_grid_loss([mesh], synth_cfg) == 0.0
    v = mesh.vertices
    assert v[..., 0].min() >= 0 and v[..., 0].max() <= 128
    assert v[..., 1].min() >= 0 and v[..., 1].max() <= 96


def test_zero_motion_triplet_is_identity(make_image, synth_cfg):
    rect = make_image(128, 96, seed=2)
    triplet = synthesize_triplet(rect, MeshMotion.zeros(5, 4), synth_cfg)
    assert_allclose(triplet.stitched.data, rect.data, atol=1e-9)
    assert triplet.void_fraction == 0.0
    assert triplet.label is rect


@pytest.mark.parametrize('seed', range(3))
def test_triplet_void_and_round_trip(seed, make_image, synth_cfg):
    rect = make_image(128, 96, seed=seed)
    rigid = build_rigid_mesh(128, 96, 4, 3)
    triplet = synthesize_triplet(rect, random_deformation(rigid, 8.0, rng_seed=seed), synth_cfg, seed)
    assert VOID_RANGE[0] <= triplet.void_fraction <= VOID_RANGE[1]
    assert round_trip_psnr(triplet, synth_cfg) >= ROUND_TRIP_MIN_PSNR


@pytest.mark.parametrize('seed', range(3, 9))
def test_deformation_void_lands_in_range(seed, make_image, synth_cfg):
    rigid = build_rigid_mesh(128, 96, 4, 3)
    for magnitude in (4.0, 8.0, 12.0):
        motion = random_deformation(rigid, magnitude, rng_seed=seed)
        triplet = synthesize_triplet(make_image(128, 96, seed=seed), motion, synth_cfg)
        assert VOID_RANGE[0] <= triplet.void_fraction <= VOID_RANGE[1], magnitude


def test_sample_seed_is_stable():
    assert sample_seed(7, 3, 0) == sample_seed(7, 3, 0)
    assert len({sample_seed(7, k, a) for k in range(4) for a in range(3)}) == 12


def test_fit_to_raster(make_image):
    assert fit_to_raster(make_image(100, 80), 128, 96) is None
    wide = fit_to_raster(make_image(300, 120), 128, 96)
    assert wide.size == (128, 96)
    same = make_image(128, 96)
    assert fit_to_raster(same, 128, 96) is same


def test_build_dataset_zero_count_writes_nothing(source_dir, tmp_path, synth_cfg):
    out = tmp_path / 'out'
    manifest = build_dataset(str(source_dir), str(out), 0, synth_cfg, seed=1)
    assert manifest['count'] == 0
    assert not out.exists()


def test_build_dataset_writes_triplets(source_dir, tmp_path, synth_cfg):
    out = tmp_path / 'out'
    manifest = build_dataset(str(source_dir), str(out), 4, synth_cfg, seed=9, magnitude=8.0)

    assert manifest['count'] == 4
    for k in range(4):
        tag = f"{k:05d}"
        for prefix in ('input', 'mask', 'gt'):
            assert (out / f"{prefix}_{tag}.png").exists()
        mesh = mesh_from_json((out / f"mesh_{tag}.json").read_text())
        assert mesh.shape == (5, 4)
        mask = load_mask(out / f"mask_{tag}.png")
        assert VOID_RANGE[0] <= mask.void_fraction() <= VOID_RANGE[1]

    on_disk = json.loads((out / 'manifest.json').read_text())
    assert on_disk == json.loads(json.dumps(manifest))
    assert [s['source'] for s in on_disk['samples']] == ['photo_0.png', 'photo_1.png', 'photo_2.png', 'photo_0.png']


def test_build_dataset_is_deterministic(source_dir, tmp_path, synth_cfg):
    build_dataset(str(source_dir), str(tmp_path / 'a'), 2, synth_cfg, seed=5, magnitude=8.0)
    build_dataset(str(source_dir), str(tmp_path / 'b'), 2, synth_cfg, seed=5, magnitude=8.0)
    for name in ('input_00001.png', 'mask_00001.png', 'gt_00001.png', 'mesh_00001.json', 'manifest.json'):
        assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()


def test_build_dataset_split_subdirectory(source_dir, tmp_path, synth_cfg):
    build_dataset(str(source_dir), str(tmp_path), 1, synth_cfg, seed=2, magnitude=8.0, split='test')
    assert (tmp_path / 'test' / 'input_00000.png').exists()
    with pytest.raises(DatasetError):
        build_dataset(str(source_dir), str(tmp_path), 1, synth_cfg, seed=2, split='validation')


def test_undersized_sources_are_skipped(source_dir, tmp_path, synth_cfg, make_image, caplog):
    save_image(make_image(64, 48), source_dir / 'tiny.png')
    with caplog.at_level(logging.WARNING, logger='lib.synth'):
        manifest = build_dataset(str(source_dir), str(tmp_path / 'out'), 3, synth_cfg, seed=4, magnitude=8.0)
    assert 'tiny.png' in caplog.text
    assert 'tiny.png' not in {s['source'] for s in manifest['samples']}


def test_no_usable_sources(tmp_path, synth_cfg, make_image):
    src = tmp_path / 'src'
    src.mkdir()
    save_image(make_image(64, 48), src / 'tiny.png')
    with pytest.raises(DatasetError):
        build_dataset(str(src), str(tmp_path / 'out'), 1, synth_cfg, seed=0)
    with pytest.raises(FileNotFoundError):
        build_dataset(str(tmp_path / 'missing'), str(tmp_path / 'out'), 1, synth_cfg, seed=0)


def test_load_triplets(source_dir, tmp_path, synth_cfg):
    out = tmp_path / 'out'
    build_dataset(str(source_dir), str(out), 3, synth_cfg, seed=6, magnitude=8.0)
    (out / 'gt_00002.png').unlink()

    triplets = load_triplets(str(out))
    assert [t[0] for t in triplets] == ['00000', '00001']
    tag, image, mask, label = triplets[0]
    assert image.size == mask.size == label.size == (128, 96)
    assert_allclose(label.data, load_image(out / 'gt_00000.png').data)
    assert len(load_triplets(str(out), limit=1)) == 1
