"""
Tests for Jacobian statistics and regional geometry
"""

import math

import numpy as np
import pandas as pd
import pytest
from scipy import ndimage

from errors import InvalidArgumentError
from phantoms import cube_grid, sphere_label_atlas
from quantify import (GEO_COLUMNS, WARP_STATS_COLUMNS, geo_measures, geo_measures_frame, jacobian_array,
                      jacobian_determinant, physical_jacobian, surface_area, warp_stats, warp_stats_frame,
                      write_csv)
from registration import DisplacementField
from volume_core import AffineTransform, Grid, LabelVolume, Volume3


def test_linear_expansion_jacobian():
    grid = Grid.from_spacing((12, 10, 8), (1.0, 2.0, 1.5))
    world = grid.world_coords()
    vectors = np.zeros(tuple(grid.dims) + (3,))
    vectors[..., 0] = 0.1 * world[..., 0]
    jac = jacobian_determinant(DisplacementField(grid, vectors))
    assert np.allclose(jac.data[1:-1, 1:-1, 1:-1], 1.1, atol=1e-4)


def test_jacobian_of_rotated_grid_uses_world_units():
    angle = np.deg2rad(30.0)
    affine = np.eye(4)
    affine[:3, :3] = np.array([[np.cos(angle), -np.sin(angle), 0.0],
                               [np.sin(angle), np.cos(angle), 0.0],
                               [0.0, 0.0, 1.0]]) @ np.diag([2.0, 1.0, 1.0])
    grid = Grid((10, 10, 10), affine)
    world = grid.world_coords()
    vectors = np.zeros(tuple(grid.dims) + (3,))
    vectors[..., 1] = -0.2 * world[..., 1]
    assert np.allclose(jacobian_array(vectors, grid), 0.8, atol=1e-6)


def test_two_valued_field_statistics():
    values = np.full(400, 1.1)
    values[:100] = 0.9
    jac = Volume3.from_array(values.reshape(20, 20, 1).repeat(2, axis=2))
    mask = LabelVolume.from_array(np.ones(jac.dims, dtype=np.int32))
    stats = warp_stats(jac, mask, bins=64)
    assert stats.jac_mean == pytest.approx(1.05, abs=1e-3)
    assert stats.jac_std == pytest.approx(0.0866, abs=1e-3)
    assert stats.jac_entropy == pytest.approx(0.8113, abs=1e-3)
    assert stats.n_voxels == 800 and stats.bins == 64


def test_constant_field_has_zero_entropy():
    jac = Volume3.from_array(np.ones((4, 4, 4)))
    mask = LabelVolume.from_array(np.ones((4, 4, 4), dtype=np.int32))
    stats = warp_stats(jac, mask)
    assert stats.jac_entropy == 0.0 and stats.jac_std == 0.0


def test_warp_stats_need_a_mask():
    jac = Volume3.from_array(np.ones((4, 4, 4)))
    with pytest.raises(InvalidArgumentError):
        warp_stats(jac, LabelVolume.from_array(np.zeros((4, 4, 4), dtype=np.int32)))


def test_physical_jacobian_multiplies_affine_determinant():
    grid = cube_grid(10)
    jac = Volume3(grid, np.full(grid.dims, 1.2))
    prealign = AffineTransform(np.diag([1.1, 1.0, 1.0, 1.0]), 'native', 'prealigned')
    physical = physical_jacobian(jac, prealign, cube_grid(6, spacing=2.0))
    assert physical.dims == (6, 6, 6)
    assert np.allclose(physical.data, 1.32, atol=1e-5)


def test_sphere_volume_and_area():
    grid = cube_grid(40)
    labels = sphere_label_atlas(grid, [(0.0, 0.0, 0.0)], 15.0)
    (region,) = geo_measures(labels)
    assert region.volume_mm3 == pytest.approx(4.0 / 3.0 * math.pi * 15.0 ** 3, rel=0.02)
    ratio = region.surface_area_mm2 / (4.0 * math.pi * 15.0 ** 2)
    # binary marching cubes overestimates a rasterized sphere by about 10%
    assert 1.05 <= ratio <= 1.12
    assert np.allclose(region.centroid_world, [0.0, 0.0, 0.0], atol=1e-6)


def test_cube_area_matches_marching_cubes_geometry():
    indicator = np.zeros((14, 14, 14), dtype=bool)
    indicator[2:12, 2:12, 2:12] = True
    expected = 486.0 + 108.0 * math.sqrt(0.5) + math.sqrt(3.0)
    assert surface_area(indicator, Grid.from_spacing(indicator.shape, 1.0)) == pytest.approx(expected, abs=0.1)


def test_area_scales_with_spacing():
    indicator = np.zeros((8, 8, 8), dtype=bool)
    indicator[2:6, 2:6, 2:6] = True
    unit = surface_area(indicator, Grid.from_spacing(indicator.shape, 1.0))
    assert surface_area(indicator, Grid.from_spacing(indicator.shape, 2.0)) == pytest.approx(4.0 * unit)


def test_volume_additivity_and_ordering():
    data = np.zeros((12, 12, 12), dtype=np.int32)
    data[1:5, 1:5, 1:5] = 7
    data[6:11, 2:4, 3:9] = 2
    labels = LabelVolume(Grid.from_spacing(data.shape, (0.5, 1.0, 2.0)), data, {2: 'two', 7: 'seven'})
    rows = geo_measures(labels)
    assert [r.label for r in rows] == [2, 7]
    assert [r.name for r in rows] == ['two', 'seven']
    union = LabelVolume(labels.grid, (data > 0).astype(np.int32))
    (whole,) = geo_measures(union)
    assert sum(r.volume_mm3 for r in rows) == whole.volume_mm3
    assert rows[1].voxel_count == 64


def test_expected_labels_get_zero_rows():
    data = np.zeros((6, 6, 6), dtype=np.int32)
    data[1:3, 1:3, 1:3] = 1
    rows = geo_measures(LabelVolume.from_array(data), {1: 'a', 4: 'd'}, 'physical', expected_labels=[1, 4])
    assert [r.label for r in rows] == [1, 4]
    assert rows[1].voxel_count == 0 and rows[1].surface_area_mm2 == 0.0
    assert all(math.isnan(c) for c in rows[1].centroid_world)
    assert rows[1].space == 'physical'


def test_csv_layouts(tmp_path):
    jac = Volume3.from_array(np.linspace(0.9, 1.1, 64).reshape(4, 4, 4))
    mask = LabelVolume.from_array(np.ones((4, 4, 4), dtype=np.int32))
    stats = warp_stats(jac, mask)
    write_csv(warp_stats_frame([('s01', 'physical', stats), ('s01', 'normalized', stats)]), tmp_path / 'w.csv')
    warp = pd.read_csv(tmp_path / 'w.csv')
    assert list(warp.columns) == WARP_STATS_COLUMNS
    assert warp['space'].tolist() == ['physical', 'normalized']

    labels = sphere_label_atlas(cube_grid(12), [(0.0, 0.0, 0.0)], 3.0)
    write_csv(geo_measures_frame('s01', geo_measures(labels)), tmp_path / 'g.csv')
    text = (tmp_path / 'g.csv').read_text()
    assert text.splitlines()[0] == ','.join(GEO_COLUMNS)
    assert '\r' not in text


def test_jacobian_agrees_with_forward_differences():
    grid = cube_grid(24)
    rng = np.random.default_rng(9)
    vectors = np.stack([ndimage.gaussian_filter(rng.standard_normal(grid.dims), 5.0, mode='nearest')
                        for _ in range(3)], axis=-1)
    vectors *= 0.5 / np.abs(vectors).max()
    jac = jacobian_array(vectors, grid)

    # du_a/dx_b by forward differences, independent of the central stencil
    gradient = np.zeros(tuple(grid.dims) + (3, 3))
    for b in range(3):
        gradient[..., b] = np.roll(vectors, -1, axis=b) - vectors
    oracle = np.linalg.det(np.eye(3) + gradient)
    inner = (slice(2, -2),) * 3
    assert np.allclose(jac[inner], oracle[inner], rtol=0.05)


def test_affine_displacement_has_constant_determinant():
    grid = Grid.from_spacing((14, 12, 10), (1.0, 1.5, 2.0), origin=(-7.0, -9.0, -10.0))
    matrix = np.array([[1.1, 0.05, 0.0], [0.02, 0.95, 0.03], [0.0, -0.04, 1.05]])
    world = grid.world_coords()
    vectors = world @ (matrix - np.eye(3)).T + np.array([1.0, -2.0, 0.5])
    jac = jacobian_determinant(DisplacementField(grid, vectors))
    assert np.allclose(jac.data[1:-1, 1:-1, 1:-1], np.linalg.det(matrix), atol=1e-4)


def test_area_ignores_label_number_and_grid_position():
    grid = cube_grid(24)
    labels = sphere_label_atlas(grid, [(1.0, -2.0, 0.5)], 7.0)
    (reference,) = geo_measures(labels)

    renumbered = LabelVolume(grid, np.where(labels.data > 0, 9, 0).astype(np.int32))
    moved_affine = grid.affine.copy()
    moved_affine[:3, 3] += [37.0, -12.5, 4.0]
    moved = LabelVolume(Grid(grid.dims, moved_affine), labels.data)
    for other in (renumbered, moved):
        (region,) = geo_measures(other)
        assert region.surface_area_mm2 == pytest.approx(reference.surface_area_mm2, rel=1e-6)
        assert region.volume_mm3 == reference.volume_mm3
