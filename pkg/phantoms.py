"""
Synthetic CT phantoms for CTMORPH tests and demos
Heads, spheres, textured volumes, label atlases and smooth velocity fields,
all deterministic.
"""

import numpy as np
from scipy import ndimage

from registration import VelocityField
from volume_core import Grid, LabelVolume, Volume3

AIR_HU = -1000.0
BONE_HU = 1200.0
TISSUE_HU = 40.0
CSF_HU = 8.0


def cube_grid(n, spacing=1.0):
    """n^3 grid centred on the world origin"""
    half = (n - 1) / 2.0 * spacing
    return Grid.from_spacing((n, n, n), spacing, origin=(-half, -half, -half))


def _radius(grid, center):
    return np.sqrt(((grid.world_coords() - np.asarray(center, dtype=np.float64)) ** 2).sum(axis=-1))


def smooth_sphere(grid, center, radius, inside=100.0, outside=0.0, edge_mm=1.0):
    """Sphere with a tanh edge of width edge_mm"""
    r = _radius(grid, center)
    weight = 0.5 * (1.0 - np.tanh((r - radius) / edge_mm))
    return Volume3(grid, outside + (inside - outside) * weight)


def head_phantom(n=32, spacing=1.0, shift=(0.0, 0.0, 0.0), bias=None):
    """
    Ellipsoidal head: air, a 2-voxel bone shell, soft tissue with two CSF
    ventricles. `bias` scales the tissue by (1 + bias * x / extent).
    """
    grid = cube_grid(n, spacing)
    world = grid.world_coords() - np.asarray(shift, dtype=np.float64)
    extent = (n - 1) / 2.0 * spacing
    axes = np.array([0.42, 0.36, 0.40]) * 2 * extent
    r = np.sqrt(((world / axes) ** 2).sum(axis=-1))
    thickness = 2.0 * spacing / axes.min()

    data = np.full(grid.dims, AIR_HU)
    data[r <= 1.0] = BONE_HU
    brain = r <= 1.0 - thickness
    data[brain] = TISSUE_HU
    for offset in ((0.2, 0.1, 0.05), (-0.25, 0.05, -0.1)):
        centre = np.asarray(offset) * extent
        ventricle = np.sqrt(((world - centre) ** 2).sum(axis=-1)) <= 0.18 * extent
        data[ventricle & brain] = CSF_HU
    if bias:
        ramp = 1.0 + bias * world[..., 0] / extent
        data[brain] *= ramp[brain]
    return Volume3(grid, data.astype(np.float32))


def two_sphere_phantom(n=64, spacing=1.0):
    """Two off-centre spheres of different radius and intensity plus a faint body"""
    grid = cube_grid(n, spacing)
    body = smooth_sphere(grid, (0.0, 0.0, 0.0), 0.4 * n * spacing, 30.0, 0.0, 2.0)
    first = smooth_sphere(grid, (-0.18 * n, 0.1 * n, 0.0), 0.14 * n * spacing, 100.0, 0.0, 1.5)
    second = smooth_sphere(grid, (0.2 * n, -0.06 * n, 0.06 * n), 0.09 * n * spacing, 200.0, 0.0, 1.5)
    return Volume3(grid, body.data + first.data + second.data)


def textured_phantom(n=64, spacing=1.0, seed=0, blob_sigma_mm=3.0):
    """Smoothed random texture inside a sphere, background 0"""
    grid = cube_grid(n, spacing)
    rng = np.random.default_rng(seed)
    noise = ndimage.gaussian_filter(rng.standard_normal(grid.dims), blob_sigma_mm / spacing, mode='nearest')
    noise /= np.abs(noise).max()
    ball = smooth_sphere(grid, (0.0, 0.0, 0.0), 0.4 * n * spacing, 1.0, 0.0, 2.0).data
    return Volume3(grid, (100.0 + 60.0 * noise) * ball)


def sphere_label_atlas(grid, centers, radius, names=None):
    """Labels 1..len(centers), one ball each; later balls win overlaps"""
    data = np.zeros(grid.dims, dtype=np.int32)
    for label, center in enumerate(centers, start=1):
        data[_radius(grid, center) <= radius] = label
    table = {label: (names[label - 1] if names else f"region_{label}") for label in range(1, len(centers) + 1)}
    return LabelVolume(grid, data, table)


def five_sphere_atlas(grid, radius=10.0):
    n = grid.dims[0] * float(grid.spacing[0])
    offset = 0.32 * n
    centers = [(0.0, 0.0, 0.0), (offset, 0.0, 0.0), (-offset, 0.0, 0.0), (0.0, offset, 0.0), (0.0, -offset, 0.0)]
    return sphere_label_atlas(grid, centers, radius)


def parcel_atlas(mask, n_labels, seed=0):
    """Split the nonzero voxels of `mask` into n_labels nearest-seed parcels"""
    inside = np.argwhere(np.asarray(mask.data) > 0)
    if len(inside) < n_labels:
        raise ValueError(f"mask holds {len(inside)} voxels, fewer than {n_labels} parcels")
    rng = np.random.default_rng(seed)
    seeds = inside[rng.choice(len(inside), size=n_labels, replace=False)].astype(np.float64)
    # nearest seed voxel for every voxel, then read off that seed's label
    _, nearest = ndimage.distance_transform_edt(_seed_image(mask.dims, seeds), return_indices=True)
    picked = _seed_owner(mask.dims, seeds)[tuple(nearest)]
    foreground = np.asarray(mask.data) > 0
    data = np.zeros(mask.dims, dtype=np.int32)
    data[foreground] = picked[foreground]
    return LabelVolume(mask.grid, data, {label: f"parcel_{label:03d}" for label in range(1, n_labels + 1)})


def _seed_image(dims, seeds):
    image = np.ones(dims, dtype=bool)
    idx = seeds.astype(np.intp)
    image[idx[:, 0], idx[:, 1], idx[:, 2]] = False
    return image


def _seed_owner(dims, seeds):
    owner = np.zeros(dims, dtype=np.int32)
    idx = seeds.astype(np.intp)
    owner[idx[:, 0], idx[:, 1], idx[:, 2]] = np.arange(1, len(seeds) + 1)
    return owner


def gaussian_bump_velocity(grid, center=(0.0, 0.0, 0.0), amplitude_mm=4.0, sigma_mm=6.0,
                           direction=(1.0, 0.0, 0.0)):
    """v(x) = amplitude * exp(-|x - c|^2 / (2 sigma^2)) * direction"""
    unit = np.asarray(direction, dtype=np.float64)
    unit = unit / np.linalg.norm(unit)
    r = _radius(grid, center)
    profile = amplitude_mm * np.exp(-r ** 2 / (2.0 * sigma_mm ** 2))
    return VelocityField(grid, profile[..., None] * unit)
