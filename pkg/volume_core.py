"""
Volume geometry core for CTMORPH
Grids, voxel-to-world affines, interpolation, smoothing and multiresolution
pyramids shared by every pipeline stage.

Arrays are indexed [i, j, k] and stored x-fastest on disk (NIfTI order).
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from errors import InvalidArgumentError, SpaceMismatchError

logger = logging.getLogger(__name__)

GAUSSIAN_TRUNCATE = 3.0
MIN_PYRAMID_DIM = 4
# Output voxels resampled per chunk; bounds the coordinate buffers
RESAMPLE_CHUNK = 1 << 21


def _as_matrix(matrix):
    matrix = np.array(matrix, dtype=np.float64)
    if matrix.shape != (4, 4):
        raise InvalidArgumentError(f"expected a 4x4 matrix, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise InvalidArgumentError("matrix contains non-finite values")
    if np.max(np.abs(matrix[3] - [0.0, 0.0, 0.0, 1.0])) > 1e-9:
        raise InvalidArgumentError(f"bottom row must be (0, 0, 0, 1), got {matrix[3].tolist()}")
    matrix[3] = [0.0, 0.0, 0.0, 1.0]
    return matrix


def is_orthogonal(linear, tol=1e-6):
    """True when the columns of a 3x3 block are mutually orthogonal"""
    linear = np.asarray(linear, dtype=np.float64)
    directions = linear / np.linalg.norm(linear, axis=0)
    return bool(np.max(np.abs(directions.T @ directions - np.eye(3))) < tol)


@dataclass(frozen=True, eq=False)
class Grid:
    """Voxel lattice: dims plus the homogeneous voxel-to-world matrix (mm)"""

    dims: tuple
    affine: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise InvalidArgumentError(f"grid dims must be 3 positive integers, got {self.dims}")
        affine = _as_matrix(self.affine)
        if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
            raise InvalidArgumentError("voxel_to_world 3x3 block is singular")
        object.__setattr__(self, 'dims', dims)
        object.__setattr__(self, 'affine', affine)

    @classmethod
    def from_spacing(cls, dims, spacing, origin=(0.0, 0.0, 0.0)):
        affine = np.eye(4)
        affine[:3, :3] = np.diag(np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,)))
        affine[:3, 3] = origin
        return cls(dims, affine)

    @classmethod
    def from_parts(cls, dims, spacing, affine):
        """Build a grid and check the declared spacing against the affine columns"""
        grid = cls(dims, affine)
        spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
        if np.any(np.abs(grid.spacing - spacing) > 1e-4 * np.maximum(spacing, 1e-12)):
            raise InvalidArgumentError(
                f"spacing {spacing.tolist()} disagrees with affine column norms {grid.spacing.tolist()}")
        return grid

    @property
    def spacing(self):
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    @property
    def linear(self):
        return self.affine[:3, :3]

    @property
    def inverse_affine(self):
        return np.linalg.inv(self.affine)

    @property
    def voxel_volume(self):
        return float(abs(np.linalg.det(self.affine[:3, :3])))

    @property
    def n_voxels(self):
        return int(np.prod(self.dims))

    @property
    def center_world(self):
        center = (np.asarray(self.dims, dtype=np.float64) - 1.0) / 2.0
        return self.affine[:3, :3] @ center + self.affine[:3, 3]

    def same_as(self, other, atol=1e-5):
        return self.dims == other.dims and bool(np.allclose(self.affine, other.affine, atol=atol))

    def world_to_voxel(self, points):
        points = np.asarray(points, dtype=np.float64)
        inverse = self.inverse_affine
        return points @ inverse[:3, :3].T + inverse[:3, 3]

    def voxel_to_world(self, indices):
        indices = np.asarray(indices, dtype=np.float64)
        return indices @ self.affine[:3, :3].T + self.affine[:3, 3]

    def voxel_coords(self):
        """Index coordinates of every voxel, shape (3, nx, ny, nz)"""
        return np.indices(self.dims, dtype=np.float64)

    def world_coords(self):
        """World coordinates of every voxel centre, shape (nx, ny, nz, 3)"""
        idx = np.moveaxis(self.voxel_coords(), 0, -1)
        return self.voxel_to_world(idx)

    def interior_mask(self, margin=1):
        mask = np.zeros(self.dims, dtype=bool)
        inner = tuple(slice(margin, d - margin) for d in self.dims)
        mask[inner] = True
        return mask


@dataclass(frozen=True, eq=False)
class Volume3:
    """Scalar volume on a grid; float32 data (HU for CT)"""

    grid: Grid
    data: np.ndarray

    dtype = np.float32

    def __post_init__(self):
        data = self._coerce(np.asarray(self.data))
        if data.shape != self.grid.dims:
            raise InvalidArgumentError(f"data shape {data.shape} does not match grid dims {self.grid.dims}")
        object.__setattr__(self, 'data', data)

    def _coerce(self, data):
        return data.astype(self.dtype, copy=False)

    @classmethod
    def from_array(cls, data, affine=None, spacing=(1.0, 1.0, 1.0), **kwargs):
        data = np.asarray(data)
        grid = Grid(data.shape, affine) if affine is not None else Grid.from_spacing(data.shape, spacing)
        return cls(grid, data, **kwargs)

    @property
    def dims(self):
        return self.grid.dims

    @property
    def spacing(self):
        return self.grid.spacing

    @property
    def affine(self):
        return self.grid.affine

    def with_data(self, data):
        return type(self)(self.grid, data)

    def on_grid(self, grid, data):
        return type(self)(grid, data)


@dataclass(frozen=True, eq=False)
class LabelVolume(Volume3):
    """Integer label grid; 0 is background, label_table maps label -> name"""

    label_table: dict = field(default_factory=dict)

    dtype = np.int32

    def _coerce(self, data):
        if np.issubdtype(data.dtype, np.floating):
            if not np.all(np.isfinite(data)) or np.any(data != np.round(data)):
                raise InvalidArgumentError("label data must be integer-valued")
        if data.size and data.min() < 0:
            raise InvalidArgumentError("label data must be non-negative")
        return data.astype(self.dtype, copy=False)

    def with_data(self, data):
        return LabelVolume(self.grid, data, dict(self.label_table))

    def on_grid(self, grid, data):
        return LabelVolume(grid, data, dict(self.label_table))

    def labels(self):
        """Sorted nonzero labels present in the volume"""
        values = np.unique(self.data)
        return [int(v) for v in values if v != 0]


@dataclass(frozen=True)
class Interpolation:
    """Interpolation kind plus out-of-bounds policy"""

    kind: str = 'trilinear'
    out_of_bounds: str = 'constant'
    fill_value: float = 0.0

    def __post_init__(self):
        if self.kind not in ('trilinear', 'nearest'):
            raise InvalidArgumentError(f"unknown interpolation kind '{self.kind}'")
        if self.out_of_bounds not in ('constant', 'clamp'):
            raise InvalidArgumentError(f"unknown out-of-bounds policy '{self.out_of_bounds}'")

    def with_fill(self, value):
        return Interpolation(self.kind, 'constant', float(value))


TRILINEAR = Interpolation('trilinear')
TRILINEAR_CLAMP = Interpolation('trilinear', 'clamp')
NEAREST = Interpolation('nearest')


def check_mode(vol, mode):
    if isinstance(vol, LabelVolume) and mode.kind != 'nearest':
        raise InvalidArgumentError("label volumes must be sampled with nearest interpolation")


def round_half_away(values):
    """Round to integer, ties away from zero (deterministic label resampling)"""
    return np.where(values >= 0, np.floor(values + 0.5), np.ceil(values - 0.5))


def sample_array(data, coords, mode=TRILINEAR):
    """Sample a 3D array at continuous voxel coordinates of shape (3, N)"""
    coords = np.asarray(coords, dtype=np.float64)
    clamp = mode.out_of_bounds == 'clamp'
    if mode.kind == 'trilinear':
        return ndimage.map_coordinates(
            data, coords, order=1, mode='nearest' if clamp else 'constant',
            cval=mode.fill_value, output=np.float64, prefilter=False)

    idx = round_half_away(coords)
    upper = np.asarray(data.shape, dtype=np.float64)[:, None] - 1.0
    if clamp:
        idx = np.clip(idx, 0.0, upper)
    inside = np.all((idx >= 0.0) & (idx <= upper), axis=0)
    out_dtype = data.dtype if np.issubdtype(data.dtype, np.integer) else np.float64
    out = np.full(coords.shape[1], mode.fill_value, dtype=out_dtype)
    hits = idx[:, inside].astype(np.intp)
    out[inside] = data[hits[0], hits[1], hits[2]]
    return out


def sample_points(vol, world_points, mode=TRILINEAR):
    """Sample a volume at world points of shape (N, 3)"""
    check_mode(vol, mode)
    points = np.asarray(world_points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(points)):
        raise InvalidArgumentError("world point must be finite")
    coords = vol.grid.world_to_voxel(points).T
    return sample_array(vol.data, coords, mode)


def sample(vol, world_point, mode=TRILINEAR):
    """Sample one world point (mm); returns a Python scalar"""
    point = np.asarray(world_point, dtype=np.float64)
    if point.shape != (3,):
        raise InvalidArgumentError(f"world point must be a 3-vector, got shape {point.shape}")
    value = sample_points(vol, point[None, :], mode)[0]
    return value.item()


def resample(vol, target, mode=TRILINEAR):
    """
    Pull-back resampling onto `target` (a Grid): output voxel (i, j, k) is
    sample(vol, target.affine @ (i, j, k, 1), mode).
    """
    check_mode(vol, mode)
    if not isinstance(target, Grid):
        raise InvalidArgumentError("resample target must be a Grid")
    voxel_map = vol.grid.inverse_affine @ target.affine
    nx, ny, nz = target.dims
    out_dtype = vol.data.dtype if isinstance(vol, LabelVolume) else np.float32
    out = np.empty(target.dims, dtype=out_dtype)
    slab = max(1, RESAMPLE_CHUNK // (nx * ny))
    for k0 in range(0, nz, slab):
        k1 = min(nz, k0 + slab)
        idx = np.mgrid[0:nx, 0:ny, k0:k1].reshape(3, -1).astype(np.float64)
        coords = voxel_map[:3, :3] @ idx + voxel_map[:3, 3:4]
        out[:, :, k0:k1] = sample_array(vol.data, coords, mode).reshape(nx, ny, k1 - k0)
    return vol.on_grid(target, out)


def smooth_array(data, sigma_vox):
    """Separable Gaussian (truncated at 3 sigma, renormalised, clamp-to-edge)"""
    sigma_vox = np.broadcast_to(np.asarray(sigma_vox, dtype=np.float64), (data.ndim,))
    if not np.any(sigma_vox > 0):
        return np.array(data, copy=True)
    return ndimage.gaussian_filter(data, sigma=tuple(sigma_vox), mode='nearest',
                                   truncate=GAUSSIAN_TRUNCATE)


def gaussian_smooth(vol, sigma_mm):
    """Smooth with a per-axis sigma given in mm; sigma 0 leaves that axis untouched"""
    if isinstance(vol, LabelVolume):
        raise InvalidArgumentError("label volumes cannot be smoothed")
    sigma = np.broadcast_to(np.asarray(sigma_mm, dtype=np.float64), (3,))
    if not np.all(np.isfinite(sigma)) or np.any(sigma < 0):
        raise InvalidArgumentError(f"sigma must be non-negative, got {sigma.tolist()}")
    return vol.with_data(smooth_array(vol.data, sigma / vol.spacing))


def build_pyramid(vol, levels):
    """
    Multiresolution pyramid, finest first. Each level is the previous one
    smoothed with sigma = 1 voxel and sampled at twice the spacing (dims
    halved, rounded up). Stops early rather than shrink an axis below 4 voxels.
    """
    if int(levels) < 1:
        raise InvalidArgumentError(f"levels must be >= 1, got {levels}")
    pyramid = [vol]
    while len(pyramid) < int(levels):
        prev = pyramid[-1]
        dims = tuple((d + 1) // 2 for d in prev.dims)
        if min(dims) < MIN_PYRAMID_DIM:
            logger.debug("pyramid truncated at %d levels (next dims %s)", len(pyramid), dims)
            break
        grid = Grid(dims, prev.affine @ np.diag([2.0, 2.0, 2.0, 1.0]))
        # coarse voxel centres sit exactly on even fine voxels, so sampling is decimation
        smoothed = smooth_array(prev.data, 1.0)
        pyramid.append(prev.on_grid(grid, smoothed[::2, ::2, ::2]))
    return pyramid


def resample_isotropic(vol, spacing, mode=TRILINEAR_CLAMP):
    """Resample to isotropic voxels keeping orientation, origin and field of view"""
    spacing = float(spacing)
    if spacing <= 0:
        raise InvalidArgumentError(f"target spacing must be positive, got {spacing}")
    old = vol.spacing
    extent = (np.asarray(vol.dims, dtype=np.float64) - 1.0) * old
    dims = tuple(int(n) for n in np.floor(extent / spacing + 1e-6).astype(int) + 1)
    affine = np.eye(4)
    affine[:3, :3] = vol.affine[:3, :3] / old * spacing
    affine[:3, 3] = vol.affine[:3, 3]
    return resample(vol, Grid(dims, affine), NEAREST if isinstance(vol, LabelVolume) else mode)


def center_of_mass(vol):
    """Intensity-weighted centroid in world mm (weights shifted to be non-negative)"""
    weights = vol.data.astype(np.float64) - float(vol.data.min())
    total = weights.sum()
    if total <= 0:
        return vol.grid.center_world
    idx = np.array([np.sum(weights * np.arange(n).reshape([-1 if a == ax else 1 for a in range(3)]))
                    for ax, n in enumerate(vol.dims)]) / total
    return vol.grid.voxel_to_world(idx)


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """World-to-world homogeneous map from `source_space` into `target_space`"""

    matrix: np.ndarray
    source_space: str = None
    target_space: str = None

    def __post_init__(self):
        matrix = _as_matrix(self.matrix)
        if abs(np.linalg.det(matrix[:3, :3])) < 1e-12:
            raise InvalidArgumentError("affine transform is singular")
        residual = np.max(np.abs(matrix @ np.linalg.inv(matrix) - np.eye(4)))
        if residual >= 1e-8:
            raise InvalidArgumentError(f"affine transform is numerically singular (residual {residual:.2e})")
        object.__setattr__(self, 'matrix', matrix)

    @classmethod
    def identity(cls, source_space=None, target_space=None):
        return cls(np.eye(4), source_space, target_space)

    @property
    def linear(self):
        return self.matrix[:3, :3]

    @property
    def translation(self):
        return self.matrix[:3, 3]

    @property
    def determinant(self):
        return float(np.linalg.det(self.matrix[:3, :3]))

    def inverse(self):
        return AffineTransform(np.linalg.inv(self.matrix), self.target_space, self.source_space)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.matrix[:3, :3].T + self.matrix[:3, 3]

    def compose(self, other):
        """self after other"""
        if other.target_space and self.source_space and other.target_space != self.source_space:
            raise SpaceMismatchError(self.source_space, other.target_space)
        return AffineTransform(self.matrix @ other.matrix, other.source_space, self.target_space)

    def save(self, path):
        header = f"source={self.source_space or 'unknown'} target={self.target_space or 'unknown'}"
        np.savetxt(path, self.matrix, fmt='%.17g', header=header)

    @classmethod
    def load(cls, path):
        with open(path, 'r', encoding='utf-8') as handle:
            first = handle.readline().lstrip('#').split()
        spaces = dict(token.split('=', 1) for token in first if '=' in token)
        source = spaces.get('source')
        target = spaces.get('target')
        matrix = np.loadtxt(path, comments='#')
        return cls(matrix,
                   None if source in (None, 'unknown') else source,
                   None if target in (None, 'unknown') else target)
