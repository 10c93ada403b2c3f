"""
Registration engine for CTMORPH
Affine registration (derivative-free, multiresolution) and log-domain
diffeomorphic demons on a stationary velocity field.

Displacements and velocities are world-frame vectors in mm, stored on the
fixed (template) grid. For a velocity v, exp(+v) is the forward map from the
pre-aligned subject into template space and exp(-v) its inverse.
"""

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from skimage.exposure import match_histograms

from errors import InvalidArgumentError, NotDiffeomorphicError, RegistrationError, SpaceMismatchError
from nifti_io import atomic_write, read_vector_nifti, write_vector_nifti
from quantify import jacobian_array
from volume_core import (NEAREST, RESAMPLE_CHUNK, TRILINEAR, TRILINEAR_CLAMP, AffineTransform, Grid,
                         LabelVolume, build_pyramid, check_mode, center_of_mass, sample_array,
                         smooth_array)

logger = logging.getLogger(__name__)

NATIVE_SPACE = 'native'
PREALIGNED_SPACE = 'prealigned'
TEMPLATE_SPACE = 'template'

METRICS = ('msd', 'ncc', 'mi')
DOF_CHOICES = (6, 9, 12)
# parameter order: translations (mm), rotations (rad), scales, shears
INITIAL_STEPS = np.array([5.0] * 3 + [0.1] * 3 + [0.05] * 3 + [0.05] * 3)
MIN_STEPS = np.array([0.01] * 3 + [1e-4] * 3 + [1e-4] * 3 + [1e-4] * 3)
STEP_GROW = 1.2
STEP_SHRINK = 0.5
AFFINE_LEVELS = 3
MI_BINS = 32
MIN_OVERLAP = 0.01
SS_TOLERANCE_VOXELS = 0.4
MAX_RESTARTS = 3
# each model is seeded with the optimum of the one before it
DOF_SCHEDULE = {6: (6,), 9: (9,), 12: (9, 12)}


# ---------------------------------------------------------------------------
# affine model
# ---------------------------------------------------------------------------

def euler_zyx(angles):
    """Intrinsic Z-Y-X Euler rotation; angles are (about x, about y, about z) in radians"""
    ax, ay, az = angles
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return rz @ ry @ rx


def params_to_matrix(params, center):
    """T(x) = C + R S H (x - C) + t; the zero vector is the identity"""
    p = np.zeros(12)
    p[:len(params)] = params
    shear = np.array([[1.0, p[9], p[10]], [0.0, 1.0, p[11]], [0.0, 0.0, 1.0]])
    linear = euler_zyx(p[3:6]) @ np.diag(1.0 + p[6:9]) @ shear
    matrix = np.eye(4)
    matrix[:3, :3] = linear
    matrix[:3, 3] = center + p[:3] - linear @ center
    return matrix


def _intensity_range(data):
    low, high = float(np.min(data)), float(np.max(data))
    return (low, high) if high > low else (low, low + 1.0)


def _bin_index(values, value_range, bins):
    low, high = value_range
    idx = np.floor((values - low) / (high - low) * bins).astype(np.intp)
    return np.clip(idx, 0, bins - 1)


class _AffineCost:
    """Dissimilarity of moving(T(x)) against fixed(x) over a strided set of fixed voxels"""

    def __init__(self, moving, fixed, metric, ranges, max_points, bins=MI_BINS):
        self.metric = metric
        self.bins = bins
        stride = max(1, int(np.ceil((fixed.grid.n_voxels / max_points) ** (1.0 / 3.0))))
        nx, ny, nz = fixed.dims
        idx = np.mgrid[0:nx:stride, 0:ny:stride, 0:nz:stride].reshape(3, -1)
        self.world = fixed.grid.voxel_to_world(idx.T.astype(np.float64))
        self.fixed_values = fixed.data[idx[0], idx[1], idx[2]].astype(np.float64)
        self.moving = moving
        self.upper = np.asarray(moving.dims, dtype=np.float64)[:, None] - 1.0
        self.ranges = ranges
        self.fixed_bins = _bin_index(self.fixed_values, ranges[1], bins)

    def _inside(self, matrix):
        points = self.world @ matrix[:3, :3].T + matrix[:3, 3]
        coords = self.moving.grid.world_to_voxel(points).T
        inside = np.all((coords >= 0.0) & (coords <= self.upper), axis=0)
        return coords, inside

    def __call__(self, matrix):
        coords, inside = self._inside(matrix)
        # only fixed points that land inside the moving volume count
        if inside.mean() < MIN_OVERLAP:
            return np.inf
        m = sample_array(self.moving.data, coords[:, inside], TRILINEAR_CLAMP)
        f = self.fixed_values[inside]
        if self.metric == 'msd':
            cost = float(np.mean((f - m) ** 2))
        elif self.metric == 'ncc':
            fc, mc = f - f.mean(), m - m.mean()
            denom = np.sqrt(np.sum(fc * fc) * np.sum(mc * mc))
            cost = -float(np.sum(fc * mc) / denom) if denom > 0 else 0.0
        else:
            cost = -self._mutual_information(self.fixed_bins[inside], _bin_index(m, self.ranges[0], self.bins))
        return cost if np.isfinite(cost) else np.inf

    def _mutual_information(self, fixed_bins, moving_bins):
        joint = np.bincount(fixed_bins * self.bins + moving_bins, minlength=self.bins * self.bins)
        joint = joint.reshape(self.bins, self.bins).astype(np.float64)
        joint /= joint.sum()
        pf = joint.sum(axis=1, keepdims=True)
        pm = joint.sum(axis=0, keepdims=True)
        nz = joint > 0
        return float(np.sum(joint[nz] * np.log(joint[nz] / (pf @ pm)[nz])))


class AffineRegistration:
    """
    Multiresolution cyclic coordinate descent over 6, 9 or 12 affine parameters.
    A trial step is accepted only when it strictly lowers the dissimilarity.
    """

    def __init__(self, metric='mi', dof=12, levels=AFFINE_LEVELS, max_points=32768, max_cycles=200,
                 bins=MI_BINS):
        if metric not in METRICS:
            raise InvalidArgumentError(f"unknown metric '{metric}'; expected one of {', '.join(METRICS)}")
        if int(dof) not in DOF_CHOICES:
            raise InvalidArgumentError(f"dof must be 6, 9 or 12, got {dof}")
        if int(bins) < 8:
            raise InvalidArgumentError(f"mutual information needs at least 8 bins, got {bins}")
        self.metric = metric
        self.dof = int(dof)
        self.levels = int(levels)
        self.max_points = int(max_points)
        self.max_cycles = int(max_cycles)
        self.bins = int(bins)
        self.params = np.zeros(self.dof)
        self.center = np.zeros(3)
        self.history = []
        self.final_cost = np.inf

    def _descend(self, cost_fn, params, cost, steps, min_steps, level):
        n = len(params)
        for _ in range(self.max_cycles):
            if np.all(steps < min_steps):
                break
            for i in range(n):
                if steps[i] < min_steps[i]:
                    continue
                improved = False
                # try +step then -step; the first strict improvement wins
                for sign in (1.0, -1.0):
                    trial = params.copy()
                    trial[i] += sign * steps[i]
                    trial_cost = cost_fn(params_to_matrix(trial, self.center))
                    if trial_cost < cost:
                        params, cost, improved = trial, trial_cost, True
                        self.history.append((level, cost))
                        break
                steps[i] *= STEP_GROW if improved else STEP_SHRINK
        return params, cost

    def _search(self, moving_pyramid, fixed_pyramid, ranges, dof, seed):
        """Coarse-to-fine descent over the first `dof` parameters, optionally seeded"""
        depth = min(len(moving_pyramid), len(fixed_pyramid))
        identity = np.zeros(dof)
        com_shift = identity.copy()
        com_shift[:3] = center_of_mass(moving_pyramid[0]) - center_of_mass(fixed_pyramid[0])
        params = None
        if seed is not None:
            params = identity.copy()
            params[:len(seed)] = seed

        for rank, level in enumerate(range(depth - 1, -1, -1)):
            cost_fn = _AffineCost(moving_pyramid[level], fixed_pyramid[level], self.metric, ranges,
                                  self.max_points, self.bins)
            # the previous level's result competes with the two cold starts
            candidates = [identity, com_shift] if params is None else [params, identity, com_shift]
            costs = [cost_fn(params_to_matrix(c, self.center)) for c in candidates]
            best = int(np.argmin(costs))
            if not np.isfinite(costs[best]):
                if params is None:
                    raise RegistrationError(
                        f"volumes do not overlap (< {MIN_OVERLAP:.0%} of fixed voxels) even after the "
                        "centre-of-mass pre-shift; check the input orientation")
                raise RegistrationError("affine registration lost overlap between pyramid levels")
            params, cost = candidates[best].copy(), costs[best]
            self.history.append((level, cost))

            min_steps = MIN_STEPS[:dof] * 2.0 ** level
            # restart with halved steps until a full descent brings no gain
            for restart in range(MAX_RESTARTS + 1):
                steps = INITIAL_STEPS[:dof] * STEP_SHRINK ** (rank + restart)
                if np.all(steps < min_steps):
                    break
                previous = cost
                params, cost = self._descend(cost_fn, params, cost, steps, min_steps, level)
                if not cost < previous:
                    break
            logger.debug("affine dof %d level %d: cost %.6g", dof, level, cost)
        return params, cost

    def run(self, moving, fixed, source_space=NATIVE_SPACE, target_space=PREALIGNED_SPACE):
        """Returns the moving-to-fixed world transform"""
        moving_pyramid = build_pyramid(moving, self.levels)
        fixed_pyramid = build_pyramid(fixed, self.levels)
        ranges = (_intensity_range(moving.data), _intensity_range(fixed.data))
        self.center = fixed.grid.center_world
        self.history = []

        params = None
        for dof in DOF_SCHEDULE[self.dof]:
            params, cost = self._search(moving_pyramid, fixed_pyramid, ranges, dof, params)

        self.params = params
        self.final_cost = float(cost)
        pullback = params_to_matrix(params, self.center)
        logger.info("affine registration (%s, dof %d) final cost %.6g", self.metric, self.dof, self.final_cost)
        return AffineTransform(pullback, target_space, source_space).inverse()


def affine_register(moving, fixed, metric='mi', dof=12, **kwargs):
    """Moving-to-fixed AffineTransform (see AffineRegistration)"""
    source_space = kwargs.pop('source_space', NATIVE_SPACE)
    target_space = kwargs.pop('target_space', PREALIGNED_SPACE)
    return AffineRegistration(metric, dof, **kwargs).run(moving, fixed, source_space, target_space)


# ---------------------------------------------------------------------------
# vector fields
# ---------------------------------------------------------------------------

def _check_vectors(vectors, grid):
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape != tuple(grid.dims) + (3,):
        raise InvalidArgumentError(f"vector field shape {vectors.shape} does not match grid {grid.dims}")
    if not np.all(np.isfinite(vectors)):
        raise InvalidArgumentError("vector field contains non-finite values")
    return vectors


def _sample_vectors(vectors, coords):
    """Trilinear, clamp-to-edge sampling of every component at voxel coords (3, N)"""
    return np.stack([sample_array(vectors[..., a], coords, TRILINEAR_CLAMP) for a in range(3)], axis=-1)


def compose_displacements(outer, inner, grid):
    """Displacement of (x -> x + outer) after (x -> x + inner): inner(x) + outer(x + inner(x))"""
    shift = inner @ np.linalg.inv(grid.linear).T
    coords = (np.moveaxis(grid.voxel_coords(), 0, -1) + shift).reshape(-1, 3).T
    return inner + _sample_vectors(outer, coords).reshape(inner.shape)


def _resample_vectors(vectors, source, target):
    voxel_map = source.inverse_affine @ target.affine
    idx = target.voxel_coords().reshape(3, -1)
    coords = voxel_map[:3, :3] @ idx + voxel_map[:3, 3:4]
    return _sample_vectors(vectors, coords).reshape(tuple(target.dims) + (3,))


def _smooth_vectors(vectors, sigma_mm, spacing):
    sigma_vox = float(sigma_mm) / np.asarray(spacing, dtype=np.float64)
    return np.stack([smooth_array(vectors[..., a], sigma_vox) for a in range(3)], axis=-1)


@dataclass(frozen=True, eq=False)
class VelocityField:
    """Stationary velocity; exp(+v) maps source_space into target_space"""

    grid: Grid
    vectors: np.ndarray
    source_space: str = PREALIGNED_SPACE
    target_space: str = TEMPLATE_SPACE

    kind = 'velocity'

    def __post_init__(self):
        object.__setattr__(self, 'vectors', _check_vectors(self.vectors, self.grid))

    @classmethod
    def zeros(cls, grid, **kwargs):
        return cls(grid, np.zeros(tuple(grid.dims) + (3,)), **kwargs)

    def max_norm(self):
        return float(np.sqrt((self.vectors ** 2).sum(axis=-1)).max())


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Point map x -> x + u(x) from source_space into target_space"""

    grid: Grid
    vectors: np.ndarray
    source_space: str = None
    target_space: str = None
    direction: int = 1
    steps: int = 0

    kind = 'displacement'

    def __post_init__(self):
        object.__setattr__(self, 'vectors', _check_vectors(self.vectors, self.grid))

    @classmethod
    def zeros(cls, grid, **kwargs):
        return cls(grid, np.zeros(tuple(grid.dims) + (3,)), **kwargs)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        coords = self.grid.world_to_voxel(points).T
        return points + _sample_vectors(self.vectors, coords)

    def max_norm(self):
        return float(np.sqrt((self.vectors ** 2).sum(axis=-1)).max())


def scaling_steps(vectors, spacing, ss_min_steps=0):
    """N = max(ss_min_steps, ceil(log2(max|v| / (0.4 * min spacing))))"""
    max_norm = float(np.sqrt((vectors ** 2).sum(axis=-1)).max()) if vectors.size else 0.0
    if max_norm == 0.0:
        return int(ss_min_steps)
    needed = int(np.ceil(np.log2(max_norm / (SS_TOLERANCE_VOXELS * float(np.min(spacing))))))
    return max(int(ss_min_steps), needed)


def _exp_vectors(vectors, grid, ss_min_steps):
    steps = scaling_steps(vectors, grid.spacing, ss_min_steps)
    u = vectors / (2.0 ** steps)
    for _ in range(steps):
        u = compose_displacements(u, u, grid)
    return u, steps


def exp_velocity(velocity, direction=1, ss_min_steps=3):
    """Scaling and squaring: displacement of exp(direction * v) on the velocity grid"""
    if direction not in (1, -1):
        raise InvalidArgumentError(f"direction must be +1 or -1, got {direction}")
    vectors, steps = _exp_vectors(direction * velocity.vectors, velocity.grid, ss_min_steps)
    source, target = velocity.source_space, velocity.target_space
    if direction < 0:
        source, target = target, source
    return DisplacementField(velocity.grid, vectors, source, target, direction, steps)


@dataclass(frozen=True, eq=False)
class Diffeomorphism:
    forward: DisplacementField
    inverse: DisplacementField
    velocity: VelocityField = None

    @classmethod
    def from_velocity(cls, velocity, ss_min_steps=3):
        return cls(exp_velocity(velocity, 1, ss_min_steps), exp_velocity(velocity, -1, ss_min_steps), velocity)

    @classmethod
    def identity(cls, grid, source_space=PREALIGNED_SPACE, target_space=TEMPLATE_SPACE):
        return cls.from_velocity(VelocityField.zeros(grid, source_space=source_space, target_space=target_space))

    @property
    def grid(self):
        return self.forward.grid

    @property
    def steps(self):
        return self.forward.steps

    def inverse_consistency_error(self, margin=1):
        """max |phi^-1(phi(x)) - x| over interior voxels, mm"""
        residual = compose_displacements(self.inverse.vectors, self.forward.vectors, self.grid)
        norms = np.sqrt((residual ** 2).sum(axis=-1))
        interior = self.grid.interior_mask(margin)
        return float(norms[interior].max()) if interior.any() else 0.0

    def min_jacobian(self, margin=1):
        det = jacobian_array(self.forward.vectors, self.grid)
        interior = self.grid.interior_mask(margin)
        return float(det[interior].min()) if interior.any() else float(det.min())

    def problems(self, margin=1):
        found = []
        limit = 0.5 * float(self.grid.spacing.min())
        error = self.inverse_consistency_error(margin)
        if error >= limit:
            found.append(f"inverse consistency error {error:.3f} mm >= {limit:.3f} mm")
        jac_min = self.min_jacobian(margin)
        if jac_min <= 0:
            found.append(f"Jacobian determinant reaches {jac_min:.4f}")
        return found


# ---------------------------------------------------------------------------
# demons
# ---------------------------------------------------------------------------

@dataclass
class DiffeoParams:
    levels: int = 3
    # coarsest level first
    iters_per_level: list = field(default_factory=lambda: [100, 75, 50])
    sigma_fluid_mm: float = 2.0
    sigma_diffusion_mm: float = 1.5
    step_scale: float = 0.0     # 0 -> 0.9 * min spacing of each level
    ss_min_steps: int = 3
    converge_tol: float = 1e-4
    converge_window: int = 10
    match_intensity: bool = True

    def validate(self):
        problems = []
        if int(self.levels) < 1:
            problems.append(f"register.levels must be >= 1, got {self.levels}")
        if len(self.iters_per_level) != int(self.levels):
            problems.append(f"register.iters_per_level needs {self.levels} entries, got {len(self.iters_per_level)}")
        if any(int(n) < 0 for n in self.iters_per_level):
            problems.append("register.iters_per_level entries must be >= 0")
        for name in ('sigma_fluid_mm', 'sigma_diffusion_mm', 'converge_tol'):
            if not getattr(self, name) > 0:
                problems.append(f"register.{name} must be positive, got {getattr(self, name)}")
        if self.step_scale < 0:
            problems.append(f"register.step_scale must be >= 0, got {self.step_scale}")
        if int(self.ss_min_steps) < 0:
            problems.append(f"register.ss_min_steps must be >= 0, got {self.ss_min_steps}")
        if int(self.converge_window) < 1:
            problems.append(f"register.converge_window must be >= 1, got {self.converge_window}")
        return problems

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _warp_array(data, displacement, grid):
    """data(x + u(x)) sampled trilinearly with clamp-to-edge"""
    shift = displacement @ np.linalg.inv(grid.linear).T
    coords = (np.moveaxis(grid.voxel_coords(), 0, -1) + shift).reshape(-1, 3).T
    return sample_array(data, coords, TRILINEAR_CLAMP).reshape(grid.dims)


class DemonsRegistration:
    """Log-domain demons: v accumulates smoothed demons forces, exp(v) stays invertible"""

    def __init__(self, params=None):
        self.params = params or DiffeoParams()
        problems = self.params.validate()
        if problems:
            raise InvalidArgumentError("; ".join(problems))
        self.cost_history = []
        self.retried = False

    def _converged(self, costs):
        window = int(self.params.converge_window)
        if len(costs) <= window:
            return False
        previous = costs[-window - 1]
        if previous <= 0:
            return True
        return (previous - costs[-1]) / previous < self.params.converge_tol

    def _run_level(self, fixed, moving, vectors, iterations, sigma_diffusion, level):
        grid = fixed.grid
        spacing = grid.spacing
        sigma_x = float(spacing.min())
        step_cap = float(self.params.step_scale) or 0.9 * sigma_x
        to_world = np.linalg.inv(grid.linear)
        costs = []
        for _ in range(int(iterations)):
            # warp the moving image with the current inverse map
            backward, _ = _exp_vectors(-vectors, grid, self.params.ss_min_steps)
            warped = _warp_array(moving.data, backward, grid)
            diff = fixed.data.astype(np.float64) - warped
            cost = float(np.mean(diff ** 2))
            if not np.isfinite(cost):
                raise RegistrationError("demons metric is NaN (empty overlap)")
            costs.append(cost)
            self.cost_history.append((level, cost))
            if self._converged(costs):
                break

            # demons force capped at step_cap and fluid-smoothed
            gradient = np.stack(np.gradient(warped), axis=-1) @ to_world
            denom = (gradient ** 2).sum(axis=-1) + diff ** 2 / sigma_x ** 2
            scale = np.divide(diff, denom, out=np.zeros_like(diff), where=denom > 1e-12)
            update = gradient * scale[..., None]
            norm = np.sqrt((update ** 2).sum(axis=-1))
            clamp = np.minimum(1.0, step_cap / np.maximum(norm, 1e-12))
            update *= clamp[..., None]
            update = _smooth_vectors(update, self.params.sigma_fluid_mm, spacing)
            # moving is pulled back through exp(-v): its velocity gains the update
            vectors = _smooth_vectors(vectors - update, sigma_diffusion, spacing)
        logger.debug("demons level %d: %d iterations, msd %.6g", level, len(costs), costs[-1] if costs else np.nan)
        return vectors

    def run(self, moving, fixed, init=None):
        params = self.params
        init = init or AffineTransform.identity(NATIVE_SPACE, PREALIGNED_SPACE)
        fill = TRILINEAR.with_fill(float(moving.data.min()))
        moving = apply_transform(moving, [init.inverse()], fixed.grid, fill)
        if params.match_intensity:
            moving = moving.with_data(match_histograms(moving.data, fixed.data))

        fixed_pyramid = build_pyramid(fixed, params.levels)
        moving_pyramid = build_pyramid(moving, params.levels)
        depth = min(len(fixed_pyramid), len(moving_pyramid))
        schedule = list(params.iters_per_level)[-depth:]
        spaces = {'source_space': init.target_space or PREALIGNED_SPACE, 'target_space': TEMPLATE_SPACE}

        self.cost_history = []
        self.retried = False
        vectors = np.zeros(tuple(fixed_pyramid[depth - 1].dims) + (3,))
        start_finest = vectors
        for rank, level in enumerate(range(depth - 1, -1, -1)):
            # carry the coarser velocity onto this level's grid
            if rank > 0:
                vectors = _resample_vectors(vectors, fixed_pyramid[level + 1].grid, fixed_pyramid[level].grid)
            if level == 0:
                start_finest = vectors
            vectors = self._run_level(fixed_pyramid[level], moving_pyramid[level], vectors, schedule[rank],
                                      params.sigma_diffusion_mm, level)

        result = Diffeomorphism.from_velocity(VelocityField(fixed.grid, vectors, **spaces), params.ss_min_steps)
        problems = result.problems()
        if problems:
            logger.warning("field not diffeomorphic (%s); re-running finest level with stronger diffusion",
                           "; ".join(problems))
            self.retried = True
            vectors = self._run_level(fixed, moving, start_finest, schedule[-1], 1.5 * params.sigma_diffusion_mm, 0)
            result = Diffeomorphism.from_velocity(VelocityField(fixed.grid, vectors, **spaces), params.ss_min_steps)
            problems = result.problems()
            if problems:
                raise NotDiffeomorphicError(f"field not diffeomorphic: {'; '.join(problems)}")
        logger.info("diffeomorphic registration done: max |u+| %.3f mm, %d squaring steps",
                    result.forward.max_norm(), result.steps)
        return result


def diffeo_register(moving, fixed, init=None, params=None):
    return DemonsRegistration(params).run(moving, fixed, init)


# ---------------------------------------------------------------------------
# applying transforms
# ---------------------------------------------------------------------------

def _check_chain(chain, grid_space=None, volume_space=None):
    for outer, inner in zip(chain, chain[1:]):
        if inner.target_space and outer.source_space and inner.target_space != outer.source_space:
            raise SpaceMismatchError(outer.source_space, inner.target_space)
    if grid_space and chain[-1].source_space and chain[-1].source_space != grid_space:
        raise SpaceMismatchError(chain[-1].source_space, grid_space,
                                 f"target grid lives in '{grid_space}' but the chain starts in "
                                 f"'{chain[-1].source_space}'")
    if volume_space and chain[0].target_space and chain[0].target_space != volume_space:
        raise SpaceMismatchError(volume_space, chain[0].target_space,
                                 f"volume lives in '{volume_space}' but the chain ends in '{chain[0].target_space}'")


def apply_transform(vol, transforms, target_grid, mode=None, grid_space=None, volume_space=None):
    """
    Pull-back resampling through a transform chain: output(x) = vol(T1(T2(...Tn(x)))).
    The last transform in the list is applied first. Each entry is an
    AffineTransform or DisplacementField.
    """
    chain = list(transforms) if isinstance(transforms, (list, tuple)) else [transforms]
    if mode is None:
        mode = NEAREST if isinstance(vol, LabelVolume) else TRILINEAR
    check_mode(vol, mode)
    if not isinstance(target_grid, Grid):
        raise InvalidArgumentError("apply_transform target must be a Grid")
    if chain:
        _check_chain(chain, grid_space, volume_space)

    nx, ny, nz = target_grid.dims
    out_dtype = vol.data.dtype if isinstance(vol, LabelVolume) else np.float32
    out = np.empty(target_grid.dims, dtype=out_dtype)
    slab = max(1, RESAMPLE_CHUNK // (nx * ny))
    for k0 in range(0, nz, slab):
        k1 = min(nz, k0 + slab)
        idx = np.mgrid[0:nx, 0:ny, k0:k1].reshape(3, -1).T.astype(np.float64)
        points = target_grid.voxel_to_world(idx)
        # innermost transform first
        for transform in reversed(chain):
            points = transform.apply(points)
        coords = vol.grid.world_to_voxel(points).T
        out[:, :, k0:k1] = sample_array(vol.data, coords, mode).reshape(nx, ny, k1 - k0)
    return vol.on_grid(target_grid, out)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _manifest_path(path):
    path = Path(path)
    stem = path.name
    for suffix in ('.nii.gz', '.nii'):
        if stem.endswith(suffix):
            stem = stem[:-len(suffix)]
            break
    return path.with_name(f"{stem}.manifest.txt")


def save_field(vector_field, path):
    """Write a displacement or velocity field plus its `<name>.manifest.txt` sidecar"""
    write_vector_nifti(vector_field.vectors, vector_field.grid, path)
    grid = vector_field.grid
    entries = {
        'kind': vector_field.kind,
        'grid': f"dims={'x'.join(str(d) for d in grid.dims)} "
                f"spacing={','.join(f'{s:.6g}' for s in grid.spacing)}",
        'direction': getattr(vector_field, 'direction', 0),
        'steps': getattr(vector_field, 'steps', 0),
        'source_space': vector_field.source_space or 'unknown',
        'target_space': vector_field.target_space or 'unknown',
    }
    text = ''.join(f"{key}\t{value}\n" for key, value in entries.items())
    atomic_write(_manifest_path(path), text.encode('utf-8'))


def load_field(path):
    vectors, grid = read_vector_nifti(path)
    meta = {}
    manifest = _manifest_path(path)
    if manifest.exists():
        for line in manifest.read_text(encoding='utf-8').splitlines():
            if '\t' in line:
                key, value = line.split('\t', 1)
                meta[key] = value
    source = None if meta.get('source_space', 'unknown') == 'unknown' else meta['source_space']
    target = None if meta.get('target_space', 'unknown') == 'unknown' else meta['target_space']
    if meta.get('kind') == 'velocity':
        return VelocityField(grid, vectors, source, target)
    return DisplacementField(grid, vectors, source, target,
                             int(meta.get('direction', 1)), int(meta.get('steps', 0)))
