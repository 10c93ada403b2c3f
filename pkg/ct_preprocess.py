"""
Preprocessing engine for CTMORPH
Canonical reorientation, isotropic resampling, homomorphic bias correction
and affine pre-alignment to the template.
"""

import logging
from dataclasses import dataclass, fields

import nibabel as nib
import numpy as np
from scipy import ndimage

from bone_strip import threshold_mask
from errors import InvalidArgumentError
from registration import apply_transform, affine_register
from volume_core import (GAUSSIAN_TRUNCATE, NEAREST, TRILINEAR, TRILINEAR_CLAMP, Grid, resample,
                         resample_isotropic)

logger = logging.getLogger(__name__)

RAS_ORIENTATION = np.array([[0, 1], [1, 1], [2, 1]], dtype=np.float64)
METRICS = ('mi', 'ncc', 'msd')


@dataclass
class PreprocessParams:
    target_spacing: float = 1.0
    bias_sigma_mm: float = 50.0
    bias_max_iters: int = 20
    bias_tol: float = 1e-3
    prealign_metric: str = 'mi'
    bias_shrink: int = 4
    correct_bias: bool = True
    prealign_dof: int = 12
    # default bias mask: soft-tissue window in HU
    bias_mask_low_hu: float = 0.0
    bias_mask_high_hu: float = 100.0

    def validate(self):
        problems = []
        for name in ('target_spacing', 'bias_sigma_mm', 'bias_tol'):
            if not getattr(self, name) > 0:
                problems.append(f"preprocess.{name} must be positive, got {getattr(self, name)}")
        if int(self.bias_max_iters) < 1:
            problems.append(f"preprocess.bias_max_iters must be >= 1, got {self.bias_max_iters}")
        if int(self.bias_shrink) < 1:
            problems.append(f"preprocess.bias_shrink must be >= 1, got {self.bias_shrink}")
        if self.prealign_metric not in METRICS:
            problems.append(f"preprocess.prealign_metric must be one of {', '.join(METRICS)}, "
                            f"got '{self.prealign_metric}'")
        if int(self.prealign_dof) not in (6, 9, 12):
            problems.append(f"preprocess.prealign_dof must be 6, 9 or 12, got {self.prealign_dof}")
        if not self.bias_mask_low_hu < self.bias_mask_high_hu:
            problems.append("preprocess.bias_mask_low_hu must be below preprocess.bias_mask_high_hu")
        return problems

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def reorient_canonical(vol):
    """
    Permute and flip axes (no interpolation) so the voxel axes follow RAS.
    World positions of every voxel are preserved.
    """
    ornt = nib.orientations.io_orientation(vol.affine)
    if np.array_equal(ornt, RAS_ORIENTATION):
        return vol
    data = np.ascontiguousarray(nib.orientations.apply_orientation(vol.data, ornt))
    affine = vol.affine @ nib.orientations.inv_ornt_aff(ornt, vol.dims)
    logger.debug("reoriented axes %s -> RAS", nib.orientations.aff2axcodes(vol.affine))
    return vol.on_grid(Grid(data.shape, affine), data)


def _masked_smooth(values, mask, sigma_vox):
    """Normalized convolution: Gaussian average of `values` over mask voxels only"""
    weights = mask.astype(np.float64)
    numerator = ndimage.gaussian_filter(values * weights, sigma_vox, mode='nearest', truncate=GAUSSIAN_TRUNCATE)
    denominator = ndimage.gaussian_filter(weights, sigma_vox, mode='nearest', truncate=GAUSSIAN_TRUNCATE)
    out = np.zeros_like(values)
    support = denominator > 1e-6
    out[support] = numerator[support] / denominator[support]
    return out


def _shrink_grid(grid, factor):
    dims = tuple(-(-d // factor) for d in grid.dims)
    return Grid(dims, grid.affine @ np.diag([float(factor)] * 3 + [1.0]))


def _estimate_log_bias(log_image, mask, sigma_vox, max_iters, tol):
    log_bias = np.zeros_like(log_image)
    for iteration in range(1, max_iters + 1):
        smooth = _masked_smooth(log_image - log_bias, mask, sigma_vox)
        smooth -= smooth[mask].mean()
        log_bias += smooth
        delta = float(np.max(np.abs(smooth[mask])))
        logger.debug("bias iteration %d: max |delta log bias| = %.2e", iteration, delta)
        if delta < tol:
            break
    return log_bias


def correct_bias(vol, mask, params=None):
    """
    Homomorphic log-domain bias correction inside `mask`.
    Returns (corrected, bias_field); both live on the input grid.
    """
    params = params or PreprocessParams()
    inside = np.asarray(mask.data) > 0
    if inside.shape != vol.dims:
        raise InvalidArgumentError(f"mask dims {inside.shape} do not match volume dims {vol.dims}")
    if not inside.any():
        raise InvalidArgumentError("bias correction mask is empty")

    image = vol.data.astype(np.float64)
    low = float(image[inside].min())
    shift = 1.0 - low if low < 1.0 else 0.0
    shifted = image + shift

    shrink = int(params.bias_shrink)
    work_grid = _shrink_grid(vol.grid, shrink) if shrink > 1 else vol.grid
    if shrink > 1:
        coarse_image = resample(vol.with_data(shifted), work_grid, TRILINEAR_CLAMP).data.astype(np.float64)
        coarse_mask = resample(vol.with_data(inside.astype(np.float32)), work_grid, TRILINEAR_CLAMP).data >= 0.5
        if not coarse_mask.any():
            logger.warning("mask vanishes at shrink %d; estimating bias at full resolution", shrink)
            work_grid, coarse_image, coarse_mask = vol.grid, shifted, inside
    else:
        coarse_image, coarse_mask = shifted, inside

    log_image = np.log(np.maximum(coarse_image, 1e-6))
    sigma_vox = float(params.bias_sigma_mm) / work_grid.spacing
    log_bias = _estimate_log_bias(log_image, coarse_mask, sigma_vox, int(params.bias_max_iters),
                                  float(params.bias_tol))
    if work_grid is not vol.grid:
        log_bias = resample(vol.on_grid(work_grid, log_bias), vol.grid, TRILINEAR_CLAMP).data.astype(np.float64)

    bias = np.exp(log_bias)
    corrected = shifted / bias
    corrected *= shifted[inside].mean() / corrected[inside].mean()
    corrected -= shift
    logger.info("bias field range %.3f..%.3f inside mask", bias[inside].min(), bias[inside].max())
    return vol.with_data(corrected.astype(np.float32)), vol.with_data(bias.astype(np.float32))


def prealign(vol, template, params=None):
    """
    Affine pre-alignment. Returns (vol resampled onto the template grid,
    subject-to-template world transform).
    """
    params = params or PreprocessParams()
    transform = affine_register(vol, template, metric=params.prealign_metric, dof=int(params.prealign_dof))
    mode = TRILINEAR.with_fill(float(vol.data.min()))
    aligned = apply_transform(vol, [transform.inverse()], template.grid, mode)
    return aligned, transform


def default_bias_mask(vol, params):
    return threshold_mask(vol, params.bias_mask_low_hu, params.bias_mask_high_hu)


def preprocess_volume(vol, template, params=None, mask=None):
    """
    Full preprocessing chain: reorient -> isotropic resample -> bias correction -> pre-align.
    Returns dict with native, bias_field, prealigned and transform entries.
    """
    params = params or PreprocessParams()
    problems = params.validate()
    if problems:
        raise InvalidArgumentError("; ".join(problems))

    native = resample_isotropic(reorient_canonical(vol), params.target_spacing)
    bias_field = native.with_data(np.ones(native.dims, dtype=np.float32))
    if params.correct_bias:
        if mask is None:
            mask = default_bias_mask(native, params)
        elif not mask.grid.same_as(native.grid):
            mask = resample(reorient_canonical(mask), native.grid, NEAREST)
        if np.any(mask.data > 0):
            native, bias_field = correct_bias(native, mask, params)
        else:
            logger.warning("bias mask is empty; skipping bias correction")

    prealigned, transform = prealign(native, template, params)
    return {'native': native, 'bias_field': bias_field, 'prealigned': prealigned, 'transform': transform}
