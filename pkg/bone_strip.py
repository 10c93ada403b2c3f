"""
Bone stripping engine for CTMORPH
Soft-tissue extraction: intensity window, largest connected component,
hole filling, mask smoothing and re-binarisation.
"""

import logging
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from errors import InvalidArgumentError, StageError
from volume_core import LabelVolume, smooth_array

logger = logging.getLogger(__name__)

AIR_HU = -1024.0
# voxel connectivity -> scipy structuring element rank
CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


@dataclass
class StripParams:
    tissue_low_hu: float = 0.0
    tissue_high_hu: float = 100.0
    fill_connectivity: int = 6
    mask_smooth_sigma_mm: float = 1.0
    mask_rebinarize_level: float = 0.5
    component_connectivity: int = 26

    def validate(self):
        problems = []
        if not self.tissue_low_hu < self.tissue_high_hu:
            problems.append(f"bone_strip.tissue_low_hu ({self.tissue_low_hu}) must be below "
                            f"bone_strip.tissue_high_hu ({self.tissue_high_hu})")
        if int(self.fill_connectivity) not in (6, 26):
            problems.append(f"bone_strip.fill_connectivity must be 6 or 26, got {self.fill_connectivity}")
        if int(self.component_connectivity) not in CONNECTIVITY_RANK:
            problems.append(f"bone_strip.component_connectivity must be 6, 18 or 26, got {self.component_connectivity}")
        if self.mask_smooth_sigma_mm < 0:
            problems.append(f"bone_strip.mask_smooth_sigma_mm must be >= 0, got {self.mask_smooth_sigma_mm}")
        if not 0.0 < self.mask_rebinarize_level < 1.0:
            problems.append(f"bone_strip.mask_rebinarize_level must lie in (0, 1), got {self.mask_rebinarize_level}")
        return problems

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


class StripResult(NamedTuple):
    stripped: object
    mask: LabelVolume
    warnings: list


def _structure(connectivity):
    if int(connectivity) not in CONNECTIVITY_RANK:
        raise InvalidArgumentError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, CONNECTIVITY_RANK[int(connectivity)])


def _binary(mask, data):
    return LabelVolume(mask.grid, data.astype(np.int32), dict(mask.label_table))


def threshold_mask(vol, low, high):
    """1 where low <= HU <= high (inclusive), else 0"""
    if not low < high:
        raise InvalidArgumentError(f"threshold low ({low}) must be below high ({high})")
    inside = (vol.data >= low) & (vol.data <= high)
    return LabelVolume(vol.grid, inside.astype(np.int32), {1: 'tissue'})


def largest_component(mask, connectivity=26):
    """
    Keep the largest connected foreground component. Equal sizes are broken
    by the smallest linear voxel index (x fastest) inside the component.
    """
    labeled, count = ndimage.label(mask.data > 0, structure=_structure(connectivity))
    if count == 0:
        logger.warning("largest_component: mask is empty")
        return _binary(mask, np.zeros(mask.dims, dtype=np.int32))
    sizes = np.bincount(labeled.ravel())
    flat = labeled.ravel(order='F')
    ids, first_index = np.unique(flat, return_index=True)
    first = dict(zip(ids.tolist(), first_index.tolist()))
    best = min(range(1, count + 1), key=lambda c: (-sizes[c], first[c]))
    logger.debug("largest_component: %d components, keeping %d voxels", count, sizes[best])
    return _binary(mask, labeled == best)


def fill_holes(mask, connectivity=6):
    """Fill every background pocket the boundary flood (given connectivity) cannot reach"""
    filled = ndimage.binary_fill_holes(mask.data > 0, structure=_structure(connectivity))
    return _binary(mask, filled)


def strip(vol, params=None):
    """
    threshold -> largest component -> fill holes -> smooth + rebinarise -> apply.
    Voxels outside the final mask are set to -1024 HU.
    """
    params = params or StripParams()
    problems = params.validate()
    if problems:
        raise InvalidArgumentError("; ".join(problems))

    warnings = []
    mask = threshold_mask(vol, params.tissue_low_hu, params.tissue_high_hu)
    mask = largest_component(mask, params.component_connectivity)
    if not np.any(mask.data):
        warnings.append('empty threshold mask')
    mask = fill_holes(mask, params.fill_connectivity)

    if params.mask_smooth_sigma_mm > 0:
        sigma_vox = float(params.mask_smooth_sigma_mm) / vol.spacing
        fuzzy = smooth_array(mask.data.astype(np.float64), sigma_vox)
        mask = _binary(mask, fuzzy >= params.mask_rebinarize_level)

    if not np.any(mask.data):
        raise StageError('bone-strip', 'empty mask (is the input HU-calibrated?)')

    stripped = vol.with_data(np.where(mask.data > 0, vol.data, AIR_HU))
    logger.info("bone strip kept %d of %d voxels", int(mask.data.sum()), vol.grid.n_voxels)
    return StripResult(stripped, mask, warnings)
