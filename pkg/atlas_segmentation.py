"""
Atlas segmentation engine for CTMORPH
Pulls template atlas labels back onto the pre-aligned subject (through the
forward diffeomorphic map) and then onto the native subject grid (through
the pre-alignment affine). Nearest-neighbour sampling only.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from errors import InvalidArgumentError, SpaceMismatchError
from registration import PREALIGNED_SPACE, apply_transform
from volume_core import NEAREST, LabelVolume, resample

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SegmentationResult:
    labels_normalized: object
    labels_physical: object
    label_table: dict = field(default_factory=dict)
    unknown_labels: tuple = ()


def read_label_table(path):
    """Parse `index<TAB>name` lines; blank lines and '#' comments are ignored"""
    table = {}
    for number, line in enumerate(Path(path).read_text(encoding='utf-8').splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith('#'):
            continue
        parts = line.rstrip('\r\n').split('\t', 1) if '\t' in line else stripped.split(None, 1)
        try:
            index = int(parts[0])
        except ValueError:
            raise InvalidArgumentError(f"{path}:{number}: label index '{parts[0]}' is not an integer") from None
        if index < 0:
            raise InvalidArgumentError(f"{path}:{number}: label index must be non-negative, got {index}")
        if index in table:
            raise InvalidArgumentError(f"{path}:{number}: duplicate label index {index}")
        table[index] = parts[1].strip() if len(parts) > 1 else ''
    return table


def segment_normalized(atlas, diffeo):
    """L(x) = atlas(phi(x)) on the template grid, phi the forward (subject -> template) map"""
    if not atlas.grid.same_as(diffeo.grid):
        raise SpaceMismatchError('template grid', 'atlas grid',
                                 f"atlas grid {atlas.dims} does not match the registration grid {diffeo.grid.dims}")
    return apply_transform(atlas, [diffeo.forward], diffeo.grid, NEAREST)


def segment_physical(labels_normalized, prealign, native_grid):
    """L(y) = labels_normalized(prealign(y)) on the native grid"""
    if abs(prealign.determinant) < 1e-12:
        raise InvalidArgumentError("pre-alignment affine is singular")
    return apply_transform(labels_normalized, [prealign], native_grid, NEAREST, volume_space=PREALIGNED_SPACE)


def unknown_labels(labels, label_table):
    if not label_table:
        return ()
    return tuple(label for label in labels.labels() if label not in label_table)


def segment(atlas, diffeo, prealign, native_grid, label_table=None):
    """Both segmentations plus the label indices the lookup table does not name"""
    table = dict(label_table if label_table is not None else atlas.label_table)
    if not atlas.grid.same_as(diffeo.grid):
        logger.info("resampling atlas %s onto the template grid %s", atlas.dims, diffeo.grid.dims)
        atlas = resample(atlas, diffeo.grid, NEAREST)
    if table:
        atlas = LabelVolume(atlas.grid, atlas.data, table)

    normalized = segment_normalized(atlas, diffeo)
    physical = segment_physical(normalized, prealign, native_grid)
    missing = unknown_labels(atlas, table)
    if missing:
        logger.warning("atlas labels missing from the label table: %s", ', '.join(map(str, missing)))
    return SegmentationResult(normalized, physical, table, missing)


def dice(a, b, label=None):
    """2|A and B| / (|A| + |B|) for one label, or for all nonzero voxels when label is None"""
    left = np.asarray(a.data if hasattr(a, 'data') else a)
    right = np.asarray(b.data if hasattr(b, 'data') else b)
    if label is None:
        left, right = left > 0, right > 0
    else:
        left, right = left == label, right == label
    total = int(left.sum()) + int(right.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(left, right).sum()) / total
