"""
Tests for soft-tissue extraction
"""

import numpy as np
import pytest

from bone_strip import AIR_HU, StripParams, fill_holes, largest_component, strip, threshold_mask
from errors import StageError
from phantoms import BONE_HU, head_phantom
from volume_core import LabelVolume, Volume3


def test_threshold_is_inclusive():
    vol = Volume3.from_array(np.array([-1.0, 0.0, 50.0, 100.0, 101.0]).reshape(5, 1, 1))
    mask = threshold_mask(vol, 0.0, 100.0)
    assert mask.data.ravel().tolist() == [0, 1, 1, 1, 0]


def test_largest_component_keeps_biggest():
    data = np.zeros((12, 12, 12), dtype=np.int32)
    data[1:3, 1:3, 1:3] = 1
    data[5:10, 5:10, 5:10] = 1
    kept = largest_component(LabelVolume.from_array(data))
    assert int(kept.data.sum()) == 125
    assert kept.data[1, 1, 1] == 0


def test_largest_component_tie_prefers_lowest_linear_index():
    data = np.zeros((10, 10, 10), dtype=np.int32)
    data[6:8, 1:3, 1:3] = 1     # lower k, found first x-fastest
    data[1:3, 1:3, 6:8] = 1
    kept = largest_component(LabelVolume.from_array(data))
    assert kept.data[6, 1, 1] == 1
    assert kept.data[1, 1, 6] == 0


def test_largest_component_of_empty_mask_is_empty():
    empty = LabelVolume.from_array(np.zeros((4, 4, 4), dtype=np.int32))
    assert not largest_component(empty).data.any()


@pytest.mark.parametrize('connectivity, kept', [(6, 27), (18, 39), (26, 40)])
def test_component_connectivity_choices(connectivity, kept):
    data = np.zeros((8, 8, 6), dtype=np.int32)
    data[1:4, 1:4, 1:4] = 1
    data[4:6, 4:6, 1:4] = 1  # shares only edges with the first block
    data[0, 0, 0] = 1  # shares only a corner
    assert not StripParams(component_connectivity=connectivity).validate()
    assert int(largest_component(LabelVolume.from_array(data), connectivity).data.sum()) == kept


def test_unknown_connectivity_rejected():
    assert StripParams(component_connectivity=10).validate()
    assert StripParams(fill_connectivity=18).validate()


def test_fill_holes_closes_enclosed_cavity_only():
    data = np.ones((9, 9, 9), dtype=np.int32)
    data[0, :, :] = 0
    data[4, 4, 4] = 0           # enclosed
    data[1, 4, 4] = 0           # touches the open face
    filled = fill_holes(LabelVolume.from_array(data))
    assert filled.data[4, 4, 4] == 1
    assert filled.data[1, 4, 4] == 0
    assert filled.data[0, 0, 0] == 0


def test_strip_head_phantom_removes_bone_and_air():
    vol = head_phantom(32)
    result = strip(vol)
    inside = result.mask.data > 0
    assert not np.any(inside & (vol.data == BONE_HU))
    assert np.all(result.stripped.data[~inside] == AIR_HU)
    assert np.all(result.stripped.data[inside] == vol.data[inside])
    # ventricles are part of the kept tissue
    assert result.mask.data[16, 16, 16] == 1
    assert result.warnings == []


def test_strip_fills_dark_pocket_inside_brain():
    vol = head_phantom(32)
    data = vol.data.copy()
    data[14:17, 14:17, 14:17] = -50.0
    result = strip(vol.with_data(data), StripParams(mask_smooth_sigma_mm=0.0))
    assert np.all(result.mask.data[14:17, 14:17, 14:17] == 1)


def test_uncalibrated_input_fails_with_empty_mask():
    vol = Volume3.from_array(np.full((8, 8, 8), 3000.0))
    with pytest.raises(StageError, match='empty mask'):
        strip(vol)


def test_invalid_window_rejected():
    assert StripParams(tissue_low_hu=100.0, tissue_high_hu=0.0).validate()
