"""
Tests for NIfTI-1 reading and writing
"""

import gzip
from concurrent.futures import ThreadPoolExecutor

import nibabel as nib
import numpy as np
import pytest

from errors import NiftiParseError, NiftiRangeError
from nifti_io import atomic_write, read_label_nifti, read_nifti, read_vector_nifti, write_nifti, write_vector_nifti
from volume_core import Grid, LabelVolume, Volume3


def oblique_grid(dims=(7, 6, 5)):
    angle = np.deg2rad(20.0)
    affine = np.eye(4)
    affine[:3, :3] = np.array([[np.cos(angle), -np.sin(angle), 0.0],
                               [np.sin(angle), np.cos(angle), 0.0],
                               [0.0, 0.0, 1.0]]) @ np.diag([0.8, 1.2, 2.5])
    affine[:3, 3] = [-12.5, 30.0, 4.25]
    return Grid(dims, affine)


def test_float_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    vol = Volume3(oblique_grid(), rng.normal(40.0, 300.0, (7, 6, 5)).astype(np.float32))
    for name in ('vol.nii', 'vol.nii.gz'):
        write_nifti(vol, tmp_path / name)
        back = read_nifti(tmp_path / name)
        assert back.data.dtype == np.float32
        assert np.array_equal(back.data, vol.data)
        assert np.allclose(back.affine, vol.affine, atol=1e-5)


def test_gzip_output_is_byte_identical_across_writes(tmp_path):
    vol = Volume3.from_array(np.arange(60, dtype=np.float32).reshape(5, 4, 3))
    write_nifti(vol, tmp_path / 'a.nii.gz')
    write_nifti(vol, tmp_path / 'b.nii.gz')
    assert (tmp_path / 'a.nii.gz').read_bytes() == (tmp_path / 'b.nii.gz').read_bytes()


def test_data_is_stored_x_fastest(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(4, 3, 2)
    write_nifti(Volume3.from_array(data), tmp_path / 'order.nii')
    raw = (tmp_path / 'order.nii').read_bytes()
    stored = np.frombuffer(raw, dtype='<f4', offset=352)
    assert stored[:4].tolist() == data[:, 0, 0].tolist()


def test_labels_round_trip_with_int_datatypes(tmp_path):
    data = np.zeros((6, 6, 6), dtype=np.int32)
    data[1:3, 1:3, 1:3] = 5
    data[4, 4, 4] = 40000
    labels = LabelVolume.from_array(data, label_table={5: 'five'})
    write_nifti(labels, tmp_path / 'labels.nii.gz')
    header = nib.load(str(tmp_path / 'labels.nii.gz')).header
    assert header.get_data_dtype() == np.int32
    back = read_label_nifti(tmp_path / 'labels.nii.gz', {5: 'five'})
    assert np.array_equal(back.data, data)
    assert back.label_table == {5: 'five'}


def test_unrepresentable_values_raise(tmp_path):
    vol = Volume3.from_array(np.full((3, 3, 3), 1.5, dtype=np.float32))
    with pytest.raises(NiftiRangeError):
        write_nifti(vol, tmp_path / 'bad.nii', datatype=np.int16)
    big = Volume3.from_array(np.full((3, 3, 3), 70000.0, dtype=np.float32))
    with pytest.raises(NiftiRangeError):
        write_nifti(big, tmp_path / 'big.nii', datatype=np.int16)


def raw_nifti(path, data, endianness='<', qform=None, sform=None, slope=None):
    """Hand-assembled single-file NIfTI-1 so header fields stay exactly as set"""
    header = nib.Nifti1Header(endianness=endianness)
    header.set_data_dtype(data.dtype.newbyteorder('='))
    header.set_data_shape(data.shape)
    if qform is not None:
        header.set_qform(qform, code=1)
    header.set_sform(sform if sform is not None else np.eye(4), code=0 if sform is None else 1)
    if slope is not None:
        header.set_slope_inter(*slope)
    header['vox_offset'] = 352
    payload = header.binaryblock + b'\x00' * 4
    payload += np.asarray(data, dtype=data.dtype.newbyteorder(endianness)).tobytes(order='F')
    path.write_bytes(payload)
    return path


def test_scaling_applied_on_read(tmp_path):
    stored = np.arange(27, dtype=np.int16).reshape(3, 3, 3)
    path = raw_nifti(tmp_path / 'scaled.nii', stored, sform=np.eye(4), slope=(2.0, -1024.0))
    vol = read_nifti(path)
    assert np.allclose(vol.data, stored * 2.0 - 1024.0)
    with pytest.raises(NiftiParseError) as info:
        read_label_nifti(path)
    assert info.value.field == 'scl_slope'


def test_qform_used_when_sform_absent(tmp_path):
    affine = np.diag([2.0, 2.0, 3.0, 1.0])
    affine[:3, 3] = [5.0, 6.0, 7.0]
    path = raw_nifti(tmp_path / 'qform.nii', np.zeros((4, 4, 4), dtype=np.float32), qform=affine)
    assert np.allclose(read_nifti(path).affine, affine, atol=1e-5)


def _valid_bytes(tmp_path):
    write_nifti(Volume3.from_array(np.ones((4, 4, 4), dtype=np.float32)), tmp_path / 'ok.nii')
    return bytearray((tmp_path / 'ok.nii').read_bytes())


def test_bad_magic_names_field(tmp_path):
    raw = _valid_bytes(tmp_path)
    raw[344:348] = b'ni1\x00'
    (tmp_path / 'bad.nii').write_bytes(bytes(raw))
    with pytest.raises(NiftiParseError) as info:
        read_nifti(tmp_path / 'bad.nii')
    assert info.value.field == 'magic'


def test_bad_sizeof_hdr_and_truncation(tmp_path):
    raw = _valid_bytes(tmp_path)
    broken = bytearray(raw)
    broken[0:4] = (123).to_bytes(4, 'little')
    (tmp_path / 'size.nii').write_bytes(bytes(broken))
    with pytest.raises(NiftiParseError) as info:
        read_nifti(tmp_path / 'size.nii')
    assert info.value.field == 'sizeof_hdr'

    (tmp_path / 'short.nii.gz').write_bytes(gzip.compress(bytes(raw[:-10])))
    with pytest.raises(NiftiParseError) as info:
        read_nifti(tmp_path / 'short.nii.gz')
    assert info.value.field == 'data'


def test_big_endian_file_is_read(tmp_path):
    data = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    path = raw_nifti(tmp_path / 'big.nii', data, endianness='>', sform=np.diag([2.0, 2.0, 2.0, 1.0]))
    assert path.read_bytes()[:4] == (348).to_bytes(4, 'big')
    vol = read_nifti(path)
    assert np.array_equal(vol.data, data)
    assert np.allclose(vol.spacing, 2.0)


def test_vector_field_round_trip(tmp_path):
    grid = oblique_grid()
    rng = np.random.default_rng(2)
    vectors = rng.normal(0.0, 2.0, tuple(grid.dims) + (3,)).astype(np.float32)
    write_vector_nifti(vectors, grid, tmp_path / 'field.nii.gz')
    back, back_grid = read_vector_nifti(tmp_path / 'field.nii.gz')
    assert np.array_equal(back.astype(np.float32), vectors)
    assert back_grid.same_as(grid)
    header = nib.load(str(tmp_path / 'field.nii.gz')).header
    assert tuple(header['dim'][:6]) == (5, 7, 6, 5, 1, 3)
    with pytest.raises(NiftiParseError):
        read_nifti(tmp_path / 'field.nii.gz')


def test_atomic_write_ignores_stale_temporary_names(tmp_path):
    target = tmp_path / 'table.csv'
    (tmp_path / '.table.csv.tmp').mkdir()
    atomic_write(target, b'a,b\n')
    assert target.read_bytes() == b'a,b\n'
    assert sorted(p.name for p in tmp_path.iterdir()) == ['.table.csv.tmp', 'table.csv']


def test_concurrent_atomic_writes_leave_one_whole_payload(tmp_path):
    target = tmp_path / 'manifest.tsv'
    payloads = [bytes([65 + k]) * 50000 for k in range(8)]
    with ThreadPoolExecutor(max_workers=8) as pool:
        list(pool.map(lambda payload: atomic_write(target, payload), payloads))
    assert target.read_bytes() in payloads
    assert [p.name for p in tmp_path.iterdir()] == ['manifest.tsv']
