"""
NIfTI-1 reader/writer for CTMORPH
Single-file NIfTI-1 (.nii / .nii.gz) for intensity, label and vector volumes.
Header fields are encoded and decoded through nibabel's Nifti1Header; the
checks below turn every malformed field into a NiftiParseError naming it.
"""

import gzip
import logging
import os
import tempfile
from pathlib import Path

import nibabel as nib
import numpy as np

from errors import NiftiParseError, NiftiRangeError
from volume_core import Grid, LabelVolume, Volume3, is_orthogonal

logger = logging.getLogger(__name__)

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b'n+1\x00'
GZIP_MAGIC = b'\x1f\x8b'

# datatype code -> numpy dtype
DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
DATATYPE_CODES = {dtype: code for code, dtype in DATATYPES.items()}
INTEGER_CODES = {2, 4, 8}


def _read_raw(path):
    raw = Path(path).read_bytes()
    if raw[:2] == GZIP_MAGIC:
        raw = gzip.decompress(raw)
    return raw


def atomic_write(path, payload):
    """Write bytes to a uniquely named temporary sibling, then rename over `path`"""
    path = Path(path)
    with tempfile.NamedTemporaryFile(dir=path.parent, prefix=f".{path.name}.", suffix='.tmp',
                                     delete=False) as handle:
        handle.write(payload)
        tmp = Path(handle.name)
    try:
        os.replace(tmp, path)
    except OSError:
        tmp.unlink(missing_ok=True)
        raise


def parse_header(raw):
    """Validate the 348-byte header block; returns (header, endianness)"""
    if len(raw) < HEADER_SIZE:
        raise NiftiParseError('sizeof_hdr', f"file holds {len(raw)} bytes, shorter than the {HEADER_SIZE}-byte header")
    if int.from_bytes(raw[:4], 'little') == HEADER_SIZE:
        endianness = '<'
    elif int.from_bytes(raw[:4], 'big') == HEADER_SIZE:
        endianness = '>'
    else:
        raise NiftiParseError('sizeof_hdr', f"expected {HEADER_SIZE}, got {int.from_bytes(raw[:4], 'little')}")

    if raw[344:348] != MAGIC:
        raise NiftiParseError('magic', f"expected single-file magic 'n+1', got {raw[344:348]!r}")

    header = nib.Nifti1Header(binaryblock=raw[:HEADER_SIZE], endianness=endianness, check=False)
    code = int(header['datatype'])
    if code not in DATATYPES:
        raise NiftiParseError('datatype', f"unsupported datatype code {code}")
    bitpix = int(header['bitpix'])
    if bitpix != DATATYPES[code].itemsize * 8:
        raise NiftiParseError('bitpix', f"bitpix {bitpix} inconsistent with datatype code {code}")
    if float(header['vox_offset']) < HEADER_SIZE:
        raise NiftiParseError('vox_offset', f"data offset {float(header['vox_offset'])} inside the header")
    return header, endianness


def _header_affine(header):
    """sform when coded, else qform when coded, else the spacing diagonal"""
    if int(header['sform_code']) > 0:
        return header.get_sform()
    if int(header['qform_code']) > 0:
        return header.get_qform()
    affine = np.eye(4)
    affine[:3, :3] = np.diag(np.asarray(header['pixdim'][1:4], dtype=np.float64))
    return affine


def _scaling(header):
    slope = float(header['scl_slope'])
    inter = float(header['scl_inter'])
    if not np.isfinite(slope) or slope == 0.0:
        slope = 1.0
    if not np.isfinite(inter):
        inter = 0.0
    return slope, inter


def _read_data(raw, header, endianness, shape):
    code = int(header['datatype'])
    dtype = DATATYPES[code].newbyteorder(endianness)
    count = int(np.prod(shape))
    offset = int(header['vox_offset'])
    needed = offset + count * dtype.itemsize
    if len(raw) < needed:
        raise NiftiParseError('data', f"truncated data section: need {needed} bytes, file holds {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return data.astype(DATATYPES[code], copy=True).reshape(shape, order='F')


def _load(path, ndim_expected=3):
    raw = _read_raw(path)
    header, endianness = parse_header(raw)
    dim = [int(d) for d in header['dim']]
    if dim[0] != ndim_expected:
        raise NiftiParseError('dim', f"dim[0] must be {ndim_expected}, got {dim[0]}")
    shape = tuple(dim[1:1 + ndim_expected])
    if min(shape) < 1:
        raise NiftiParseError('dim', f"non-positive grid dims {shape}")
    return header, _read_data(raw, header, endianness, shape)


def read_nifti(path, as_labels=False):
    """
    Read a 3D NIfTI-1 volume. Intensities become float32 through
    scl_slope * v + scl_inter (slope 0 treated as 1). With as_labels=True the
    label entry point is used instead (see read_label_nifti).
    """
    if as_labels:
        return read_label_nifti(path)
    header, stored = _load(path)
    slope, inter = _scaling(header)
    data = stored.astype(np.float64) * slope + inter
    logger.debug("read %s dims=%s datatype=%d", path, stored.shape, int(header['datatype']))
    return Volume3(Grid(stored.shape, _header_affine(header)), data.astype(np.float32))


def read_label_nifti(path, label_table=None):
    """Read an integer label volume, preserving exact values"""
    header, stored = _load(path)
    slope, inter = _scaling(header)
    if slope != 1.0 or inter != 0.0:
        raise NiftiParseError('scl_slope', f"label files cannot carry intensity scaling (slope={slope}, inter={inter})")
    if int(header['datatype']) not in INTEGER_CODES:
        if not np.all(np.isfinite(stored)) or np.any(stored != np.round(stored)):
            raise NiftiParseError('datatype', "label file holds non-integer values")
    if stored.size and stored.min() < 0:
        raise NiftiParseError('data', "label file holds negative values")
    return LabelVolume(Grid(stored.shape, _header_affine(header)), stored, dict(label_table or {}))


def _build_header(shape, zooms, affine, dtype):
    header = nib.Nifti1Header(endianness='<')
    header.set_data_dtype(dtype)
    header.set_data_shape(shape)
    header.set_zooms(zooms)
    header.set_xyzt_units('mm')
    if is_orthogonal(affine[:3, :3]):
        header.set_qform(affine, code=1)
    else:
        # shears have no quaternion form; leave qform uncoded
        header['qform_code'] = 0
    header.set_sform(affine, code=1)
    header['scl_slope'] = 1.0
    header['scl_inter'] = 0.0
    header['vox_offset'] = VOX_OFFSET
    return header


def _encode(header, data, dtype, path):
    payload = header.binaryblock + b'\x00' * (VOX_OFFSET - HEADER_SIZE)
    payload += np.asarray(data, dtype=dtype.newbyteorder('<')).tobytes(order='F')
    if str(path).endswith('.gz'):
        # zero mtime keeps repeated writes byte-identical
        payload = gzip.compress(payload, compresslevel=6, mtime=0)
    atomic_write(path, payload)


def _check_representable(data, dtype):
    if not np.issubdtype(dtype, np.integer):
        return
    if not np.all(np.isfinite(data)) or np.any(data != np.round(data)):
        raise NiftiRangeError(f"non-integer values cannot be stored as {dtype.name}")
    info = np.iinfo(dtype)
    if data.size and (data.min() < info.min or data.max() > info.max):
        raise NiftiRangeError(
            f"values [{data.min()}, {data.max()}] exceed {dtype.name} range [{info.min}, {info.max}]")


def _default_dtype(vol):
    if isinstance(vol, LabelVolume):
        return np.dtype(np.int16) if vol.data.size == 0 or vol.data.max() <= np.iinfo(np.int16).max \
            else np.dtype(np.int32)
    return np.dtype(np.float32)


def write_nifti(vol, path, datatype=None):
    """
    Write a Volume3 / LabelVolume as little-endian NIfTI-1 (gzip when the
    path ends with .gz). sform_code = 1 with srow = voxel_to_world.
    """
    dtype = np.dtype(datatype) if datatype is not None else _default_dtype(vol)
    if dtype not in DATATYPE_CODES:
        raise NiftiRangeError(f"unsupported NIfTI datatype {dtype}")
    _check_representable(vol.data, dtype)
    header = _build_header(vol.dims, tuple(vol.spacing), vol.affine, dtype)
    _encode(header, vol.data, dtype, path)
    logger.debug("wrote %s (%s)", path, dtype.name)


def write_vector_nifti(vectors, grid, path):
    """Write an (nx, ny, nz, 3) vector field as dim (5, nx, ny, nz, 1, 3), intent 'vector'"""
    vectors = np.asarray(vectors)
    shape = tuple(grid.dims) + (1, 3)
    dtype = np.dtype(np.float32)
    header = _build_header(shape, tuple(grid.spacing) + (1.0, 1.0), grid.affine, dtype)
    header.set_intent('vector')
    _encode(header, vectors.reshape(shape), dtype, path)


def read_vector_nifti(path):
    """Read a field written by write_vector_nifti; returns (vectors (nx, ny, nz, 3) float64, Grid)"""
    raw = _read_raw(path)
    header, endianness = parse_header(raw)
    dim = [int(d) for d in header['dim']]
    if dim[0] != 5 or dim[4] != 1 or dim[5] != 3:
        raise NiftiParseError('dim', f"expected a 3-component vector field, got dim {dim[:6]}")
    shape = tuple(dim[1:4]) + (1, 3)
    data = _read_data(raw, header, endianness, shape)
    return data.reshape(shape[:3] + (3,)).astype(np.float64), Grid(shape[:3], _header_affine(header))
