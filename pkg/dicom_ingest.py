"""
DICOM series ingest for CTMORPH
Parses single-frame CT DICOM files and assembles one series into a Volume3.
Only uncompressed little-endian transfer syntaxes are accepted.
"""

import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pydicom
from pydicom.errors import InvalidDicomError
from pydicom.uid import ExplicitVRLittleEndian, ImplicitVRLittleEndian

from errors import DicomParseError, SeriesAssemblyError
from nifti_io import write_nifti
from volume_core import Grid, Volume3

logger = logging.getLogger(__name__)

SUPPORTED_SYNTAXES = {
    ExplicitVRLittleEndian: 'explicit VR little endian',
    ImplicitVRLittleEndian: 'implicit VR little endian',
}

REQUIRED_TAGS = (
    'Rows',
    'Columns',
    'PixelSpacing',
    'ImagePositionPatient',
    'ImageOrientationPatient',
    'SeriesInstanceUID',
    'BitsAllocated',
    'PixelRepresentation',
    'PixelData',
)

COSINE_TOL = 1e-3
SPACING_TOL = 1e-2
DUPLICATE_TOL = 1e-3
# DICOM patient frame (LPS) to RAS world
LPS_TO_RAS = np.diag([-1.0, -1.0, 1.0, 1.0])


@dataclass(frozen=True, eq=False)
class DicomSlice:
    rows: int
    columns: int
    pixel_spacing: tuple        # (row spacing, column spacing) mm
    image_position: np.ndarray  # (0020,0032)
    image_orientation: np.ndarray  # (0020,0037): row cosine then column cosine
    rescale_slope: float
    rescale_intercept: float
    series_uid: str
    pixels: np.ndarray          # (rows, columns) stored values, sign-extended
    bits_allocated: int = 16
    bits_stored: int = 16
    high_bit: int = 15
    source: str = '<bytes>'

    @property
    def row_cosine(self):
        return self.image_orientation[:3]

    @property
    def column_cosine(self):
        return self.image_orientation[3:]

    @property
    def normal(self):
        return np.cross(self.row_cosine, self.column_cosine)

    def hounsfield(self):
        return (self.pixels.astype(np.float64) * self.rescale_slope + self.rescale_intercept).astype(np.float32)


def _floats(value, count, keyword):
    items = value if hasattr(value, "__iter__") and not isinstance(value, (str, bytes)) else [value]
    values = [float(v) for v in items]
    if len(values) != count:
        raise DicomParseError(keyword, f"expected {count} values, got {len(values)}")
    return np.asarray(values, dtype=np.float64)


def _stored_pixels(ds, rows, columns, source):
    bits_allocated = int(ds.BitsAllocated)
    if bits_allocated != 16:
        raise DicomParseError('BitsAllocated', f"{source}: only 16-bit pixel data is supported, got {bits_allocated}")
    bits_stored = int(ds.get('BitsStored', 16))
    signed = int(ds.PixelRepresentation) == 1
    raw = ds.PixelData
    count = rows * columns
    if len(raw) != count * 2:
        raise DicomParseError('PixelData', f"{source}: expected {count * 2} bytes, got {len(raw)}")
    values = np.frombuffer(raw, dtype='<u2', count=count).astype(np.int32)
    values &= (1 << bits_stored) - 1
    if signed:
        sign_bit = 1 << (bits_stored - 1)
        values = np.where(values & sign_bit, values - (1 << bits_stored), values)
    return values.reshape(rows, columns), bits_allocated, bits_stored


def parse_dicom_file(data, source='<bytes>'):
    """Parse one Part 10 file (bytes) into a DicomSlice"""
    try:
        ds = pydicom.dcmread(io.BytesIO(data), force=False)
    except InvalidDicomError as exc:
        raise DicomParseError('DICM', f"{source}: missing 128-byte preamble and 'DICM' prefix") from exc

    syntax = getattr(ds.file_meta, 'TransferSyntaxUID', None) if hasattr(ds, 'file_meta') else None
    if syntax is None:
        raise DicomParseError('TransferSyntaxUID', f"{source}: file meta carries no transfer syntax")
    if syntax not in SUPPORTED_SYNTAXES:
        raise DicomParseError('TransferSyntaxUID',
                              f"{source}: transfer syntax {syntax} is compressed or unsupported")

    for keyword in REQUIRED_TAGS:
        if keyword not in ds:
            raise DicomParseError(keyword, f"{source}: required tag {keyword} is missing")

    rows, columns = int(ds.Rows), int(ds.Columns)
    orientation = _floats(ds.ImageOrientationPatient, 6, 'ImageOrientationPatient')
    row_cos, col_cos = orientation[:3], orientation[3:]
    if (abs(np.linalg.norm(row_cos) - 1.0) > COSINE_TOL or abs(np.linalg.norm(col_cos) - 1.0) > COSINE_TOL
            or abs(float(np.dot(row_cos, col_cos))) > COSINE_TOL):
        raise DicomParseError('ImageOrientationPatient', f"{source}: direction cosines are not orthonormal")

    pixels, bits_allocated, bits_stored = _stored_pixels(ds, rows, columns, source)
    return DicomSlice(
        rows=rows,
        columns=columns,
        pixel_spacing=tuple(_floats(ds.PixelSpacing, 2, 'PixelSpacing')),
        image_position=_floats(ds.ImagePositionPatient, 3, 'ImagePositionPatient'),
        image_orientation=orientation,
        rescale_slope=float(ds.get('RescaleSlope', 1.0)),
        rescale_intercept=float(ds.get('RescaleIntercept', 0.0)),
        series_uid=str(ds.SeriesInstanceUID),
        pixels=pixels,
        bits_allocated=bits_allocated,
        bits_stored=bits_stored,
        high_bit=int(ds.get('HighBit', bits_stored - 1)),
        source=source,
    )


def _check_uniform(slices):
    uids = sorted({s.series_uid for s in slices})
    if len(uids) > 1:
        raise SeriesAssemblyError(f"mixed series: {len(uids)} SeriesInstanceUIDs ({', '.join(uids)})")
    first = slices[0]
    for s in slices[1:]:
        if (s.rows, s.columns) != (first.rows, first.columns):
            raise SeriesAssemblyError(f"{s.source}: slice dims {(s.rows, s.columns)} differ from "
                                      f"{(first.rows, first.columns)}")
        if np.max(np.abs(np.subtract(s.pixel_spacing, first.pixel_spacing))) > SPACING_TOL:
            raise SeriesAssemblyError(f"{s.source}: pixel spacing {s.pixel_spacing} differs from {first.pixel_spacing}")
        if np.max(np.abs(s.image_orientation - first.image_orientation)) > COSINE_TOL:
            raise SeriesAssemblyError(f"{s.source}: inconsistent ImageOrientationPatient")


def assemble_series(slices, to_ras=False):
    """
    Stack slices into a Volume3 in Hounsfield units. Slices are sorted by the
    projection of ImagePositionPatient onto the slice normal; voxel (i, j, k)
    is column i, row j of the k-th sorted slice. With to_ras the patient
    frame (LPS) is flipped to RAS world coordinates.
    """
    slices = list(slices)
    if len(slices) < 2:
        raise SeriesAssemblyError(f"a series needs at least 2 slices, got {len(slices)}")
    _check_uniform(slices)

    # reference geometry independent of input order
    normal = min(slices, key=lambda s: s.source).normal
    # stable sort; ties are rejected below
    ordered = sorted(slices, key=lambda s: (float(np.dot(s.image_position, normal)), s.source))
    depths = np.array([float(np.dot(s.image_position, normal)) for s in ordered])
    gaps = np.diff(depths)

    duplicates = [(ordered[i].source, ordered[i + 1].source) for i in np.flatnonzero(gaps < DUPLICATE_TOL)]
    if duplicates:
        listed = '; '.join(f"{a} / {b}" for a, b in duplicates)
        raise SeriesAssemblyError(f"duplicate slice positions: {listed}")
    if np.max(gaps) - np.min(gaps) > SPACING_TOL:
        raise SeriesAssemblyError(f"non-uniform slice spacing: gaps range {gaps.min():.4f}..{gaps.max():.4f} mm")

    origin = ordered[0].image_position
    for s in ordered[1:]:
        offset = s.image_position - origin
        in_plane = offset - np.dot(offset, normal) * normal
        if np.linalg.norm(in_plane) > SPACING_TOL:
            raise SeriesAssemblyError(
                f"{s.source}: slice positions drift {np.linalg.norm(in_plane):.3f} mm in-plane (gantry tilt)")

    slice_spacing = (depths[-1] - depths[0]) / (len(ordered) - 1)
    row_spacing, column_spacing = ordered[0].pixel_spacing
    affine = np.eye(4)
    affine[:3, 0] = ordered[0].row_cosine * column_spacing
    affine[:3, 1] = ordered[0].column_cosine * row_spacing
    affine[:3, 2] = normal * slice_spacing
    affine[:3, 3] = origin
    if to_ras:
        affine = LPS_TO_RAS @ affine

    # pixels are (rows, columns) = (j, i); volume is indexed [i, j, k]
    data = np.stack([s.hounsfield().T for s in ordered], axis=-1)
    logger.info("assembled %d slices, dims=%s spacing=%.3f/%.3f/%.3f mm", len(ordered), data.shape,
                column_spacing, row_spacing, slice_spacing)
    return Volume3(Grid(data.shape, affine), data)


def read_dicom_dir(directory, workers=4):
    """Parse every DICOM file under a directory; non-DICOM files are skipped"""
    paths = sorted(p for p in Path(directory).rglob('*') if p.is_file())
    if not paths:
        raise SeriesAssemblyError(f"no files found under {directory}")

    def parse(path):
        try:
            return parse_dicom_file(path.read_bytes(), source=str(path))
        except DicomParseError as exc:
            if exc.tag == 'DICM':
                logger.warning("skipping non-DICOM file %s", path)
                return None
            raise

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parsed = list(pool.map(parse, paths))
    slices = [s for s in parsed if s is not None]
    logger.info("parsed %d DICOM slices from %s", len(slices), directory)
    return slices


def convert_dicom_dir(directory, out_path=None, to_ras=True):
    """Conversion stage: DICOM directory -> Volume3 (and NIfTI file when out_path is given)"""
    volume = assemble_series(read_dicom_dir(directory), to_ras=to_ras)
    if out_path is not None:
        write_nifti(volume, out_path)
    return volume
