"""Single-file uncompressed NIfTI-1 subset.

Supported: little-endian, 348-byte header + 4-byte extender, vox_offset 352,
float32 (images, displacement fields, feature channels) and int16 (labels,
masks), 3-D volumes or 5-D volumes with dim[4] = 1 (dimension 5 holds vector
components or feature channels), affine restricted to diagonal spacing plus
origin (sform) or pixdim only. Anything else is rejected with an explicit
error, never coerced.

Payload bytes are Fortran-ordered (x fastest), the NIfTI convention.
Round-trips are bit-exact at the stored precision: values are cast to
float32/int16 on write and widened on read.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .grids import GridGeometry, LabelVolume, MaskVolume, ScalarVolume, VectorField

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"
DESCRIP = b"mindreg volume"

DT_INT16 = 4
DT_FLOAT32 = 16

# struct layout of the whole 348-byte header, little-endian, no padding
_HEADER_FMT = "<i10s18sih2c8h3f4h8f3fh2B4f2i80s24s2h6f4f4f4f16s4s"
_HEADER = struct.Struct(_HEADER_FMT)
assert _HEADER.size == HEADER_SIZE


class NiftiError(Exception):
    """Base for all file-format errors."""


class MalformedHeaderError(NiftiError):
    pass


class UnsupportedFeatureError(NiftiError):
    """Valid NIfTI, but outside the supported subset (dtype, compression,
    endianness, extensions, non-diagonal affine, ...)."""


class SizeMismatchError(NiftiError):
    """Header dimensions disagree with the payload size."""


@dataclass
class ChannelVolume:
    """Multi-channel voxel data (features); channels along the last axis."""

    geometry: GridGeometry
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[:3] != tuple(self.geometry.shape):
            raise ValueError("channel data must have shape geometry.shape + (C,)")
        if self.data.shape[3] < 1:
            raise ValueError("at least one channel required")


def _pack_header(dims, datatype, bitpix, spacing, origin, intent_code):
    dim = [0] * 8
    dim[0] = len(dims)
    for i, d in enumerate(dims, start=1):
        dim[i] = d
    pixdim = [1.0] + [float(s) for s in spacing] + [0.0] * 4
    srow_x = (float(spacing[0]), 0.0, 0.0, float(origin[0]))
    srow_y = (0.0, float(spacing[1]), 0.0, float(origin[1]))
    srow_z = (0.0, 0.0, float(spacing[2]), float(origin[2]))
    return _HEADER.pack(
        HEADER_SIZE,          # sizeof_hdr
        b"", b"",             # data_type, db_name (unused)
        0, 0,                 # extents, session_error
        b"\x00", b"\x00",     # regular, dim_info
        *dim,                 # dim[8]
        0.0, 0.0, 0.0,        # intent_p1..p3
        intent_code, datatype, bitpix, 0,   # intent_code, datatype, bitpix, slice_start
        *pixdim,              # pixdim[8]
        float(VOX_OFFSET), 1.0, 0.0,        # vox_offset, scl_slope, scl_inter
        0, 0, 2,              # slice_end, slice_code, xyzt_units (mm)
        0.0, 0.0, 0.0, 0.0,   # cal_max, cal_min, slice_duration, toffset
        0, 0,                 # glmax, glmin
        DESCRIP, b"",         # descrip, aux_file
        0, 1,                 # qform_code, sform_code
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,       # quaternion + qoffset
        *srow_x, *srow_y, *srow_z,
        b"",                  # intent_name
        MAGIC,
    )


def _payload_array(value):
    """(dims tuple, dtype code, bitpix, contiguous array to serialize)."""
    if isinstance(value, ScalarVolume):
        arr = np.asarray(value.data, dtype="<f4")
        return tuple(value.geometry.shape), DT_FLOAT32, 32, arr, 0
    if isinstance(value, VectorField):
        shape = tuple(value.geometry.shape)
        arr = np.asarray(value.data, dtype="<f4").reshape(shape + (1, 3))
        return shape + (1, 3), DT_FLOAT32, 32, arr, 1007
    if isinstance(value, ChannelVolume):
        shape = tuple(value.geometry.shape)
        c = value.data.shape[3]
        arr = np.asarray(value.data, dtype="<f4").reshape(shape + (1, c))
        return shape + (1, c), DT_FLOAT32, 32, arr, 0
    if isinstance(value, LabelVolume):
        if value.data.max(initial=0) > np.iinfo(np.int16).max:
            raise ValueError("labels exceed the int16 range of the file format")
        arr = np.asarray(value.data, dtype="<i2")
        return tuple(value.geometry.shape), DT_INT16, 16, arr, 0
    if isinstance(value, MaskVolume):
        arr = value.data.astype("<i2")
        return tuple(value.geometry.shape), DT_INT16, 16, arr, 0
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_volume(value, path) -> None:
    """Serialize a volume/field/label/mask/channel value to a .nii file."""
    with np.errstate(over="ignore"):  # overflow is reported below, not warned
        dims, datatype, bitpix, arr, intent = _payload_array(value)
    if datatype == DT_FLOAT32 and not np.isfinite(arr).all():
        if not np.isfinite(np.asarray(value.data)).all():
            raise ValueError("volume contains non-finite values")
        raise ValueError("values exceed the float32 range of the file format")
    geom = value.geometry
    header = _pack_header(dims, datatype, bitpix, geom.spacing, geom.origin, intent)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\x00\x00\x00\x00")  # extender: no header extensions
        fh.write(arr.tobytes(order="F"))


def _check_endianness(raw: bytes) -> None:
    le = int.from_bytes(raw[:4], "little")
    if le == HEADER_SIZE:
        return
    if int.from_bytes(raw[:4], "big") == HEADER_SIZE:
        raise UnsupportedFeatureError("big-endian files are not supported")
    raise MalformedHeaderError(f"sizeof_hdr is {le}, expected {HEADER_SIZE}")


def read_volume(path):
    """Read a supported .nii file.

    Returns ScalarVolume (float32, 3-D), LabelVolume (int16, 3-D),
    VectorField (float32, 5-D with 3 components) or ChannelVolume (float32,
    5-D with any other channel count).
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raise UnsupportedFeatureError("compressed (gzip) files are not supported")
    if len(raw) < VOX_OFFSET:
        raise MalformedHeaderError("file is shorter than a NIfTI-1 header")
    _check_endianness(raw)
    fields = _HEADER.unpack(raw[:HEADER_SIZE])
    magic = fields[-1]
    if magic != MAGIC:
        if magic[:3] == b"ni1":
            raise UnsupportedFeatureError("two-file (.hdr/.img) NIfTI is not supported")
        raise MalformedHeaderError(f"bad magic {magic!r}")
    dim = fields[7:15]
    intent_code, datatype, bitpix, _slice_start = fields[18:22]
    pixdim = fields[22:30]
    vox_offset, scl_slope, scl_inter = fields[30:33]
    qform_code, sform_code = fields[44:46]
    srow = np.array(fields[52:64], dtype=np.float64).reshape(3, 4)

    if vox_offset != float(VOX_OFFSET):
        if vox_offset > VOX_OFFSET:
            raise UnsupportedFeatureError("header extensions are not supported")
        raise MalformedHeaderError(f"vox_offset {vox_offset} is invalid")
    if datatype not in (DT_INT16, DT_FLOAT32):
        raise UnsupportedFeatureError(f"datatype code {datatype} is not supported")
    expected_bitpix = 16 if datatype == DT_INT16 else 32
    if bitpix != expected_bitpix:
        raise MalformedHeaderError(f"bitpix {bitpix} does not match datatype {datatype}")
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        raise UnsupportedFeatureError("intensity scaling (scl_slope/scl_inter) is not supported")

    ndim = dim[0]
    if ndim == 3:
        dims = tuple(int(d) for d in dim[1:4])
    elif ndim == 5:
        dims = tuple(int(d) for d in dim[1:6])
        if dims[3] != 1:
            raise UnsupportedFeatureError("time axis (dim[4] > 1) is not supported")
        if datatype != DT_FLOAT32:
            raise UnsupportedFeatureError("5-D volumes must be float32")
    else:
        raise UnsupportedFeatureError(f"{ndim}-D volumes are not supported")
    if any(d < 1 for d in dims):
        raise MalformedHeaderError(f"non-positive dimension in {dims}")
    if any(d < 4 for d in dims[:3]):
        raise UnsupportedFeatureError("volumes smaller than 4 voxels per axis are not supported")

    if qform_code != 0:
        raise UnsupportedFeatureError("quaternion (qform) affines are not supported")
    if sform_code == 1:
        off_diag = srow[:, :3].copy()
        np.fill_diagonal(off_diag, 0.0)
        if np.any(off_diag != 0.0):
            raise UnsupportedFeatureError("non-diagonal affines are not supported")
        spacing = tuple(np.diag(srow[:, :3]))
        origin = tuple(srow[:, 3])
        if any(s <= 0 for s in spacing):
            raise MalformedHeaderError(f"non-positive sform spacing {spacing}")
    elif sform_code == 0:
        spacing = tuple(float(p) for p in pixdim[1:4])
        origin = (0.0, 0.0, 0.0)
        if any(s <= 0 for s in spacing):
            raise MalformedHeaderError(f"non-positive pixdim spacing {spacing}")
    else:
        raise UnsupportedFeatureError(f"sform_code {sform_code} is not supported")

    count = int(np.prod(dims))
    expected_bytes = count * bitpix // 8
    payload = raw[VOX_OFFSET:]
    if len(payload) != expected_bytes:
        raise SizeMismatchError(
            f"payload holds {len(payload)} bytes, header implies {expected_bytes}"
        )
    np_dtype = "<i2" if datatype == DT_INT16 else "<f4"
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(dims, order="F")
    geometry = GridGeometry(dims[:3], spacing, origin)
    if ndim == 3:
        if datatype == DT_INT16:
            return LabelVolume(geometry, arr.astype(np.int32))
        return ScalarVolume(geometry, arr.astype(np.float64))
    channels = arr.reshape(dims[:3] + (dims[4],)).astype(np.float64)
    if dims[4] == 3 and intent_code == 1007:
        return VectorField(geometry, channels)
    return ChannelVolume(geometry, channels)
