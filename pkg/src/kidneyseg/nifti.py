"""Minimal NIfTI-1 reader/writer for the pipeline's exchange subset.

Supported layout: uncompressed single-file .nii, 3 spatial dimensions,
int16 or float32 payload, no extensions. The affine is reduced to
per-axis spacing (pixdim) plus an origin stored in the sform/qform
offsets. Byte order is auto-detected from the sizeof_hdr field.
"""

import struct

import numpy as np

from .errors import CorruptFile, IoError, UnsupportedFormat, UnsupportedShape
from .volume import Volume

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte extender
DT_INT16 = 4
DT_FLOAT32 = 16

_DTYPES = {DT_INT16: np.dtype(np.int16), DT_FLOAT32: np.dtype(np.float32)}
_GZIP_MAGIC = b"\x1f\x8b"


def _storage_dtype(data):
    if np.issubdtype(data.dtype, np.integer):
        if data.size and (data.min() < -(2**15) or data.max() >= 2**15):
            raise UnsupportedFormat("integer data out of int16 range")
        return DT_INT16, np.dtype(np.int16)
    return DT_FLOAT32, np.dtype(np.float32)


def write_nifti(vol: Volume, path, byteorder=None):
    """Write a volume as an uncompressed single-file NIfTI-1.

    Integer data is stored as int16, float data as float32; round-trip
    through read_nifti is bit-exact for those dtypes. `byteorder` is
    "<" or ">" (default little-endian).
    """
    bo = byteorder or "<"
    if bo not in ("<", ">"):
        raise ValueError(f"byteorder must be '<' or '>', got {bo!r}")
    code, dtype = _storage_dtype(vol.data)
    data = np.ascontiguousarray(vol.data).astype(dtype.newbyteorder(bo), copy=False)

    hdr = bytearray(HEADER_SIZE)
    pack = lambda fmt, off, *vals: struct.pack_into(bo + fmt, hdr, off, *vals)
    nx, ny, nz = vol.shape
    sx, sy, sz = vol.spacing
    ox, oy, oz = vol.origin
    pack("i", 0, HEADER_SIZE)
    pack("8h", 40, 3, nx, ny, nz, 1, 1, 1, 1)
    pack("h", 70, code)
    pack("h", 72, dtype.itemsize * 8)
    pack("8f", 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    pack("f", 108, float(VOX_OFFSET))
    pack("f", 112, 1.0)  # scl_slope
    pack("f", 116, 0.0)  # scl_inter
    pack("h", 252, 0)  # qform_code
    pack("h", 254, 1)  # sform_code
    pack("3f", 268, ox, oy, oz)  # qoffset, mirrors the sform translation
    pack("4f", 280, sx, 0.0, 0.0, ox)
    pack("4f", 296, 0.0, sy, 0.0, oy)
    pack("4f", 312, 0.0, 0.0, sz, oz)
    hdr[344:348] = b"n+1\x00"

    try:
        with open(path, "wb") as fh:
            fh.write(hdr)
            fh.write(b"\x00\x00\x00\x00")  # extender: no extensions
            fh.write(data.tobytes(order="F"))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_nifti(path, kind="intensity") -> Volume:
    """Read a NIfTI-1 file from the supported subset into a Volume."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    if raw[:2] == _GZIP_MAGIC:
        raise UnsupportedFormat(f"{path}: compressed NIfTI is not supported")
    if len(raw) < HEADER_SIZE:
        raise CorruptFile(f"{path}: file shorter than the 348-byte header")

    (native,) = struct.unpack_from("<i", raw, 0)
    if native == HEADER_SIZE:
        bo = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
        bo = ">"
    else:
        raise UnsupportedFormat(f"{path}: sizeof_hdr is not 348 in either byte order")

    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise UnsupportedFormat(f"{path}: bad magic {magic!r}")

    dim = struct.unpack_from(bo + "8h", raw, 40)
    if dim[0] != 3:
        raise UnsupportedShape(f"{path}: expected 3 dims, header says {dim[0]}")
    nx, ny, nz = dim[1:4]
    if min(nx, ny, nz) <= 0:
        raise CorruptFile(f"{path}: non-positive dimension in header")

    (datatype,) = struct.unpack_from(bo + "h", raw, 70)
    if datatype not in _DTYPES:
        raise UnsupportedFormat(f"{path}: unsupported datatype code {datatype}")
    dtype = _DTYPES[datatype].newbyteorder(bo)

    pixdim = struct.unpack_from(bo + "8f", raw, 76)
    spacing = pixdim[1:4]
    if any(s <= 0 for s in spacing):
        raise CorruptFile(f"{path}: non-positive pixdim {spacing}")

    (vox_offset,) = struct.unpack_from(bo + "f", raw, 108)
    vox_offset = int(vox_offset)
    if vox_offset < HEADER_SIZE:
        raise UnsupportedFormat(f"{path}: payload offset {vox_offset} (detached data?)")

    (sform_code,) = struct.unpack_from(bo + "h", raw, 254)
    if sform_code > 0:
        origin = (
            struct.unpack_from(bo + "4f", raw, 280)[3],
            struct.unpack_from(bo + "4f", raw, 296)[3],
            struct.unpack_from(bo + "4f", raw, 312)[3],
        )
    else:
        origin = struct.unpack_from(bo + "3f", raw, 268)

    nbytes = nx * ny * nz * dtype.itemsize
    payload = raw[vox_offset : vox_offset + nbytes]
    if len(payload) < nbytes:
        raise CorruptFile(f"{path}: payload truncated ({len(payload)} of {nbytes} bytes)")

    data = np.frombuffer(payload, dtype=dtype).reshape((nx, ny, nz), order="F")
    data = data.astype(dtype.newbyteorder("="), copy=False)
    return Volume(data, spacing, origin, kind)
