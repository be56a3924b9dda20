"""Volume files: a small native format and a NIfTI-1 subset.

Native layout: the magic line ``b"ATLVOL1\\n"``, a little-endian uint32 header
length, a UTF-8 JSON header and the raw little-endian voxel payload in
x-fastest order. The header holds ``dims``, ``spacing_mm``, ``origin_mm``,
``dtype`` and ``checksum_crc32`` (CRC-32 of the payload), plus ``kind`` and,
for label maps, ``num_classes``.

NIfTI support is deliberately narrow: single-file ``n+1``, 3D,
uint8/int16/uint16/float32, optional gzip. Orientation fields are read but
only spacing (``pixdim[1..3]``) and the translation are used.
"""

from __future__ import annotations

import gzip
import json
import struct
import warnings
import zlib

import numpy as np

from .errors import (
    BadMagicError,
    CorruptFileError,
    FileFormatError,
    InvalidArgumentError,
    TruncatedFileError,
    UnsupportedDatatypeError,
    UnsupportedFeatureError,
)
from .model import DEFAULT_CLASS_NAMES, ImageVolume, LabelVolume

NATIVE_MAGIC = b"ATLVOL1\n"
NATIVE_DTYPES = ("bool", "uint8", "int8", "uint16", "int16", "uint32", "int32", "int64", "float32", "float64")

NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352
NIFTI_DTYPES = {2: np.dtype("uint8"), 4: np.dtype("<i2"), 16: np.dtype("<f4"), 512: np.dtype("<u2")}
_NUMPY_TO_NIFTI = {"u1": 2, "i2": 4, "f4": 16, "u2": 512}


class NonDiagonalSformWarning(UserWarning):
    pass


def _default_num_classes(voxels):
    hi = int(voxels.max()) if voxels.size else 0
    return max(len(DEFAULT_CLASS_NAMES), hi)


def _array_of(vol):
    return vol.voxels if isinstance(vol, LabelVolume) else vol.data


# --- native ----------------------------------------------------------------------


def _write_native(vol, path):
    arr = _array_of(vol)
    dtype = arr.dtype.name
    if dtype not in NATIVE_DTYPES:
        raise InvalidArgumentError(f"dtype {dtype} cannot be stored in the native format")
    payload = np.asarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes(order="F")
    header = {
        "dims": list(vol.dims),
        "spacing_mm": vol.spacing_mm.tolist(),
        "origin_mm": vol.origin_mm.tolist(),
        "dtype": dtype,
        "checksum_crc32": zlib.crc32(payload),
        "kind": "label" if isinstance(vol, LabelVolume) else "image",
    }
    if isinstance(vol, LabelVolume):
        header["num_classes"] = vol.num_classes
    hbytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(NATIVE_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload)


def _read_native(raw, path, kind, num_classes):
    n0 = len(NATIVE_MAGIC)
    if len(raw) < n0 + 4:
        raise TruncatedFileError(f"{path}: file too short for a native header")
    (hlen,) = struct.unpack_from("<I", raw, n0)
    if len(raw) < n0 + 4 + hlen:
        raise TruncatedFileError(f"{path}: header truncated")
    try:
        header = json.loads(raw[n0 + 4 : n0 + 4 + hlen].decode("utf-8"))
        dims = tuple(int(d) for d in header["dims"])
        dtype = header["dtype"]
        checksum = int(header["checksum_crc32"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptFileError(f"{path}: bad native header ({exc})") from None
    if dtype not in NATIVE_DTYPES:
        raise CorruptFileError(f"{path}: unknown dtype {dtype!r}")
    dt = np.dtype(dtype).newbyteorder("<")
    payload = raw[n0 + 4 + hlen :]
    expected = int(np.prod(dims)) * dt.itemsize
    if len(payload) < expected:
        raise TruncatedFileError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise CorruptFileError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    if zlib.crc32(payload) != checksum:
        raise CorruptFileError(f"{path}: checksum mismatch")
    arr = np.frombuffer(payload, dtype=dt).reshape(dims, order="F").astype(np.dtype(dtype), copy=True)
    kind = kind or header.get("kind", "label" if np.issubdtype(arr.dtype, np.integer) else "image")
    if kind == "label":
        n = num_classes or header.get("num_classes") or _default_num_classes(arr)
        return LabelVolume(arr, header["spacing_mm"], header["origin_mm"], int(n))
    return ImageVolume(arr, header["spacing_mm"], header["origin_mm"])


# --- NIfTI-1 subset --------------------------------------------------------------


def _nifti_header(arr_dtype_code, bitpix, dims, spacing, origin):
    h = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", h, 0, NIFTI_HEADER_SIZE)
    h[38:39] = b"r"
    struct.pack_into("<8h", h, 40, 3, *dims, 1, 1, 1, 1)
    struct.pack_into("<hh", h, 70, arr_dtype_code, bitpix)
    struct.pack_into("<8f", h, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", h, 108, float(NIFTI_VOX_OFFSET))
    struct.pack_into("<ff", h, 112, 1.0, 0.0)
    h[123] = 2  # xyzt_units: millimetres
    struct.pack_into("<hh", h, 252, 0, 1)  # qform_code, sform_code
    struct.pack_into("<4f", h, 280, spacing[0], 0.0, 0.0, origin[0])
    struct.pack_into("<4f", h, 296, 0.0, spacing[1], 0.0, origin[1])
    struct.pack_into("<4f", h, 312, 0.0, 0.0, spacing[2], origin[2])
    h[344:348] = b"n+1\x00"
    return bytes(h)


def _write_nifti(vol, path):
    arr = _array_of(vol)
    if isinstance(vol, LabelVolume):
        hi = int(arr.max()) if arr.size else 0
        arr = arr.astype(np.uint8 if hi <= 255 else np.uint16)
    code = _NUMPY_TO_NIFTI.get(arr.dtype.str.lstrip("<|="))
    if code is None:
        nifti_code = {np.dtype("float64"): 64, np.dtype("int32"): 8, np.dtype("int8"): 256}.get(arr.dtype, -1)
        raise UnsupportedDatatypeError(nifti_code)
    header = _nifti_header(code, arr.dtype.itemsize * 8, vol.dims, vol.spacing_mm, vol.origin_mm)
    data = header + b"\x00" * (NIFTI_VOX_OFFSET - NIFTI_HEADER_SIZE) + np.asarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes(order="F")
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(data)


def _read_nifti(raw, path, kind, num_classes):
    if len(raw) < NIFTI_HEADER_SIZE:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is shorter than a NIfTI-1 header")
    (size_le,) = struct.unpack_from("<i", raw, 0)
    (size_be,) = struct.unpack_from(">i", raw, 0)
    magic = bytes(raw[344:348])
    if size_le != NIFTI_HEADER_SIZE:
        if size_be == NIFTI_HEADER_SIZE:
            raise UnsupportedFeatureError(f"{path}: big-endian NIfTI is not supported")
        raise BadMagicError(f"{path}: sizeof_hdr is {size_le}, not {NIFTI_HEADER_SIZE}")
    if magic == b"ni1\x00":
        raise UnsupportedFeatureError(f"{path}: two-file NIfTI (.hdr/.img) is not supported")
    if magic != b"n+1\x00":
        raise BadMagicError(f"{path}: bad NIfTI magic {magic!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise UnsupportedFeatureError(f"{path}: only 3D volumes are supported, dim[0] = {dim[0]}")
    dims = tuple(int(d) for d in dim[1:4])
    if min(dims) < 1:
        raise CorruptFileError(f"{path}: invalid dims {dims}")
    datatype, bitpix = struct.unpack_from("<hh", raw, 70)
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedDatatypeError(int(datatype))
    dt = NIFTI_DTYPES[datatype]
    if bitpix != dt.itemsize * 8:
        raise CorruptFileError(f"{path}: bitpix {bitpix} does not match datatype {datatype}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = np.array(pixdim[1:4], dtype=np.float64)
    if not np.all(spacing > 0):
        raise CorruptFileError(f"{path}: non-positive spacing {spacing.tolist()}")
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    slope, inter = struct.unpack_from("<ff", raw, 112)
    if not (slope in (0.0, 1.0) and inter == 0.0):
        raise UnsupportedFeatureError(f"{path}: intensity scaling (scl_slope={slope}, scl_inter={inter}) is not supported")
    qform_code, sform_code = struct.unpack_from("<hh", raw, 252)
    origin = np.zeros(3)
    if sform_code > 0:
        srow = np.array([struct.unpack_from("<4f", raw, off) for off in (280, 296, 312)], dtype=np.float64)
        if np.any(srow[:, :3] != np.diag(np.diag(srow[:, :3]))):
            warnings.warn(f"{path}: non-diagonal sform; orientation ignored, only spacing is used", NonDiagonalSformWarning, stacklevel=3)
        origin = srow[:, 3]
    elif qform_code > 0:
        origin = np.array(struct.unpack_from("<3f", raw, 268), dtype=np.float64)

    offset = int(vox_offset)
    if offset < NIFTI_HEADER_SIZE or offset != vox_offset:
        raise CorruptFileError(f"{path}: invalid vox_offset {vox_offset}")
    n_bytes = int(np.prod(dims)) * dt.itemsize
    if len(raw) < offset + n_bytes:
        raise TruncatedFileError(f"{path}: payload has {len(raw) - offset} bytes, expected {n_bytes}")
    arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(dims)), offset=offset).reshape(dims, order="F")
    arr = arr.astype(dt.newbyteorder("="), copy=True)
    if kind is None:
        kind = "image" if dt.kind == "f" else "label"
    if kind == "label":
        if dt.kind == "f":
            if not np.all(arr == np.round(arr)):
                raise InvalidArgumentError(f"{path}: float voxels are not integral labels")
            arr = arr.astype(np.int32)
        if arr.size and arr.min() < 0:
            raise InvalidArgumentError(f"{path}: negative values in a label file")
        return LabelVolume(arr, spacing, origin, int(num_classes or _default_num_classes(arr)))
    return ImageVolume(arr, spacing, origin)


# --- dispatch ----------------------------------------------------------------------


def detect_format(path):
    p = str(path).lower()
    if p.endswith(".nii") or p.endswith(".nii.gz"):
        return "nifti"
    return "native"


def read_volume(path, kind=None, num_classes=None):
    """Read a native or NIfTI volume.

    ``kind`` forces ``"label"`` (:class:`LabelVolume`) or ``"image"``
    (:class:`ImageVolume`); by default the file decides. The format is
    recognised from the content, not the file name.
    """
    if kind not in (None, "label", "image"):
        raise InvalidArgumentError(f"kind must be 'label' or 'image', got {kind!r}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedFileError(f"{path}: broken gzip stream ({exc})") from None
    if raw.startswith(NATIVE_MAGIC):
        return _read_native(raw, path, kind, num_classes)
    if len(raw) >= NIFTI_HEADER_SIZE and raw[344:347] in (b"n+1", b"ni1"):
        return _read_nifti(raw, path, kind, num_classes)
    if len(raw) >= 4 and struct.unpack_from("<i", raw, 0)[0] == NIFTI_HEADER_SIZE:
        return _read_nifti(raw, path, kind, num_classes)
    if len(raw) >= 4 and struct.unpack_from(">i", raw, 0)[0] == NIFTI_HEADER_SIZE:
        return _read_nifti(raw, path, kind, num_classes)
    raise BadMagicError(f"{path}: neither a native volume nor a NIfTI-1 file")


def write_volume(vol, path, format=None):
    """Write ``vol``; ``format`` is ``"native"`` or ``"nifti"`` (default: by extension)."""
    fmt = format or detect_format(path)
    if fmt == "native":
        _write_native(vol, path)
    elif fmt == "nifti":
        _write_nifti(vol, path)
    else:
        raise InvalidArgumentError(f"unknown format {fmt!r}")


def read_label_volume(path, num_classes=None):
    return read_volume(path, kind="label", num_classes=num_classes)


def read_image_volume(path):
    return read_volume(path, kind="image")


__all__ = [
    "FileFormatError",
    "NonDiagonalSformWarning",
    "detect_format",
    "read_image_volume",
    "read_label_volume",
    "read_volume",
    "write_volume",
]
