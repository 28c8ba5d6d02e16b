"""Single-file NIfTI-1 (``.nii`` / ``.nii.gz``) reader and writer.

Only axis-aligned volumes are supported: the affine is reduced to voxel
spacing, and a rotated qform/sform is rejected. Data is stored x-fastest, so
a C-ordered ``[z, y, x]`` array maps to NIfTI ``dim = (x, y, z)`` without a
transpose. Supported datatypes: uint8, int16, float32.
"""

from __future__ import annotations

import contextlib
import gzip
import struct
from pathlib import Path

import numpy as np

from .volume import NUM_CLASSES, CtVolume, LabelVolume, VolumeMeta

HEADER_SIZE = 348
DEFAULT_VOX_OFFSET = 352

DT_UINT8, DT_INT16, DT_FLOAT32 = 2, 4, 16
_DTYPES = {DT_UINT8: np.dtype(np.uint8), DT_INT16: np.dtype(np.int16), DT_FLOAT32: np.dtype(np.float32)}
_CODES = {v: k for k, v in _DTYPES.items()}

# (name, struct format) in header order; totals 348 bytes
_FIELDS = [
    ("sizeof_hdr", "i"),
    ("data_type", "10s"),
    ("db_name", "18s"),
    ("extents", "i"),
    ("session_error", "h"),
    ("regular", "c"),
    ("dim_info", "B"),
    ("dim", "8h"),
    ("intent_p1", "f"),
    ("intent_p2", "f"),
    ("intent_p3", "f"),
    ("intent_code", "h"),
    ("datatype", "h"),
    ("bitpix", "h"),
    ("slice_start", "h"),
    ("pixdim", "8f"),
    ("vox_offset", "f"),
    ("scl_slope", "f"),
    ("scl_inter", "f"),
    ("slice_end", "h"),
    ("slice_code", "B"),
    ("xyzt_units", "B"),
    ("cal_max", "f"),
    ("cal_min", "f"),
    ("slice_duration", "f"),
    ("toffset", "f"),
    ("glmax", "i"),
    ("glmin", "i"),
    ("descrip", "80s"),
    ("aux_file", "24s"),
    ("qform_code", "h"),
    ("sform_code", "h"),
    ("quatern_b", "f"),
    ("quatern_c", "f"),
    ("quatern_d", "f"),
    ("qoffset_x", "f"),
    ("qoffset_y", "f"),
    ("qoffset_z", "f"),
    ("srow_x", "4f"),
    ("srow_y", "4f"),
    ("srow_z", "4f"),
    ("intent_name", "16s"),
    ("magic", "4s"),
]
_FORMAT = "".join(f for _, f in _FIELDS)
assert struct.calcsize("<" + _FORMAT) == HEADER_SIZE


class NiftiError(ValueError):
    """Base class for NIfTI parsing errors."""


class BadMagicError(NiftiError):
    pass


class UnsupportedFormatError(NiftiError):
    """Valid NIfTI but not a form this reader handles (two-file pair, NIfTI-2, rotated affine)."""


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedPayloadError(NiftiError):
    pass


class InvalidSpacingError(NiftiError):
    pass


@contextlib.contextmanager
def _open(path: Path, mode: str):
    with open(path, mode) as raw:
        if path.suffix == ".gz":
            # fixed mtime and empty name keep compressed output byte-reproducible
            with gzip.GzipFile(filename="", mode=mode, fileobj=raw, mtime=0) as gz:
                yield gz
        else:
            yield raw


def _unpack(raw: bytes, endian: str) -> dict:
    values = struct.unpack(endian + _FORMAT, raw)
    out, i = {}, 0
    for name, fmt in _FIELDS:
        n = int(fmt[:-1]) if fmt[:-1].isdigit() and fmt[-1] != "s" else 1
        if n == 1:
            out[name] = values[i]
        else:
            out[name] = values[i : i + n]
        i += n
    return out


def read_header(raw: bytes) -> tuple[dict, str]:
    """Parse the 348-byte header; returns ``(fields, endian)``."""
    if len(raw) < HEADER_SIZE:
        raise TruncatedPayloadError(f"header is {len(raw)} bytes, expected {HEADER_SIZE}")
    raw = raw[:HEADER_SIZE]
    for endian in ("<", ">"):
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        if struct.unpack("<i", raw[:4])[0] == 540:
            raise UnsupportedFormatError("NIfTI-2 headers are not supported")
        raise BadMagicError("sizeof_hdr is not 348: not a NIfTI-1 file")
    hdr = _unpack(raw, endian)
    magic = hdr["magic"]
    if magic == b"ni1\x00":
        raise UnsupportedFormatError("two-file NIfTI (.hdr/.img) is not supported")
    if magic != b"n+1\x00":
        raise BadMagicError(f"bad magic {magic!r}")
    return hdr, endian


def _check_axis_aligned(hdr: dict) -> None:
    if hdr["sform_code"] > 0:
        rows = np.array([hdr["srow_x"][:3], hdr["srow_y"][:3], hdr["srow_z"][:3]], dtype=np.float64)
        off = rows - np.diag(np.diag(rows))
        if np.abs(off).max() > 1e-6 * max(np.abs(rows).max(), 1.0):
            raise UnsupportedFormatError("sform is not axis-aligned")
    elif hdr["qform_code"] > 0:
        b, c, d = hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"]
        # allowed: identity, or 180-degree flips about one axis
        nonzero = sum(abs(q) > 1e-6 for q in (b, c, d))
        if nonzero > 1 or (nonzero == 1 and max(abs(b), abs(c), abs(d)) < 1 - 1e-6):
            raise UnsupportedFormatError("qform rotation is not axis-aligned")


def read_nifti(path, kind: str | None = None) -> CtVolume | LabelVolume:
    """Read a single-file NIfTI-1 volume.

    Args:
        path: ``.nii`` or ``.nii.gz`` file.
        kind: ``"label"`` or ``"image"``; by default uint8 data is read as a
            label volume and anything else as an image.
    """
    path = Path(path)
    with _open(path, "rb") as fh:
        blob = fh.read()
    hdr, endian = read_header(blob)
    ndim = hdr["dim"][0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"invalid dim[0] = {ndim}")
    extents = [int(n) for n in hdr["dim"][1 : ndim + 1]]
    if ndim > 3:
        if any(n != 1 for n in extents[3:]):
            raise UnsupportedFormatError(f"only 3-D volumes are supported, dims {extents}")
        extents = extents[:3]
    extents += [1] * (3 - len(extents))
    if any(n < 1 for n in extents):
        raise NiftiError(f"non-positive extent in {extents}")
    code = hdr["datatype"]
    if code not in _DTYPES:
        raise UnsupportedDatatypeError(f"datatype code {code} is not supported (uint8, int16, float32 only)")
    dtype = _DTYPES[code].newbyteorder(endian)
    spacing_xyz = [float(abs(p)) for p in hdr["pixdim"][1:4]]
    if any(not (s > 0) or not np.isfinite(s) for s in spacing_xyz):
        raise InvalidSpacingError(f"pixdim must be positive, got {hdr['pixdim'][1:4]}")
    _check_axis_aligned(hdr)

    offset = int(hdr["vox_offset"])
    nx, ny, nz = extents
    nbytes = nx * ny * nz * dtype.itemsize
    if len(blob) < offset + nbytes:
        raise TruncatedPayloadError(f"payload has {len(blob) - offset} bytes, expected {nbytes}")
    data = np.frombuffer(blob, dtype=dtype, count=nx * ny * nz, offset=offset)
    data = data.astype(dtype.newbyteorder("="), copy=True).reshape(nz, ny, nx)

    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if np.isfinite(slope) and slope != 0.0 and (slope != 1.0 or inter != 0.0):
        data = data.astype(np.float32) * np.float32(slope) + np.float32(inter)

    meta = VolumeMeta((nz, ny, nx), (spacing_xyz[2], spacing_xyz[1], spacing_xyz[0]))
    if kind is None:
        kind = "label" if data.dtype == np.uint8 else "image"
    if kind == "label":
        if data.dtype != np.uint8:
            raise UnsupportedDatatypeError(f"label volumes must be uint8, got {data.dtype}")
        return LabelVolume(meta, data, num_classes=max(int(data.max(initial=0)) + 1, NUM_CLASSES))
    if kind == "image":
        return CtVolume(meta, data)
    raise ValueError(f"kind must be 'label' or 'image', got {kind!r}")


def build_header(meta: VolumeMeta, dtype: np.dtype, description: str = "") -> bytes:
    dtype = np.dtype(dtype)
    if dtype not in _CODES:
        raise UnsupportedDatatypeError(f"cannot write dtype {dtype}")
    nz, ny, nx = meta.dims
    sz, sy, sx = meta.spacing_mm
    units = 2 | 8  # mm, seconds
    hdr = {name: 0 for name, _ in _FIELDS}
    hdr.update(
        sizeof_hdr=HEADER_SIZE,
        data_type=b"",
        db_name=b"",
        regular=b"r",
        dim=(3, nx, ny, nz, 1, 1, 1, 1),
        intent_p1=0.0,
        intent_p2=0.0,
        intent_p3=0.0,
        datatype=_CODES[dtype],
        bitpix=dtype.itemsize * 8,
        pixdim=(1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0),
        vox_offset=float(DEFAULT_VOX_OFFSET),
        scl_slope=0.0,
        scl_inter=0.0,
        xyzt_units=units,
        descrip=description.encode("ascii", "replace")[:79],
        aux_file=b"",
        qform_code=0,
        sform_code=1,
        srow_x=(sx, 0.0, 0.0, 0.0),
        srow_y=(0.0, sy, 0.0, 0.0),
        srow_z=(0.0, 0.0, sz, 0.0),
        intent_name=b"",
        magic=b"n+1\x00",
    )
    flat = []
    for name, fmt in _FIELDS:
        v = hdr[name]
        if isinstance(v, tuple):
            flat.extend(v)
        elif name in ("quatern_b", "quatern_c", "quatern_d", "qoffset_x", "qoffset_y", "qoffset_z") or fmt == "f":
            flat.append(float(v))
        else:
            flat.append(v)
    return struct.pack("<" + _FORMAT, *flat)


def write_nifti(vol: CtVolume | LabelVolume, path) -> None:
    """Write ``vol`` as little-endian single-file NIfTI-1; ``.gz`` suffix compresses."""
    path = Path(path)
    data = np.ascontiguousarray(vol.data)
    if data.dtype not in _CODES:
        raise UnsupportedDatatypeError(f"cannot write dtype {data.dtype}")
    header = build_header(vol.meta, data.dtype)
    payload = data.astype(data.dtype.newbyteorder("<"), copy=False).tobytes()
    with _open(path, "wb") as fh:
        # 4-byte extension flag (no extensions) pads the header to vox_offset
        fh.write(header + b"\x00" * (DEFAULT_VOX_OFFSET - HEADER_SIZE) + payload)
