"""Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer.

Only scalar 3D volumes are handled. On read the sform is honoured when
``sform_code > 0``, else the qform, else an identity orientation. Data is
never reoriented.
"""
from __future__ import annotations

import gzip
import io
import os

import numpy as np

from .errors import InvalidVolume, IOFailure, MalformedHeader, Unsupported
from .volume import Kind, Volume3

HEADER_SIZE = 348
VOX_OFFSET = 352

HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]
HEADER_DTYPE = np.dtype(HEADER_FIELDS)
assert HEADER_DTYPE.itemsize == HEADER_SIZE

# NIfTI datatype code -> numpy dtype (little-endian; byte order fixed up on read)
SUPPORTED_DTYPES = {
    2: np.dtype("u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
}
KIND_TAG = b"petfuse kind="


def _open_read(path):
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise MalformedHeader(f"{path}: corrupt gzip stream") from exc
    return raw


def _parse_header(raw, path):
    if len(raw) < HEADER_SIZE:
        raise MalformedHeader(f"{path}: file shorter than a NIfTI-1 header")
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE)[0]
    if hdr["sizeof_hdr"] != HEADER_SIZE:
        swapped = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE.newbyteorder(">"))[0]
        if swapped["sizeof_hdr"] != HEADER_SIZE:
            raise MalformedHeader(f"{path}: sizeof_hdr is not 348")
        return swapped, ">"
    return hdr, "<"


def quaternion_to_matrix(b, c, d, qfac=1.0):
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 1e-7 else 0.0
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    if a == 0.0:
        # a was truncated: renormalise the rotation through its polar factor
        rot = _orthonormalize(rot)
    rot[:, 2] *= -1.0 if qfac < 0 else 1.0
    return rot


def matrix_to_quaternion(direction):
    """Return (b, c, d, qfac) for an orthonormal direction matrix."""
    r = np.array(direction, dtype=np.float64)
    qfac = 1.0
    if np.linalg.det(r) < 0:
        qfac = -1.0
        r[:, 2] *= -1.0
    # Shepperd's method on a proper rotation
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        a = 0.25 * s
        b = (r[2, 1] - r[1, 2]) / s
        c = (r[0, 2] - r[2, 0]) / s
        d = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        a = (r[2, 1] - r[1, 2]) / s
        b = 0.25 * s
        c = (r[0, 1] + r[1, 0]) / s
        d = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        a = (r[0, 2] - r[2, 0]) / s
        b = (r[0, 1] + r[1, 0]) / s
        c = 0.25 * s
        d = (r[1, 2] + r[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        a = (r[1, 0] - r[0, 1]) / s
        b = (r[0, 2] + r[2, 0]) / s
        c = (r[1, 2] + r[2, 1]) / s
        d = 0.25 * s
    if a < 0:
        b, c, d = -b, -c, -d
    return float(b), float(c), float(d), qfac


def _orthonormalize(m):
    u, _, vt = np.linalg.svd(m)
    return u @ vt


def _geometry(hdr, path):
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    spacing = tuple(float(abs(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    if hdr["sform_code"] > 0:
        rows = np.stack([hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]]).astype(np.float64)
        lin = rows[:, :3]
        norms = np.linalg.norm(lin, axis=0)
        if np.any(norms == 0):
            raise MalformedHeader(f"{path}: singular sform")
        direction = _orthonormalize(lin / norms)
        origin = tuple(float(v) for v in rows[:, 3])
    elif hdr["qform_code"] > 0:
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        direction = quaternion_to_matrix(
            float(hdr["quatern_b"]), float(hdr["quatern_c"]), float(hdr["quatern_d"]), qfac
        )
        origin = (float(hdr["qoffset_x"]), float(hdr["qoffset_y"]), float(hdr["qoffset_z"]))
    else:
        direction = np.eye(3)
        origin = (0.0, 0.0, 0.0)
    return spacing, origin, direction


def _kind_from_header(hdr, data, datatype):
    descrip = bytes(hdr["descrip"]).split(b"\x00")[0]
    if descrip.startswith(KIND_TAG):
        try:
            return Kind(descrip[len(KIND_TAG):].decode("ascii"))
        except ValueError:
            pass
    if datatype == 2 and np.all((data == 0) | (data == 1)):
        return Kind.LABEL
    return Kind.CT


def read_nifti(path, kind=None) -> Volume3:
    """Read a scalar 3D NIfTI-1 file into a :class:`Volume3`.

    ``kind`` defaults to the tag this module writes into ``descrip``; files
    without it are read as LABEL when stored as binary uint8, otherwise CT.
    """
    raw = _open_read(path)
    hdr, endian = _parse_header(raw, path)

    magic = bytes(hdr["magic"]).rstrip(b"\x00")
    if magic == b"ni1":
        raise Unsupported(f"{path}: two-file (.hdr/.img) NIfTI is not supported")
    if magic != b"n+1":
        raise MalformedHeader(f"{path}: bad magic {magic!r}")

    dim = [int(v) for v in hdr["dim"]]
    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise MalformedHeader(f"{path}: dim[0]={ndim} out of range")
    if ndim > 3:
        raise Unsupported(f"{path}: dim[0]={ndim}; only 3D volumes are supported")
    shape = tuple(dim[1 : ndim + 1]) + (1,) * (3 - ndim)
    if any(n < 1 for n in shape):
        raise MalformedHeader(f"{path}: non-positive dimension in {shape}")

    datatype = int(hdr["datatype"])
    if datatype not in SUPPORTED_DTYPES:
        raise Unsupported(f"{path}: NIfTI datatype {datatype} is not supported")
    dtype = SUPPORTED_DTYPES[datatype].newbyteorder(endian)

    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE:
        raise MalformedHeader(f"{path}: vox_offset {offset} inside the header")
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise MalformedHeader(f"{path}: truncated data block")
    arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    arr = arr.reshape(shape, order="F")

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if np.isfinite(slope) and slope != 0 and (slope != 1 or inter != 0):
        data = (arr.astype(np.float64) * slope + inter).astype(np.float32)
    else:
        data = arr.astype(np.float32)

    spacing, origin, direction = _geometry(hdr, path)
    if kind is None:
        kind = _kind_from_header(hdr, data, datatype)
    return Volume3(data, spacing=spacing, origin=origin, direction=direction, kind=kind)


def build_header(vol: Volume3) -> np.ndarray:
    hdr = np.zeros((), dtype=HEADER_DTYPE)
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *vol.dims, 1, 1, 1, 1]
    if vol.kind is Kind.LABEL:
        hdr["datatype"], hdr["bitpix"] = 2, 8
    else:
        hdr["datatype"], hdr["bitpix"] = 16, 32

    b, c, d, qfac = matrix_to_quaternion(vol.direction)
    hdr["pixdim"] = [qfac, *vol.spacing, 1, 1, 1, 1]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["descrip"] = KIND_TAG + vol.kind.value.encode("ascii")
    hdr["qform_code"] = 1
    hdr["sform_code"] = 1
    hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"] = b, c, d
    hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = vol.origin
    aff = vol.affine
    hdr["srow_x"] = aff[0]
    hdr["srow_y"] = aff[1]
    hdr["srow_z"] = aff[2]
    hdr["magic"] = b"n+1\x00"
    return hdr


def encode_nifti(vol: Volume3) -> bytes:
    """Uncompressed NIfTI-1 bytes for ``vol``."""
    hdr = build_header(vol)
    dtype = np.dtype("u1") if vol.kind is Kind.LABEL else np.dtype("<f4")
    buf = io.BytesIO()
    buf.write(hdr.tobytes())
    buf.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
    buf.write(np.asarray(vol.data, dtype=dtype).tobytes(order="F"))
    return buf.getvalue()


def write_nifti(vol: Volume3, path) -> None:
    """Write ``vol``; gzip-compressed when ``path`` ends in ``.gz``.

    Output bytes are a pure function of the volume (gzip mtime is pinned).
    """
    if not isinstance(vol, Volume3):
        raise InvalidVolume(f"expected Volume3, got {type(vol).__name__}")
    vol.validate()
    path = os.fspath(path)
    payload = encode_nifti(vol)
    if path.endswith(".gz"):
        payload = gzip.compress(payload, compresslevel=6, mtime=0)
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
