"""Volumes with spacing metadata, NIfTI-1 reading/writing and PGM slice export.

Arrays are held in (D, H, W) order, W varying fastest.  On disk NIfTI
``dim[1]`` (fastest) maps to W and ``dim[3]`` to D, so spacing is stored
internally as ``(pixdim[3], pixdim[2], pixdim[1])``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

NUM_CLASSES = 10
CLASS_NAMES = ("background", "I", "II", "III", "IVa", "IVb", "V", "VI", "VII", "VIII")

HEADER_SIZE = 348
VOX_OFFSET = 352
INTENT_LABEL = 1002

# NIfTI-1 datatype code -> numpy dtype (byte order applied at read time)
DATATYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
}


class NiftiError(ValueError):
    pass


class TruncatedFile(NiftiError):
    pass


class BadMagic(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class UnsupportedDimensionality(UnsupportedDatatype):
    pass


class NonPositiveSpacing(NiftiError):
    pass


class IndexOutOfRange(IndexError):
    pass


def _check_geometry(dims, spacing):
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise ValueError(f"dims must be three positive extents, got {dims}")
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise NonPositiveSpacing(f"spacing must be finite and > 0, got {spacing}")


@dataclass(frozen=True, eq=False)
class ImageVolume:
    """Scalar 3D grid; ``data`` is a read-only float32 array of shape (D, H, W)."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim != 3:
            raise ValueError(f"image data must be 3D, got shape {arr.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        _check_geometry(arr.shape, spacing)
        if not np.all(np.isfinite(arr)):
            raise ValueError("image data contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self):
        return self.data.shape

    def with_data(self, data, spacing=None):
        return ImageVolume(data, self.spacing if spacing is None else spacing, self.origin)

    def __eq__(self, other):
        return (
            type(other) is ImageVolume
            and self.dims == other.dims
            and self.spacing == other.spacing
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Class-ID grid (uint8, values 0..9) with the same geometry fields as ImageVolume."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {raw.shape}")
        if raw.size and (raw.min() < 0 or raw.max() >= NUM_CLASSES):
            raise ValueError(f"label values must lie in 0..{NUM_CLASSES - 1}")
        if np.issubdtype(raw.dtype, np.floating) and not np.all(raw == np.round(raw)):
            raise ValueError("label values must be integral")
        arr = raw.astype(np.uint8, copy=True)
        spacing = tuple(float(s) for s in self.spacing)
        _check_geometry(arr.shape, spacing)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self):
        return self.data.shape

    def with_data(self, data, spacing=None):
        return LabelVolume(data, self.spacing if spacing is None else spacing, self.origin)

    def classes(self):
        return set(int(c) for c in np.unique(self.data))

    def __eq__(self, other):
        return (
            type(other) is LabelVolume
            and self.dims == other.dims
            and self.spacing == other.spacing
            and np.array_equal(self.data, other.data)
        )


@dataclass
class NiftiHeader:
    sizeof_hdr: int
    dim: tuple
    datatype: int
    bitpix: int
    pixdim: tuple
    vox_offset: float
    scl_slope: float
    scl_inter: float
    magic: bytes
    intent_code: int = 0
    qoffset: tuple = (0.0, 0.0, 0.0)
    endian: str = field(default="<", repr=False)


def parse_header(buf: bytes) -> NiftiHeader:
    if len(buf) < HEADER_SIZE:
        raise TruncatedFile(f"need {HEADER_SIZE} header bytes, got {len(buf)}")
    for endian in "<>":
        if struct.unpack_from(endian + "i", buf, 0)[0] == HEADER_SIZE:
            break
    else:
        raise BadMagic("sizeof_hdr is not 348 in either byte order")
    magic = bytes(buf[344:348])
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise BadMagic(f"unrecognised magic {magic!r}")
    dim = struct.unpack_from(endian + "8h", buf, 40)
    intent_code, datatype, bitpix = struct.unpack_from(endian + "3h", buf, 68)
    pixdim = struct.unpack_from(endian + "8f", buf, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(endian + "3f", buf, 108)
    qoffset = struct.unpack_from(endian + "3f", buf, 268)
    return NiftiHeader(
        sizeof_hdr=HEADER_SIZE,
        dim=dim,
        datatype=datatype,
        bitpix=bitpix,
        pixdim=pixdim,
        vox_offset=vox_offset,
        scl_slope=scl_slope,
        scl_inter=scl_inter,
        magic=magic,
        intent_code=intent_code,
        qoffset=qoffset,
        endian=endian,
    )


def read_nifti(buf: bytes, kind: str | None = None):
    """Decode a single-file NIfTI-1 byte string into an ImageVolume or LabelVolume.

    ``kind`` forces ``"image"`` or ``"labels"``; by default files carrying the
    NIfTI label intent decode as labels and everything else as an image.
    """
    buf = bytes(buf)
    hdr = parse_header(buf)
    if hdr.datatype not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {hdr.datatype} not supported")
    if hdr.dim[0] != 3:
        raise UnsupportedDimensionality(f"only 3D volumes are supported, dim[0]={hdr.dim[0]}")
    nx, ny, nz = hdr.dim[1:4]
    if min(nx, ny, nz) < 1:
        raise UnsupportedDimensionality(f"non-positive extent in dim {hdr.dim[1:4]}")
    spacing = (hdr.pixdim[3], hdr.pixdim[2], hdr.pixdim[1])
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise NonPositiveSpacing(f"pixdim[1..3] must be > 0, got {hdr.pixdim[1:4]}")
    if hdr.magic == b"ni1\x00":
        # paired .hdr/.img: caller passes header followed by image bytes
        offset = HEADER_SIZE
    else:
        if not np.isfinite(hdr.vox_offset) or hdr.vox_offset < HEADER_SIZE:
            raise TruncatedFile(f"invalid vox_offset {hdr.vox_offset}")
        offset = int(hdr.vox_offset)
    dtype = np.dtype(DATATYPES[hdr.datatype]).newbyteorder(hdr.endian)
    count = int(nx) * int(ny) * int(nz)
    need = offset + count * dtype.itemsize
    if len(buf) < need:
        raise TruncatedFile(f"header promises {need} bytes, file has {len(buf)}")
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    arr = raw.reshape(nz, ny, nx).astype(dtype.newbyteorder("="))
    slope, inter = hdr.scl_slope, hdr.scl_inter
    scaled = np.isfinite(slope) and slope != 0 and not (slope == 1 and inter == 0)
    if scaled:
        arr = arr.astype(np.float64) * slope + (inter if np.isfinite(inter) else 0.0)
    origin = tuple(float(o) for o in reversed(hdr.qoffset))
    if kind is None:
        kind = "labels" if hdr.intent_code == INTENT_LABEL else "image"
    if kind == "labels":
        return LabelVolume(arr, spacing, origin)
    if kind != "image":
        raise ValueError(f"kind must be 'image' or 'labels', got {kind!r}")
    if not np.all(np.isfinite(arr)):
        raise NiftiError("image data contains NaN or Inf")
    return ImageVolume(arr, spacing, origin)


def write_nifti(volume) -> bytes:
    """Encode as single-file NIfTI-1: float32 images, uint8 labels, data at byte 352."""
    if isinstance(volume, LabelVolume):
        datatype, body, intent = 2, volume.data.astype("<u1"), INTENT_LABEL
    elif isinstance(volume, ImageVolume):
        datatype, body, intent = 16, volume.data.astype("<f4"), 0
    else:
        raise TypeError(f"expected ImageVolume or LabelVolume, got {type(volume).__name__}")
    d, h, w = volume.dims
    sz, sy, sx = volume.spacing
    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, w, h, d, 1, 1, 1, 1)
    struct.pack_into("<3h", hdr, 68, intent, datatype, body.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 0.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<h", hdr, 252, 1)  # qform_code: scanner
    oz, oy, ox = volume.origin
    struct.pack_into("<3f", hdr, 268, ox, oy, oz)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr) + body.tobytes(order="C")


def load(path, kind=None):
    with open(path, "rb") as fh:
        return read_nifti(fh.read(), kind=kind)


def save(volume, path):
    with open(path, "wb") as fh:
        fh.write(write_nifti(volume))


_AXES = {"axial": 0, "coronal": 1, "sagittal": 2}


def slice_pixels(volume, axis: str, index: int) -> np.ndarray:
    """Min-max scale one slice to uint8; constant slices map to 0."""
    if axis not in _AXES:
        raise ValueError(f"axis must be one of {sorted(_AXES)}, got {axis!r}")
    ax = _AXES[axis]
    extent = volume.dims[ax]
    if not 0 <= index < extent:
        raise IndexOutOfRange(f"index {index} outside 0..{extent - 1} along {axis}")
    plane = np.take(np.asarray(volume.data, dtype=np.float64), index, axis=ax)
    lo, hi = plane.min(), plane.max()
    if hi == lo:
        return np.zeros(plane.shape, dtype=np.uint8)
    return np.round((plane - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_slice(volume, axis: str, index: int) -> bytes:
    """Binary PGM (P5) of one slice; rows are the first remaining array axis."""
    pix = slice_pixels(volume, axis, index)
    rows, cols = pix.shape
    return b"P5\n%d %d\n255\n" % (cols, rows) + pix.tobytes()
