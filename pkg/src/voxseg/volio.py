"""NIfTI-1 volume I/O.

Reads and writes single-file ``.nii`` / ``.nii.gz`` volumes (plus the
``.hdr``/``.img`` pair layout on read) directly from the 348-byte binary
header, with no third-party imaging dependency. Only 3D scalar volumes are
supported; a singleton 4th dimension is squeezed away.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DimMismatch,
    LabelOutOfRange,
    TruncatedFile,
    UnsupportedDatatype,
)

HEADER_SIZE = 348

# struct layout of the nifti_1_header, no padding
_HDR_FMT = (
    "i"     # sizeof_hdr
    "10s"   # data_type (unused)
    "18s"   # db_name (unused)
    "i"     # extents
    "h"     # session_error
    "b"     # regular
    "B"     # dim_info
    "8h"    # dim
    "3f"    # intent_p1..3
    "h"     # intent_code
    "h"     # datatype
    "h"     # bitpix
    "h"     # slice_start
    "8f"    # pixdim
    "f"     # vox_offset
    "f"     # scl_slope
    "f"     # scl_inter
    "h"     # slice_end
    "b"     # slice_code
    "b"     # xyzt_units
    "f"     # cal_max
    "f"     # cal_min
    "f"     # slice_duration
    "f"     # toffset
    "i"     # glmax
    "i"     # glmin
    "80s"   # descrip
    "24s"   # aux_file
    "h"     # qform_code
    "h"     # sform_code
    "3f"    # quatern_b, c, d
    "3f"    # qoffset_x, y, z
    "4f"    # srow_x
    "4f"    # srow_y
    "4f"    # srow_z
    "16s"   # intent_name
    "4s"    # magic
)

_DT_UINT8 = 2
_DT_INT16 = 4
_DT_INT32 = 8
_DT_FLOAT32 = 16
_DT_FLOAT64 = 64

_DTYPES = {
    _DT_UINT8: np.dtype(np.uint8),
    _DT_INT16: np.dtype(np.int16),
    _DT_INT32: np.dtype(np.int32),
    _DT_FLOAT32: np.dtype(np.float32),
    _DT_FLOAT64: np.dtype(np.float64),
}


class VolumeKind(Enum):
    INTENSITY = "intensity"
    LABEL = "label"


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid with physical geometry.

    ``data`` is indexed ``[i0, i1, i2]`` and the affine maps homogeneous
    voxel indices ``(i0, i1, i2, 1)`` to world millimetres.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    affine: np.ndarray
    kind: VolumeKind = VolumeKind.INTENSITY

    def __post_init__(self):
        data = np.ascontiguousarray(self.data)
        if data.ndim != 3:
            raise DimMismatch(f"expected 3D data, got ndim={data.ndim}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        object.__setattr__(self, "data", data)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise DimMismatch(f"spacing must be 3 positive reals, got {spacing}")
        object.__setattr__(self, "spacing", spacing)
        affine = np.asarray(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise DimMismatch("affine must be 4x4")
        if not np.array_equal(affine[3], [0.0, 0.0, 0.0, 1.0]):
            raise DimMismatch("affine last row must be (0,0,0,1)")
        object.__setattr__(self, "affine", affine)
        if self.kind is VolumeKind.LABEL:
            _check_label_values(data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, kind: VolumeKind | None = None) -> "Volume":
        """New volume on the same grid with replaced voxel values."""
        return Volume(data, self.spacing, self.affine, kind or self.kind)

    def same_grid(self, other: "Volume", tol: float = 1e-5) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=tol)
            and np.allclose(self.affine, other.affine, rtol=tol, atol=tol)
        )


def _check_label_values(data: np.ndarray):
    if data.size == 0:
        return
    mn = float(data.min())
    if mn < 0:
        raise LabelOutOfRange(f"negative label value {mn}")
    if not np.array_equal(data, np.rint(data)):
        raise LabelOutOfRange("non-integer label values")


@dataclass
class NiftiHeader:
    datatype: int
    dim: list[int]
    pixdim: list[float]
    scl_slope: float
    scl_inter: float
    vox_offset: int
    qform_code: int
    sform_code: int
    quatern: tuple[float, float, float]
    qoffset: tuple[float, float, float]
    srows: np.ndarray  # 3x4
    magic: bytes
    byteorder: str = "<"
    descrip: bytes = b""
    extra: dict = field(default_factory=dict)


def _open_maybe_gz(path: Path, mode: str):
    if mode == "rb":
        with open(path, "rb") as fh:
            head = fh.read(2)
        if head == b"\x1f\x8b":
            return gzip.open(path, "rb")
        return open(path, "rb")
    if str(path).endswith(".gz"):
        return gzip.open(path, "wb")
    return open(path, "wb")


def parse_header(raw: bytes) -> NiftiHeader:
    """Decode a 348-byte NIfTI-1 header, detecting byte order via sizeof_hdr."""
    if len(raw) < HEADER_SIZE:
        raise TruncatedFile(f"header is {len(raw)} bytes, expected {HEADER_SIZE}")
    byteorder = None
    for candidate in ("<", ">"):
        if struct.unpack_from(candidate + "i", raw)[0] == HEADER_SIZE:
            byteorder = candidate
            break
    if byteorder is None:
        raise BadMagic("sizeof_hdr is not 348 under either byte order")
    fields = struct.unpack_from(byteorder + _HDR_FMT, raw)
    magic = fields[-1]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise BadMagic(f"bad magic {magic!r}")
    dim = list(fields[7:15])
    pixdim = list(fields[22:30])
    return NiftiHeader(
        datatype=fields[19],
        dim=dim,
        pixdim=pixdim,
        scl_slope=fields[31],
        scl_inter=fields[32],
        vox_offset=int(fields[30]),
        qform_code=fields[44],
        sform_code=fields[45],
        quatern=fields[46:49],
        qoffset=fields[49:52],
        srows=np.array([fields[52:56], fields[56:60], fields[60:64]], dtype=np.float64),
        magic=magic,
        byteorder=byteorder,
        descrip=fields[42],
    )


def _squeeze_dims(dim: list[int]) -> tuple[int, int, int]:
    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise DimMismatch(f"dim[0]={ndim} out of range")
    sizes = [max(1, d) for d in dim[1 : 1 + ndim]]
    if ndim > 3:
        if any(d != 1 for d in sizes[3:]):
            raise DimMismatch(f"non-singleton trailing dims: {sizes}")
        sizes = sizes[:3]
    while len(sizes) < 3:
        sizes.append(1)
    return tuple(sizes)


def _qform_affine(hdr: NiftiHeader) -> np.ndarray:
    b, c, d = hdr.quatern
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if hdr.pixdim[0] < 0 else 1.0
    scale = np.array([abs(hdr.pixdim[1]), abs(hdr.pixdim[2]), qfac * abs(hdr.pixdim[3])])
    affine = np.eye(4)
    affine[:3, :3] = rot * scale
    affine[:3, 3] = hdr.qoffset
    return affine


def _header_affine(hdr: NiftiHeader) -> np.ndarray:
    if hdr.sform_code > 0:
        affine = np.eye(4)
        affine[:3, :] = hdr.srows
        return affine
    if hdr.qform_code > 0:
        return _qform_affine(hdr)
    affine = np.diag([abs(hdr.pixdim[1]) or 1.0, abs(hdr.pixdim[2]) or 1.0, abs(hdr.pixdim[3]) or 1.0, 1.0])
    return affine


def read_volume(path, kind: VolumeKind = VolumeKind.INTENSITY) -> Volume:
    """Read a NIfTI-1 volume from ``path`` (.nii, .nii.gz or .hdr/.img pair)."""
    path = Path(path)
    with _open_maybe_gz(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
        hdr = parse_header(raw)
        if hdr.datatype not in _DTYPES:
            raise UnsupportedDatatype(f"datatype code {hdr.datatype}")
        dims = _squeeze_dims(hdr.dim)
        dtype = _DTYPES[hdr.datatype].newbyteorder(hdr.byteorder)
        nbytes = int(np.prod(dims)) * dtype.itemsize
        if hdr.magic == b"n+1\x00":
            skip = hdr.vox_offset - HEADER_SIZE
            if skip < 0:
                raise TruncatedFile(f"vox_offset {hdr.vox_offset} before end of header")
            fh.read(skip)
            payload = fh.read(nbytes)
        else:
            img_path = path.with_suffix(".img")
            with _open_maybe_gz(img_path, "rb") as img:
                payload = img.read(nbytes)
    if len(payload) < nbytes:
        raise TruncatedFile(f"expected {nbytes} data bytes, got {len(payload)}")

    arr = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    arr = arr.astype(dtype.newbyteorder("="), copy=False)
    if hdr.scl_slope not in (0.0, 1.0) or (hdr.scl_slope == 1.0 and hdr.scl_inter != 0.0):
        arr = arr.astype(np.float64) * hdr.scl_slope + hdr.scl_inter
        arr = arr.astype(np.float32)
    elif np.issubdtype(arr.dtype, np.integer):
        # int32 may exceed float32's exact-integer range
        arr = arr.astype(np.float64 if arr.dtype.itemsize >= 4 else np.float32)

    spacing = tuple(abs(p) if p != 0 else 1.0 for p in hdr.pixdim[1:4])
    return Volume(np.ascontiguousarray(arr), spacing, _header_affine(hdr), kind)


def _choose_label_dtype(data: np.ndarray) -> tuple[int, np.dtype]:
    mx = float(data.max()) if data.size else 0.0
    if mx > 32767:
        raise LabelOutOfRange(f"label value {mx} exceeds int16 range")
    if mx < 256:
        return _DT_UINT8, np.dtype(np.uint8)
    return _DT_INT16, np.dtype(np.int16)


def write_volume(v: Volume, path) -> None:
    """Write ``v`` as a single-file NIfTI-1 volume (gzipped when path ends in .gz)."""
    path = Path(path)
    if v.kind is VolumeKind.LABEL:
        _check_label_values(v.data)
        code, dtype = _choose_label_dtype(v.data)
    else:
        code, dtype = _DT_FLOAT32, np.dtype(np.float32)
    payload = np.asfortranarray(v.data.astype(dtype)).tobytes(order="F")

    dim = [3, *v.dims, 1, 1, 1, 1]
    pixdim = [1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0]
    srows = v.affine[:3, :].astype(np.float32)
    hdr = struct.pack(
        "<" + _HDR_FMT,
        HEADER_SIZE,
        b"", b"", 0, 0, 0, 0,
        *dim,
        0.0, 0.0, 0.0,
        0,
        code,
        dtype.itemsize * 8,
        0,
        *pixdim,
        352.0,
        1.0,  # scl_slope
        0.0,  # scl_inter
        0, 0, 0,
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        b"voxseg", b"",
        0,  # qform_code
        1,  # sform_code
        0.0, 0.0, 0.0,
        0.0, 0.0, 0.0,
        *srows[0], *srows[1], *srows[2],
        b"",
        b"n+1\x00",
    )
    assert len(hdr) == HEADER_SIZE
    with _open_maybe_gz(path, "wb") as fh:
        fh.write(hdr)
        fh.write(b"\x00" * 4)  # no extensions; vox_offset 352
        fh.write(payload)
