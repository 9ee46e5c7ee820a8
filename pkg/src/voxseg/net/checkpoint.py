"""Binary checkpoint container.

Layout (little-endian): magic ``NNL1``, uint32 record count, then per
tensor: uint16 name length, name bytes (utf-8), uint8 dtype tag (0 =
float32), uint8 rank, uint32 dims, raw float32 data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import BadMagic, CorruptRecord

MAGIC = b"NNL1"
_TAG_F32 = 0


def save_checkpoint(tensors: dict[str, np.ndarray], path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors.items():
            arr = np.ascontiguousarray(tensor, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _TAG_F32, arr.ndim))
            fh.write(struct.pack(f"<{max(arr.ndim, 0)}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CorruptRecord(f"truncated while reading {what}")
    return buf


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise BadMagic(f"{path} is not a NNL1 checkpoint")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "record count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            tag, rank = struct.unpack("<BB", _read_exact(fh, 2, "dtype/rank"))
            if tag != _TAG_F32:
                raise CorruptRecord(f"unknown dtype tag {tag} in record {name!r}")
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            nbytes = int(np.prod(shape)) * 4 if rank else 4
            raw = _read_exact(fh, nbytes, f"data of {name!r}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape if rank else ())
            tensors[name] = arr.astype(np.float32)
    return tensors
