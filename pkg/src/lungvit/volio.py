"""Binary volume file: "RVL1", u16 version, u8 dtype, u32 x3 extents, f32 spacing, payload.

The payload is little-endian with x varying fastest: index = x + X*(y + Y*z).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"RVL1"
VERSION = 1
_HEADER = struct.Struct("<4sHB3If")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


class VolumeFileError(ValueError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing: float = 1.0
    domain: str = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def _dtype_code(data: np.ndarray) -> int:
    if data.dtype == np.uint8 or data.dtype == np.bool_:
        return 1
    if np.issubdtype(data.dtype, np.floating):
        return 0
    raise VolumeFileError(f"unsupported volume dtype {data.dtype}")


def encode_volume(data: np.ndarray, spacing: float = 1.0) -> bytes:
    data = np.asarray(data)
    if data.ndim != 3:
        raise VolumeFileError(f"volumes must be 3D, got shape {data.shape}")
    code = _dtype_code(data)
    payload = data.astype(_DTYPES[code]).ravel(order="F").tobytes()
    return _HEADER.pack(MAGIC, VERSION, code, *data.shape, spacing) + payload


def decode_volume(buf: bytes, expect_dtype: int | None = None, source: str = "<bytes>") -> Volume:
    if len(buf) < _HEADER.size:
        raise VolumeFileError(f"{source}: truncated header ({len(buf)} bytes)")
    magic, version, code, x, y, z, spacing = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise VolumeFileError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise VolumeFileError(f"{source}: unsupported version {version}")
    if code not in _DTYPES:
        raise VolumeFileError(f"{source}: unknown dtype code {code}")
    if expect_dtype is not None and code != expect_dtype:
        raise VolumeFileError(f"{source}: dtype code {code}, expected {expect_dtype}")
    dt = _DTYPES[code]
    need = x * y * z * dt.itemsize
    have = len(buf) - _HEADER.size
    if have < need:
        raise VolumeFileError(f"{source}: truncated payload ({have} of {need} bytes)")
    if have > need:
        raise VolumeFileError(f"{source}: {have - need} trailing bytes after payload")
    flat = np.frombuffer(buf, dtype=dt, offset=_HEADER.size, count=x * y * z)
    data = flat.reshape((x, y, z), order="F").astype(dt.newbyteorder("="), order="C")
    return Volume(data, float(spacing))


def write_volume(path, volume, spacing: float | None = None) -> None:
    if isinstance(volume, Volume):
        data, sp = volume.data, volume.spacing
    else:
        data, sp = volume, 1.0
    if spacing is not None:
        sp = spacing
    path = Path(path)
    try:
        path.write_bytes(encode_volume(data, sp))
    except OSError as err:
        raise OSError(f"cannot write volume {path}: {err}") from err


def read_volume(path, expect_dtype: int | None = None) -> Volume:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as err:
        raise OSError(f"cannot read volume {path}: {err}") from err
    return decode_volume(buf, expect_dtype, str(path))
