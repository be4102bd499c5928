"""Volume containers and the `.dsv` on-disk format.

Layout of a block:

    8 bytes   magic "DSVVOL01"
    1 byte    dtype tag: 0 = float32, 1 = uint16
    3 x u32   little-endian dims (H, W, L)
    payload   little-endian row-major values

Round-trips are bit-exact. The same block encoding carries model parameters
inside checkpoints (see checkpoint.py), with 1- and 2-D shapes padded to
three dims.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import VolumeFormatError

MAGIC = b"DSVVOL01"
_TAG_F32 = 0
_TAG_U16 = 1
_TAG_DTYPES = {_TAG_F32: np.dtype("<f4"), _TAG_U16: np.dtype("<u2")}


@dataclass
class Volume:
    """3-D intensity grid, float32, values nominally in [0, 1]."""

    voxels: np.ndarray

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {self.voxels.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class SegVolume:
    """3-D region-label grid; integer class ids in [0, K)."""

    labels: np.ndarray

    def __post_init__(self):
        if not np.issubdtype(np.asarray(self.labels).dtype, np.integer):
            raise ValueError("segmentation labels must be integers")
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        if self.labels.ndim != 3:
            raise ValueError(f"segmentation must be 3-D, got shape {self.labels.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape


def _write_block(fh: io.BufferedIOBase, arr: np.ndarray) -> None:
    if arr.ndim != 3:
        raise ValueError("a .dsv block stores exactly three dims")
    if arr.dtype == np.float32:
        tag, disk = _TAG_F32, arr.astype("<f4", copy=False)
        if not np.isfinite(disk).all():
            raise VolumeFormatError("refusing to write non-finite float32 values")
    elif arr.dtype == np.uint16:
        tag, disk = _TAG_U16, arr.astype("<u2", copy=False)
    else:
        raise ValueError(f"unsupported block dtype {arr.dtype}")
    fh.write(MAGIC)
    fh.write(bytes([tag]))
    for d in arr.shape:
        fh.write(int(d).to_bytes(4, "little"))
    fh.write(np.ascontiguousarray(disk).tobytes())


def _read_block(fh: io.BufferedIOBase) -> np.ndarray:
    magic = fh.read(8)
    if magic != MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    tag_byte = fh.read(1)
    if len(tag_byte) != 1 or tag_byte[0] not in _TAG_DTYPES:
        raise VolumeFormatError(f"unknown dtype tag {tag_byte!r}")
    dtype = _TAG_DTYPES[tag_byte[0]]
    raw_dims = fh.read(12)
    if len(raw_dims) != 12:
        raise VolumeFormatError("truncated header")
    dims = tuple(int.from_bytes(raw_dims[i : i + 4], "little") for i in (0, 4, 8))
    if any(d <= 0 for d in dims):
        raise VolumeFormatError(f"non-positive dims {dims}")
    n_bytes = dims[0] * dims[1] * dims[2] * dtype.itemsize
    payload = fh.read(n_bytes)
    if len(payload) != n_bytes:
        raise VolumeFormatError(f"truncated payload: wanted {n_bytes} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims)


def save_volume(path, vol: Volume | SegVolume) -> None:
    with open(path, "wb") as fh:
        if isinstance(vol, Volume):
            _write_block(fh, vol.voxels)
        elif isinstance(vol, SegVolume):
            _write_block(fh, vol.labels)
        else:
            raise TypeError(f"cannot save {type(vol).__name__}")


def load_volume(path) -> Volume | SegVolume:
    with open(path, "rb") as fh:
        arr = _read_block(fh)
        trailing = fh.read(1)
    if trailing:
        raise VolumeFormatError("trailing bytes after payload")
    if arr.dtype == np.dtype("<f4"):
        return Volume(arr.astype(np.float32))
    return SegVolume(arr.astype(np.uint16))
