"""Versioned checkpoint container.

Layout:

    8 bytes   magic "DSVCKPT1"
    u32 LE    length of the JSON header
    JSON      {"format": 1, "config": {...}, "extra": {...},
               "params": [{"name": ..., "shape": [...]}, ...]}
    blocks    one `.dsv` float32 block per parameter, in header order,
              shapes padded to three dims (true shape lives in the header)

Round-trips are bitwise: float32 payloads are written verbatim.
"""

from __future__ import annotations

import json
from collections import OrderedDict

import numpy as np

from .errors import CheckpointFormatError, VolumeFormatError
from .volio import _read_block, _write_block

MAGIC = b"DSVCKPT1"
FORMAT = 1


def _pad3(shape: tuple) -> tuple[int, int, int]:
    if len(shape) > 3:
        raise CheckpointFormatError(f"cannot store {len(shape)}-d parameter")
    return (1,) * (3 - len(shape)) + tuple(int(s) for s in shape)


def save_checkpoint(path, config: dict, named_arrays: "OrderedDict[str, np.ndarray]",
                    extra: dict | None = None) -> None:
    entries = []
    blocks = []
    for name, arr in named_arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        entries.append({"name": name, "shape": list(arr.shape)})
        blocks.append(arr.reshape(_pad3(arr.shape)))
    header = {
        "format": FORMAT,
        "config": config,
        "extra": extra or {},
        "params": entries,
    }
    payload = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(payload).to_bytes(4, "little"))
        fh.write(payload)
        for block in blocks:
            _write_block(fh, block)


def load_checkpoint(path) -> tuple[dict, "OrderedDict[str, np.ndarray]", dict]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointFormatError(f"bad checkpoint magic {magic!r}")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise CheckpointFormatError("truncated checkpoint header")
        n = int.from_bytes(raw_len, "little")
        payload = fh.read(n)
        if len(payload) != n:
            raise CheckpointFormatError("truncated checkpoint header payload")
        try:
            header = json.loads(payload)
        except json.JSONDecodeError as e:
            raise CheckpointFormatError(f"corrupt checkpoint header: {e}") from e
        if header.get("format") != FORMAT:
            raise CheckpointFormatError(
                f"unsupported checkpoint format {header.get('format')!r}"
            )
        arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        for entry in header["params"]:
            try:
                block = _read_block(fh)
            except VolumeFormatError as e:
                raise CheckpointFormatError(f"bad parameter block: {e}") from e
            if block.dtype != np.dtype("<f4"):
                raise CheckpointFormatError("parameter blocks must be float32")
            arrays[entry["name"]] = block.astype(np.float32).reshape(entry["shape"])
        if fh.read(1):
            raise CheckpointFormatError("trailing bytes after parameter blocks")
    return header["config"], arrays, header.get("extra", {})
