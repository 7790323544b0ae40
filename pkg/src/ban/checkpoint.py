"""Binary checkpoint serialization.

Layout (all integers little-endian uint32, payloads little-endian
float64):

    magic "BANCKPT1"
    repeated per parameter, in write order:
        name length | name bytes (UTF-8) | rank | extent per axis | payload

The format has no trailer; readers consume records until end of file.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

MAGIC = b"BANCKPT1"
_U32 = struct.Struct("<I")


def save_checkpoint(path, params) -> None:
    """Write named parameters (Tensors or arrays) in iteration order."""
    out = bytearray()
    out += MAGIC
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out += _U32.pack(len(raw))
        out += raw
        out += _U32.pack(arr.ndim)
        for extent in arr.shape:
            out += _U32.pack(extent)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    """Read a checkpoint back into name -> float64 array, in file order."""
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    pos = len(MAGIC)
    total = len(blob)

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > total:
            raise CheckpointError(f"{path}: truncated while reading {what}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    while pos < total:
        (name_len,) = _U32.unpack(take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = _U32.unpack(take(4, "rank"))
        shape = tuple(
            _U32.unpack(take(4, "extent"))[0] for _ in range(rank)
        )
        count = 1
        for extent in shape:
            count *= extent
        payload = take(8 * count, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        if name in params:
            raise CheckpointError(f"{path}: duplicate parameter {name!r}")
        params[name] = arr
    return params
