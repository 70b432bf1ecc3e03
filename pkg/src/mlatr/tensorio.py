"""Little-endian binary containers.

``MLT1`` tensor file (feature cache, plugin embeddings)::

    b"MLT1" | u32 ndim | u32 dim * ndim | f32 data, row-major

``MLS1`` state archive (full-precision checkpoint state)::

    b"MLS1" | u32 header_len | JSON header | raw arrays in header order

Both formats are byte-deterministic for identical inputs.
"""

from __future__ import annotations

import json
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from mlatr.errors import MalformedRecord

TENSOR_MAGIC = b"MLT1"
STATE_MAGIC = b"MLS1"


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(arr))


def read_tensor_header(path: str | Path) -> tuple[int, ...]:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != TENSOR_MAGIC:
            raise MalformedRecord("not an MLT1 tensor file", path=str(path))
        (ndim,) = struct.unpack("<I", head[4:])
        return struct.unpack(f"<{ndim}I", fh.read(4 * ndim))


def read_tensor(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != TENSOR_MAGIC:
        raise MalformedRecord("not an MLT1 tensor file", path=str(path))
    (ndim,) = struct.unpack_from("<I", data, 4)
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    offset = 8 + 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if len(data) - offset != 4 * count:
        raise MalformedRecord(f"tensor payload size mismatch for shape {shape}", path=str(path))
    return np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)


def write_state(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    specs = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        specs.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes(order="C"))
    header = json.dumps({"arrays": specs, "meta": dict(meta or {})}, sort_keys=True, separators=(",", ":")).encode()
    Path(path).write_bytes(STATE_MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs))


def read_state(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != STATE_MAGIC:
        raise MalformedRecord("not an MLS1 state archive", path=str(path))
    (hlen,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8 : 8 + hlen])
    offset = 8 + hlen
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[spec["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    return arrays, header["meta"]
