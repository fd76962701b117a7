"""Self-describing binary tensor container.

Layout: magic ``SQTF``, one version byte, a little-endian uint64 header
length, a UTF-8 JSON header, then the raw tensor payloads back to back.

The header carries an arbitrary JSON ``meta`` dict plus a directory of
entries ``{name, dtype, shape, offset, nbytes}`` with offsets relative to
the end of the header. Payloads are row-major (C order) little-endian.
Round-tripping a container is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SQTF"
VERSION = 1

_ALLOWED_DTYPES = {"float64", "float32", "int64", "int32", "uint8", "bool"}


class TensorFileError(IOError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named tensors (and optional JSON-serializable metadata) to path."""
    directory = []
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.name not in _ALLOWED_DTYPES:
            raise TensorFileError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes(order="C")
        directory.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"meta": meta or {}, "tensors": directory}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container; returns (tensors, meta)."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise TensorFileError(f"{path}: bad magic {data[:4]!r}")
    version = data[4]
    if version != VERSION:
        raise TensorFileError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack("<Q", data[5:13])
    header_end = 13 + header_len
    try:
        header = json.loads(data[13:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFileError(f"{path}: corrupt header: {exc}") from exc
    tensors = {}
    for entry in header["tensors"]:
        start = header_end + entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(data):
            raise TensorFileError(f"{path}: truncated payload for {entry['name']!r}")
        arr = np.frombuffer(data[start:stop], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, header.get("meta", {})
