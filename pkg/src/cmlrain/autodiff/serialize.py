"""Tensor bundle file format.

Layout (all integers little-endian)::

    b"CMLT"            magic
    uint32             format version (1)
    uint64             header length in bytes
    header             UTF-8 JSON: {"tensors": [{"name", "shape", "dtype",
                       "offset", "nbytes"}, ...], "meta": {...}}
    payload            raw little-endian array bytes, offsets relative to
                       the start of the payload

Supported dtype tags are ``<f8`` and ``<i8``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from cmlrain.autodiff.tensor import Tensor
from cmlrain.errors import DataError

MAGIC = b"CMLT"
VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def _as_array(value) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
        return np.ascontiguousarray(arr, dtype="<i8")
    return np.ascontiguousarray(arr, dtype="<f8")


def save_tensors(path, tensors: Mapping[str, object], meta: dict | None = None) -> None:
    arrays = {name: _as_array(v) for name, v in tensors.items()}
    entries = []
    offset = 0
    for name, arr in arrays.items():
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset, "nbytes": arr.nbytes}
        )
        offset += arr.nbytes
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for arr in arrays.values():
            fh.write(arr.tobytes(order="C"))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: not a tensor bundle")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported tensor format version {version}")
    start = 4 + struct.calcsize("<IQ")
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    payload = memoryview(raw)[start + hlen :]
    out: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise DataError(f"{path}: unknown dtype tag {entry['dtype']!r}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["nbytes"] != count * dtype.itemsize:
            raise DataError(f"{path}: size mismatch for tensor {entry['name']!r}")
        chunk = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        out[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"]).copy()
    return out, header.get("meta", {})


def save_tensor(path, tensor, meta: dict | None = None) -> None:
    save_tensors(path, {"data": tensor}, meta)


def load_tensor(path) -> Tensor:
    arrays, _ = load_tensors(path)
    return Tensor(arrays["data"])
