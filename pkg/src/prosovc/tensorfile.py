"""Versioned binary container for named tensors plus JSON metadata.

Layout:

    bytes 0..3    magic (``PVC1`` for feature bundles, ``PVCK`` for checkpoints)
    bytes 4..7    format version, uint32 little-endian
    bytes 8..11   header length in bytes, uint32 little-endian
    header        UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "dtype", "shape"}, ...]}
    data          raw tensor bytes in listed order, C-contiguous, little-endian

Round trips are bit-exact for all supported dtypes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"PVC1"
CHECKPOINT_MAGIC = b"PVCK"
FORMAT_VERSION = 1

_DTYPES = {
    "f4": np.dtype("<f4"),
    "f8": np.dtype("<f8"),
    "i4": np.dtype("<i4"),
    "i8": np.dtype("<i8"),
    "u1": np.dtype("u1"),
}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


class TensorFileError(IOError):
    """Malformed or unsupported container file."""


def write_tensorfile(path: str | Path, tensors: dict[str, np.ndarray],
                     meta: dict | None = None, magic: bytes = FEATURE_MAGIC):
    entries = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        code = _DTYPE_CODES.get(np.dtype(dtype))
        if code is None:
            raise TensorFileError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        blobs.append(arr.astype(_DTYPES[code], copy=False).tobytes())
    header = json.dumps({"meta": meta or {}, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_tensorfile(path: str | Path, magic: bytes | None = None):
    """Read a container; returns (tensors dict, meta dict)."""
    with open(path, "rb") as fh:
        got_magic = fh.read(4)
        if len(got_magic) != 4 or (magic is not None and got_magic != magic):
            expected = magic.decode() if magic else "PVC*"
            raise TensorFileError(f"{path}: bad magic (expected {expected})")
        raw = fh.read(8)
        if len(raw) != 8:
            raise TensorFileError(f"{path}: truncated header")
        version, header_len = struct.unpack("<II", raw)
        if version != FORMAT_VERSION:
            raise TensorFileError(f"{path}: unsupported format version {version}")
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise TensorFileError(f"{path}: corrupt header: {exc}") from None
        tensors = {}
        for entry in header["tensors"]:
            dtype = _DTYPES[entry["dtype"]]
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            blob = fh.read(count * dtype.itemsize)
            if len(blob) != count * dtype.itemsize:
                raise TensorFileError(f"{path}: truncated tensor {entry['name']!r}")
            tensors[entry["name"]] = np.frombuffer(blob, dtype=dtype).reshape(shape).copy()
    return tensors, header.get("meta", {})
