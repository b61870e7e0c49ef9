"""Named-tensor persistence container.

Layout: magic "BLKT", version u32, manifest length u32, JSON manifest,
raw little-endian payload. The manifest is an ordered list of
{name, dtype, shape, offset} entries; offsets are payload-relative,
non-overlapping, and in manifest order. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DuplicateNameError, TensorFileError, TruncatedFileError, UnknownDtypeError

MAGIC = b"BLKT"
VERSION = 1

_DTYPES = {
    "f32": np.dtype("<f4"),
    "i32": np.dtype("<i4"),
    "u8": np.dtype("<u1"),
}
_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.int32): "i32", np.dtype(np.uint8): "u8"}


def _tag_for(arr: np.ndarray, name: str) -> str:
    tag = _TAGS.get(arr.dtype)
    if tag is None:
        raise TensorFileError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    return tag


def save_tensors(path, tensors) -> None:
    """Write named arrays to `path`. `tensors` is a dict or (name, array) pairs."""
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    seen = set()
    manifest = []
    blobs = []
    offset = 0
    for name, arr in items:
        if name in seen:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.ascontiguousarray(arr)
        tag = _tag_for(arr, name)
        raw = arr.astype(_DTYPES[tag], copy=False).tobytes()
        manifest.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    mbytes = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(mbytes)))
        f.write(mbytes)
        for raw in blobs:
            f.write(raw)


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a container back into an ordered {name: array} dict."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise TensorFileError(f"{path}: not a named-tensor file (bad magic)")
    version, mlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise TensorFileError(f"{path}: unsupported container version {version}")
    if len(data) < 12 + mlen:
        raise TruncatedFileError(f"{path}: manifest truncated ({len(data) - 12} of {mlen} bytes)")
    try:
        manifest = json.loads(data[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFileError(f"{path}: manifest is not valid JSON: {exc}") from None
    payload = data[12 + mlen:]

    out: dict[str, np.ndarray] = {}
    expected = 0
    for entry in manifest:
        name = entry["name"]
        if name in out:
            raise DuplicateNameError(f"{path}: duplicate tensor name {name!r}")
        tag = entry["dtype"]
        if tag not in _DTYPES:
            raise UnknownDtypeError(f"{path}: tensor {name!r} has unknown dtype tag {tag!r}")
        dt = _DTYPES[tag]
        shape = tuple(entry["shape"])
        offset = entry["offset"]
        if offset != expected:
            raise TensorFileError(
                f"{path}: tensor {name!r} offset {offset} breaks manifest order "
                f"(expected {expected})")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset + nbytes > len(payload):
            raise TruncatedFileError(
                f"{path}: payload truncated at tensor {name!r}: needs "
                f"{offset + nbytes} bytes, have {len(payload)}")
        arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(shape, dtype=np.int64)),
                            offset=offset).reshape(shape)
        out[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        expected = offset + nbytes
    return out
