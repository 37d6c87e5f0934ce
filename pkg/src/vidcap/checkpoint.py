"""Single-file checkpoints: JSON manifest plus raw little-endian parameter blobs.

Layout: 4-byte magic ``VCKP``, ``uint32`` format version, ``uint64`` manifest
length, the UTF-8 JSON manifest, then every blob back to back in manifest
order. Each manifest entry records the name, shape, dtype, byte offset (from
the start of the blob section) and frozen flag of one parameter.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError
from .fileio import atomic_write_bytes
from .params import ParameterStore

MAGIC = b"VCKP"
VERSION = 1
_HEAD = struct.Struct("<4sIQ")


def dumps(params, manifest=None):
    entries, blobs, offset = [], [], 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(raw), "frozen": params.is_frozen(name)})
        blobs.append(raw)
        offset += len(raw)
    body = {"format_version": VERSION, "manifest": manifest or {}, "params": entries}
    text = json.dumps(body, sort_keys=True).encode("utf-8")
    return _HEAD.pack(MAGIC, VERSION, len(text)) + text + b"".join(blobs)


def loads(buf, path=None):
    """``(ParameterStore, manifest)`` from checkpoint bytes."""
    if len(buf) < _HEAD.size:
        raise FormatError("truncated checkpoint header", path, len(buf))
    magic, version, n = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", path, 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path, 4)
    start = _HEAD.size + n
    if len(buf) < start:
        raise FormatError("truncated checkpoint manifest", path, len(buf))
    try:
        body = json.loads(buf[_HEAD.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint manifest: {exc}", path, _HEAD.size) from exc
    params = ParameterStore()
    for e in body["params"]:
        lo = start + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(buf):
            raise FormatError(f"truncated blob for {e['name']}", path, len(buf))
        arr = np.frombuffer(buf[lo:hi], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        params.add(e["name"], arr.astype(arr.dtype.newbyteorder("=")), frozen=e["frozen"])
    return params, body["manifest"]


def save(path, params, manifest=None):
    return atomic_write_bytes(path, dumps(params, manifest))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read(), path)
