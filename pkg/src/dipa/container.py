"""DIPAW1 named-tensor container.

Layout::

    bytes 0-7    magic b"DIPAW1\\0\\0"
    bytes 8-15   little-endian u64 header length H
    bytes 16..   H bytes of UTF-8 JSON: name -> {"dtype", "shape", "offset", "nbytes"}
    payload      tensors back to back, row-major little-endian;
                 offsets are relative to the payload start
"""

from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ContainerError, IntegrityError, MagicMismatchError

MAGIC = b"DIPAW1\x00\x00"
_LE = {"f32": "<f4", "f64": "<f8"}


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    header = {}
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = T.dtype_name(arr.dtype)
        raw = np.ascontiguousarray(arr, dtype=_LE[code]).tobytes()
        header[name] = {"dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<Q", len(head)), head, *chunks])


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16:
        raise IntegrityError("container truncated before header")
    if blob[:8] != MAGIC:
        raise MagicMismatchError(f"bad magic {blob[:8]!r}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise IntegrityError("container truncated inside header")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable header: {exc}") from None
    if not isinstance(header, dict):
        raise ContainerError("header is not a JSON object")
    payload = memoryview(blob)[16 + hlen :]
    out = {}
    for name, entry in header.items():
        try:
            code, shape = entry["dtype"], tuple(int(n) for n in entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError):
            raise ContainerError(f"malformed header entry for {name!r}") from None
        if code not in _LE:
            raise ContainerError(f"unknown dtype {code!r} for {name!r}")
        expected = int(np.prod(shape)) * np.dtype(_LE[code]).itemsize
        if nbytes != expected:
            raise IntegrityError(f"{name!r}: header nbytes {nbytes} disagrees with shape {list(shape)} ({expected})")
        if offset < 0 or offset + nbytes > len(payload):
            raise IntegrityError(f"{name!r}: payload truncated")
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype=_LE[code]).reshape(shape)
        out[name] = arr.astype(T.DTYPES[code])
    return out


def save(tensors: Mapping[str, np.ndarray], path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(tensors))
    os.replace(tmp, path)


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())


save_weights = save
load_weights = load
