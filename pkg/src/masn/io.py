"""Little-endian binary container with a JSON header.

Layout::

    magic (8 bytes) | version (uint32 LE) | header length (uint64 LE)
    | header (UTF-8 JSON) | array payload

The header carries an ``arrays`` table of ``{name, dtype, shape, offset}``
entries; offsets are relative to the start of the payload.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

_PREFIX = struct.Struct("<8sIQ")
_DTYPES = {"f8": "<f8", "i8": "<i8"}


class ContainerError(ValueError):
    pass


class FormatError(ContainerError):
    """Bad magic bytes or unparseable header."""


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class ShapeError(ContainerError):
    """Declared shapes disagree with each other or with the payload."""


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_container(magic: bytes, version: int, header: dict, arrays: dict) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "i8" if np.issubdtype(arr.dtype, np.integer) else "f8"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    head = dict(header)
    head["arrays"] = table
    head["payload_bytes"] = offset
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(magic, version, len(blob)) + blob + b"".join(chunks)


def write_container(path, magic: bytes, version: int, header: dict, arrays: dict) -> None:
    atomic_write_bytes(path, encode_container(magic, version, header, arrays))


def read_container(path, magic: bytes, version: int):
    """Return ``(header, arrays)``; raises a ContainerError subclass on damage."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        if data[: len(magic)] != magic[: len(data)]:
            raise FormatError(f"{path}: bad magic")
        raise TruncatedError(f"{path}: file shorter than the fixed prefix")
    got_magic, got_version, hlen = _PREFIX.unpack_from(data)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}")
    if got_version != version:
        raise VersionError(f"{path}: version {got_version}, expected {version}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise TruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    payload = memoryview(data)[start + hlen:]
    if len(payload) < header.get("payload_bytes", 0):
        raise TruncatedError(f"{path}: payload has {len(payload)} bytes, "
                             f"header declares {header['payload_bytes']}")
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        lo = entry["offset"]
        hi = lo + n * dtype.itemsize
        if hi > len(payload):
            raise TruncatedError(f"{path}: array {entry['name']} runs past end of file")
        arr = np.frombuffer(payload[lo:hi], dtype=dtype).reshape(shape)
        arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
    return header, arrays
