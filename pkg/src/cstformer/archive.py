"""Versioned flat binary archive used for checkpoints and feature caches.

Layout (all integers little-endian)::

    8 bytes   magic  b"CSTARCH\\0"
    4 bytes   uint32 format version
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header: {"format_version", "meta", "entries": [...]}
    payload   raw little-endian array bytes, concatenated in entry order
    32 bytes  SHA-256 of everything above

Each entry records ``name``, ``dtype`` (numpy string, e.g. "<f4"), ``shape``,
``offset`` (relative to payload start) and ``nbytes``.
"""
import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ChecksumError

MAGIC = b"CSTARCH\x00"
FORMAT_VERSION = 1
_DIGEST = 32


def _le(arr):
    arr = np.asarray(arr)
    return np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<"), copy=False))


def dumps(arrays, meta=None):
    """Serialize a name -> array mapping (insertion order kept) to bytes."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = _le(arr)
        raw = a.tobytes()
        entries.append(
            {"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
             "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta or {}, "entries": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    body = b"".join(
        [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(header)), header, *blobs]
    )
    return body + hashlib.sha256(body).digest()


def loads(buf):
    """Inverse of :func:`dumps`. Returns ``(arrays, meta)``."""
    buf = bytes(buf)
    if len(buf) < len(MAGIC) + 12 + _DIGEST or not buf.startswith(MAGIC):
        raise ChecksumError("not an archive or truncated header")
    body, digest = buf[:-_DIGEST], buf[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("archive checksum mismatch (truncated or corrupted file)")
    (version,) = struct.unpack_from("<I", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ChecksumError(f"unsupported archive format version {version}")
    (hlen,) = struct.unpack_from("<Q", body, len(MAGIC) + 4)
    start = len(MAGIC) + 12
    header = json.loads(body[start:start + hlen].decode())
    payload = memoryview(body)[start + hlen:]
    arrays = {}
    for e in header["entries"]:
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def save(path, arrays, meta=None):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(arrays, meta))
    os.replace(tmp, path)


def load(path):
    return loads(Path(path).read_bytes())
