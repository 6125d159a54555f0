"""Binary container for named float64 tensors and byte blobs.

Layout (all integers little-endian):

    magic "RLT1" | version u32 | entry count u32 | entries...

Each entry:

    name length u16 | name bytes (utf-8) | dtype u8 | ndim u8 |
    dims u64 * ndim | raw payload

dtype 0 is float64 little-endian; dtype 1 is raw bytes (used for JSON
blobs such as the config echo).  Writes go through a temp file plus
rename so a crash never leaves a partial container behind.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"RLT1"
VERSION = 1
DTYPE_F64 = 0
DTYPE_BYTES = 1


def write_container(path, tensors: dict, blobs: dict | None = None):
    """Write named arrays (and optional named byte blobs) to one file."""
    blobs = blobs or {}
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors) + len(blobs))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
        parts.append(_entry_header(name, DTYPE_F64, arr.shape))
        parts.append(arr.astype("<f8", copy=False).tobytes())
    for name, raw in blobs.items():
        raw = bytes(raw)
        parts.append(_entry_header(name, DTYPE_BYTES, (len(raw),)))
        parts.append(raw)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)


def read_container(path):
    """Read a container; returns (tensors dict, blobs dict)."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError(f"{path}: not a tensor container (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    tensors, blobs = {}, {}
    off = 12
    for _ in range(count):
        off, name, dtype, dims = _read_header(buf, off, path)
        if dtype == DTYPE_F64:
            nbytes = 8 * int(np.prod(dims, dtype=np.int64))
            _check(buf, off, nbytes, path)
            flat = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=off)
            tensors[name] = flat.reshape(dims).astype(np.float64)
            off += nbytes
        elif dtype == DTYPE_BYTES:
            if len(dims) != 1:
                raise FormatError(f"{path}: blob entry {name!r} must be 1-d")
            nbytes = dims[0]
            _check(buf, off, nbytes, path)
            blobs[name] = bytes(buf[off:off + nbytes])
            off += nbytes
        else:
            raise FormatError(f"{path}: unknown dtype code {dtype} for {name!r}")
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes after entries")
    return tensors, blobs


def _entry_header(name: str, dtype: int, dims) -> bytes:
    nb = name.encode("utf-8")
    if len(nb) > 0xFFFF:
        raise FormatError(f"entry name too long: {name[:32]!r}...")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", dtype, len(dims))
    return head + b"".join(struct.pack("<Q", int(d)) for d in dims)


def _read_header(buf, off, path):
    _check(buf, off, 2, path)
    (nlen,) = struct.unpack_from("<H", buf, off)
    off += 2
    _check(buf, off, nlen + 2, path)
    name = buf[off:off + nlen].decode("utf-8")
    off += nlen
    dtype, ndim = struct.unpack_from("<BB", buf, off)
    off += 2
    _check(buf, off, 8 * ndim, path)
    dims = tuple(
        struct.unpack_from("<Q", buf, off + 8 * i)[0] for i in range(ndim)
    )
    return off + 8 * ndim, name, dtype, dims


def _check(buf, off, need, path):
    if off + need > len(buf):
        raise FormatError(f"{path}: truncated container")
