"""Binary container for named float64 arrays.

Layout (all integers little-endian)::

    b"VTCK"  | u32 format version | u64 record count
    per record:
        u32 name length | UTF-8 name | u32 rank | rank x u64 extents | float64 data (row-major)

Records are written in the order given, so equal inputs give equal bytes.
"""

import os
import struct

import numpy as np

from .errors import BadMagic, TruncatedFile

MAGIC = b"VTCK"
FORMAT_VERSION = 1


def dumps(arrays: dict) -> bytes:
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d arrays 0-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict:
    view = memoryview(buf)
    pos = 0

    def read(n):
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFile(f"checkpoint ends at byte {len(view)}, needed {pos + n}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(read(4)) != MAGIC:
        raise BadMagic("not a checkpoint container")
    version, count = struct.unpack("<IQ", read(12))
    if version != FORMAT_VERSION:
        raise BadMagic(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", read(4))
        name = bytes(read(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", read(4))
        shape = struct.unpack(f"<{rank}Q", read(8 * rank))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(bytes(read(8 * n)), dtype="<f8").astype(np.float64)
        out[name] = data.reshape(shape)
    return out


def save(path, arrays: dict):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(arrays))
    os.replace(tmp, path)


def load(path) -> dict:
    with open(path, "rb") as fh:
        return loads(fh.read())
