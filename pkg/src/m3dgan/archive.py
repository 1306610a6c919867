"""Bit-exact tensor archive files.

Layout: magic ``M3DT``, u16 little-endian version (= 1), u8 dtype code
(0 = float32, 1 = int32), u32 LE rank, rank u32 LE dims, then the payload
as little-endian row-major bytes.  Every writer/reader pair round-trips
arrays exactly, which the persistence guarantees elsewhere rely on.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"M3DT"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}
_CODE_FOR_KIND = {"f": 0, "i": 1, "u": 1}


class ArchiveError(IOError):
    """Raised for corrupt, truncated or unsupported archive files."""


def tensor_bytes(arr):
    """Serialize an array (float -> f32, int -> i32) to archive bytes."""
    arr = np.asarray(arr)
    if arr.dtype.kind not in _CODE_FOR_KIND:
        raise ArchiveError(f"unsupported dtype {arr.dtype}")
    code = _CODE_FOR_KIND[arr.dtype.kind]
    arr = arr.astype(_DTYPE_CODES[code])
    if arr.ndim:
        arr = np.ascontiguousarray(arr)
    head = MAGIC + struct.pack("<HB", VERSION, code) + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + arr.tobytes()


def tensor_from_bytes(buf, name="<bytes>"):
    if len(buf) < 11:
        raise ArchiveError(f"{name}: truncated header")
    if buf[:4] != MAGIC:
        raise ArchiveError(f"{name}: bad magic bytes {buf[:4]!r}")
    version, code = struct.unpack("<HB", buf[4:7])
    if version != VERSION:
        raise ArchiveError(f"{name}: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise ArchiveError(f"{name}: unknown dtype code {code}")
    (rank,) = struct.unpack("<I", buf[7:11])
    head_end = 11 + 4 * rank
    if len(buf) < head_end:
        raise ArchiveError(f"{name}: truncated dims")
    dims = struct.unpack(f"<{rank}I", buf[11:head_end]) if rank else ()
    dtype = _DTYPE_CODES[code]
    n = int(np.prod(dims)) if rank else 1
    expect = head_end + n * dtype.itemsize
    if len(buf) != expect:
        raise ArchiveError(f"{name}: payload size {len(buf) - head_end}, expected {n * dtype.itemsize}")
    return np.frombuffer(buf[head_end:], dtype=dtype).reshape(dims).copy()


def write_tensor(path, arr):
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(tensor_bytes(arr))
    os.replace(tmp, path)


def read_tensor(path):
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise ArchiveError(f"{path}: {exc}") from exc
    return tensor_from_bytes(buf, name=os.path.basename(path))
