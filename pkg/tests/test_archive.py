"""Tensor-archive wire format: exact bytes and failure modes."""

import struct

import numpy as np
import pytest

from m3dgan.archive import ArchiveError, read_tensor, tensor_bytes, tensor_from_bytes, write_tensor


def test_header_layout_is_exact():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    buf = tensor_bytes(arr)
    assert buf[:4] == b"M3DT"
    version, dtype_code = struct.unpack("<HB", buf[4:7])
    assert (version, dtype_code) == (1, 0)
    (rank,) = struct.unpack("<I", buf[7:11])
    assert rank == 2
    assert struct.unpack("<2I", buf[11:19]) == (2, 3)
    assert buf[19:] == arr.astype("<f4").tobytes()


def test_int_dtype_code():
    buf = tensor_bytes(np.array([1, 2, 3], dtype=np.int64))
    assert buf[6] == 1
    out = tensor_from_bytes(buf)
    assert out.dtype == np.dtype("<i4")
    np.testing.assert_array_equal(out, [1, 2, 3])


def test_roundtrip_bit_exact_random_shapes(tmp_path):
    rng = np.random.default_rng(3)
    for _ in range(25):
        rank = int(rng.integers(0, 5))
        shape = tuple(int(rng.integers(1, 5)) for _ in range(rank))
        arr = rng.standard_normal(shape).astype(np.float32)
        path = tmp_path / "t.m3dt"
        write_tensor(path, arr)
        back = read_tensor(path)
        assert back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()


def test_bad_magic_rejected():
    buf = b"XXXX" + tensor_bytes(np.zeros(3, np.float32))[4:]
    with pytest.raises(ArchiveError, match="magic"):
        tensor_from_bytes(buf)


def test_truncation_rejected(tmp_path):
    buf = tensor_bytes(np.zeros((4, 4), np.float32))
    for cut in (5, 10, len(buf) - 1):
        with pytest.raises(ArchiveError):
            tensor_from_bytes(buf[:cut])
    path = tmp_path / "trunc.m3dt"
    path.write_bytes(buf[: len(buf) // 2])
    with pytest.raises(ArchiveError):
        read_tensor(path)


def test_version_mismatch_rejected():
    buf = bytearray(tensor_bytes(np.zeros(2, np.float32)))
    buf[4:6] = struct.pack("<H", 9)
    with pytest.raises(ArchiveError, match="version"):
        tensor_from_bytes(bytes(buf))


def test_unknown_dtype_code_rejected():
    buf = bytearray(tensor_bytes(np.zeros(2, np.float32)))
    buf[6] = 7
    with pytest.raises(ArchiveError, match="dtype"):
        tensor_from_bytes(bytes(buf))


def test_unsupported_input_dtype():
    with pytest.raises(ArchiveError):
        tensor_bytes(np.array(["a", "b"]))


def test_missing_file_raises_archive_error():
    with pytest.raises(ArchiveError):
        read_tensor("/nonexistent/path/t.m3dt")
