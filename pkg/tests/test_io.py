import struct

import numpy as np
import pytest

from maskexplain.io import (FormatError, decode_mpt1, decode_pgm, encode_mpt1, encode_pgm, load_tensor_dir,
                            read_kv, save_tensor_dir, write_kv)


def test_mpt1_layout_by_hand():
    a = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    data = encode_mpt1(a)
    assert data[:4] == b"MPT1"
    assert data[4] == 2
    assert struct.unpack("<2I", data[5:13]) == (2, 3)
    assert struct.unpack("<6f", data[13:]) == (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)


def test_mpt1_round_trip_float32_values():
    a = np.random.default_rng(0).random((4, 5, 3)).astype(np.float32).astype(np.float64)
    np.testing.assert_array_equal(decode_mpt1(encode_mpt1(a)), a)


def test_mpt1_rejects_garbage():
    with pytest.raises(FormatError):
        decode_mpt1(b"NOPE\x00")
    with pytest.raises(FormatError):
        decode_mpt1(encode_mpt1(np.zeros((2, 2)))[:-1])


def test_pgm_values_are_rounded_normalized_intensities():
    h = np.array([[0.0, 1.0], [2.0, 4.0]])
    data = encode_pgm(h)
    assert data.startswith(b"P5\n2 2\n255\n")
    np.testing.assert_array_equal(decode_pgm(data), [[0, 64], [128, 255]])


def test_tensor_dir_manifest(tmp_path):
    tensors = {"a": np.ones((2, 3)), "b": np.zeros(4)}
    save_tensor_dir(tmp_path, tensors)
    assert (tmp_path / "manifest.txt").read_text() == "a 2 3\nb 4\n"
    back = load_tensor_dir(tmp_path)
    np.testing.assert_array_equal(back["a"], tensors["a"])


def test_kv_round_trip(tmp_path):
    write_kv(tmp_path / "c.txt", {"lr": 0.1, "angles": [90, 180], "name": "x", "missing": None})
    assert read_kv(tmp_path / "c.txt") == {"lr": "0.1", "angles": "90,180", "name": "x", "missing": ""}
