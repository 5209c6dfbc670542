import struct

import numpy as np
import pytest

from lrlc_core.errors import ConfigurationError, DataFormatError, NonFiniteError
from lrlc_core.serialization import MAGIC, decode, encode, load_tensor, save_tensor


def test_byte_layout():
    """Test the encoded header and payload bytes."""
    payload = encode(np.array([[1, 2, 3]], dtype=np.int32))

    assert payload[:4] == MAGIC
    assert struct.unpack("<IBB", payload[4:10]) == (1, 2, 2)
    assert struct.unpack("<II", payload[10:18]) == (1, 3)
    assert payload[18:] == np.array([1, 2, 3], dtype="<i4").tobytes()


def test_scalars_have_no_extents():
    """Test encoding a zero-dimensional tensor."""
    payload = encode(np.float64(2.5))

    assert len(payload) == 10 + 8
    assert decode(payload) == 2.5


@pytest.mark.parametrize(
    "mutate,offset",
    [
        (lambda p: p[:7], 7),
        (lambda p: b"XRLC" + p[4:], 0),
        (lambda p: p[:4] + struct.pack("<I", 9) + p[8:], 4),
        (lambda p: p[:8] + bytes([17]) + p[9:], 8),
        (lambda p: p[:12], 12),
        (lambda p: p[:-1], 18),
        (lambda p: p + b"\x00", 18),
    ],
)
def test_malformed_payloads_name_the_offset(mutate, offset):
    """Test that decoding errors report where they happened."""
    payload = encode(np.zeros((2, 3), dtype=np.float32))

    with pytest.raises(DataFormatError) as info:
        decode(mutate(payload), "weights.bin")

    assert info.value.offset == offset
    assert str(info.value).startswith("weights.bin @ byte")


def test_non_finite_tensors_are_refused():
    """Test that NaN and infinity are not written."""
    with pytest.raises(NonFiniteError):
        encode(np.array([1.0, np.nan]))


def test_unsupported_dtype():
    """Test encoding a complex tensor."""
    with pytest.raises(ConfigurationError):
        encode(np.zeros(2, dtype=np.complex64))


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int64, np.uint8])
def test_files_keep_their_dtype(tmp_path, rng, dtype):
    """Test that saved tensors load with their dtype."""
    array = (np.abs(rng.standard_normal((3, 4, 2))) * 50).astype(dtype)

    path = save_tensor(tmp_path / "nested" / "tensor.bin", array)
    loaded = load_tensor(path)

    assert loaded.dtype == np.dtype(dtype)
    assert np.array_equal(loaded, array)
    assert [p.name for p in path.parent.iterdir()] == ["tensor.bin"]


def test_overwrite_replaces_the_file(tmp_path):
    """Test replacing an existing tensor file."""
    target = tmp_path / "tensor.bin"
    save_tensor(target, np.ones(3))
    save_tensor(target, np.zeros((2, 2), dtype=np.float32))

    assert load_tensor(target).shape == (2, 2)
