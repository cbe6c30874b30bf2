import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trojanlab import container
from trojanlab.container import BadMagicError, ChecksumError, ContainerError, VersionMismatchError

MAGIC = b"TESTMAGC"


def sample_sections():
    return {
        "meta": {"a": 1, "b": [1, 2]},
        "f4": np.arange(6, dtype=np.float32).reshape(2, 3),
        "f8": np.array([0.1, -2.5]),
        "i4": np.array([[1, -2]], dtype=np.int64),
        "u1": np.array([0, 255], dtype=np.uint8),
    }


def test_round_trip():
    out = container.decode(MAGIC, container.encode(MAGIC, sample_sections()))
    assert out["meta"] == {"a": 1, "b": [1, 2]}
    np.testing.assert_array_equal(out["f4"], np.arange(6).reshape(2, 3))
    assert out["f4"].dtype == np.float32
    assert out["f8"].dtype == np.float64 and out["f8"][0] == 0.1
    assert out["i4"].dtype == np.int32
    assert out["u1"].dtype == np.uint8


def test_layout_header():
    blob = container.encode(MAGIC, {"x": np.zeros(2, dtype=np.float32)})
    assert blob[:8] == MAGIC
    assert struct.unpack_from("<II", blob, 8) == (container.FORMAT_VERSION, 1)
    # name_len, name, dtype, ndim, dim, nbytes, data, crc, trailer
    assert len(blob) == 8 + 8 + (2 + 1 + 1 + 1 + 4 + 8 + 8 + 4) + 8


def test_encoding_is_deterministic():
    a = container.encode(MAGIC, sample_sections())
    b = container.encode(MAGIC, sample_sections())
    assert a == b


def test_bad_magic():
    blob = container.encode(MAGIC, sample_sections())
    with pytest.raises(BadMagicError):
        container.decode(b"OTHERMAG", blob)


def test_version_mismatch():
    blob = bytearray(container.encode(MAGIC, sample_sections()))
    struct.pack_into("<I", blob, 8, container.FORMAT_VERSION + 1)
    with pytest.raises(VersionMismatchError):
        container.decode(MAGIC, bytes(blob))


def test_truncation_is_detected():
    blob = container.encode(MAGIC, sample_sections())
    for cut in (0, 10, len(blob) // 2, len(blob) - 1):
        with pytest.raises(ContainerError):
            container.decode(MAGIC, blob[:cut])


def test_corrupt_section_names_its_offset():
    blob = bytearray(container.encode(MAGIC, {"a": np.zeros(4), "b": np.ones(4)}))
    # second section starts after the header and the whole first section
    first = 2 + 1 + 2 + 4 + 8 + 32 + 4
    start_b = 16 + first
    blob[start_b + 20] ^= 0xFF
    with pytest.raises(ChecksumError) as err:
        container.decode(MAGIC, bytes(blob))
    assert err.value.offset == start_b
    assert str(start_b) in str(err.value)


@settings(max_examples=150, deadline=None)
@given(st.data())
def test_any_single_byte_flip_is_rejected(data):
    blob = bytearray(container.encode(MAGIC, sample_sections()))
    i = data.draw(st.integers(8, len(blob) - 1))  # magic bytes give BadMagicError instead
    bit = data.draw(st.integers(0, 7))
    blob[i] ^= 1 << bit
    with pytest.raises(ContainerError):
        container.decode(MAGIC, bytes(blob))


def test_save_load_atomic(tmp_path):
    p = tmp_path / "sub" / "x.bin"
    container.save(p, MAGIC, sample_sections())
    assert container.load(p, MAGIC)["meta"]["a"] == 1
    assert [f.name for f in p.parent.iterdir()] == ["x.bin"]


def test_magic_length_checked():
    with pytest.raises(ValueError):
        container.encode(b"short", {})
