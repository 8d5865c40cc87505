"""Exchange-format writer/reader, standalone."""

import numpy as np
import pytest

from embed_export import embfile


def test_round_trip_each_dtype(tmp_path):
    cases = {
        "f8": np.array([[1.5, -2.25], [0.0, 8.0]]),
        "f4": np.array([[0.5, -1.25], [2.0, 3.75]]),
        "u4": np.array([[0, 1], [2, 4000000]], dtype=np.int64),
    }
    for dtype, arr in cases.items():
        path = tmp_path / f"x_{dtype}.emb"
        embfile.write_emb(path, arr, dtype)
        back = embfile.read_emb(path)
        np.testing.assert_array_equal(back, arr)
        assert embfile.emb_bytes(back if dtype != "u4" else arr, dtype) \
            == path.read_bytes()


def test_header_fields():
    raw = embfile.emb_bytes(np.ones((3, 4)), "f4")
    assert raw[:4] == b"CEM1"
    assert len(raw) == 23 + 3 * 4 * 4 + 4  # header + payload + crc


def test_corruption_detected():
    raw = bytearray(embfile.emb_bytes(np.ones((2, 2)), "f8"))
    raw[25] ^= 0xFF
    with pytest.raises(ValueError, match="CRC"):
        embfile.parse_emb(bytes(raw))


def test_truncation_and_magic():
    raw = embfile.emb_bytes(np.ones((2, 2)), "f8")
    with pytest.raises(ValueError):
        embfile.parse_emb(raw[:-2])
    with pytest.raises(ValueError, match="magic"):
        embfile.parse_emb(b"XXXX" + raw[4:])


def test_write_validation():
    with pytest.raises(ValueError):
        embfile.emb_bytes(np.ones(3), "f8")
    with pytest.raises(ValueError):
        embfile.emb_bytes(np.array([[np.inf]]), "f8")
    with pytest.raises(ValueError):
        embfile.emb_bytes(np.array([[-2]]), "u4")
    with pytest.raises(ValueError):
        embfile.emb_bytes(np.ones((1, 1)), "i8")
