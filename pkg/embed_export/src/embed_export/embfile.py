"""Writer/reader for the conda-adapt embedding-file format.

This is the exchange format between the two tools, implemented here from its
published layout so the exporter has no code dependency on the consumer:

    magic   4 bytes  b"CEM1"
    version u16 LE   1
    dtype   u8       0 = float32, 1 = float64, 2 = uint32
    rows    u64 LE
    cols    u64 LE
    payload row-major little-endian elements
    crc     u32 LE   CRC-32 of the payload bytes
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"CEM1"
VERSION = 1
_HEADER = struct.Struct("<4sHBQQ")
_CRC = struct.Struct("<I")
_DTYPES = {"f4": 0, "f8": 1, "u4": 2}
_NP_DTYPES = {0: "<f4", 1: "<f8", 2: "<u4"}


def emb_bytes(array: np.ndarray, dtype: str) -> bytes:
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise ValueError(f"embedding files hold 2-D matrices, got shape {arr.shape}")
    code = _DTYPES.get(dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {dtype!r}")
    if dtype == "u4":
        if arr.dtype.kind not in "iu":
            raise ValueError("u4 files require integer data")
        if arr.size and (arr.min() < 0 or arr.max() > np.iinfo(np.uint32).max):
            raise ValueError("integer data outside the uint32 range")
    elif not np.all(np.isfinite(arr)):
        raise ValueError("refusing to serialize NaN or Inf")
    payload = np.ascontiguousarray(arr, dtype=_NP_DTYPES[code]).tobytes()
    header = _HEADER.pack(MAGIC, VERSION, code, arr.shape[0], arr.shape[1])
    return header + payload + _CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF)


def parse_emb(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise ValueError(f"file too short for a header ({len(buf)} bytes)")
    magic, version, code, rows, cols = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"unsupported version {version}")
    if code not in _NP_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    np_dtype = np.dtype(_NP_DTYPES[code])
    expected = _HEADER.size + rows * cols * np_dtype.itemsize + _CRC.size
    if len(buf) != expected:
        raise ValueError(f"expected {expected} bytes, got {len(buf)}")
    payload = buf[_HEADER.size:expected - _CRC.size]
    (stored,) = _CRC.unpack_from(buf, expected - _CRC.size)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored:
        raise ValueError("payload CRC mismatch")
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(rows, cols)
    if code == 2:
        return arr.astype(np.int64)
    return arr.astype(np.float64)


def write_emb(path, array: np.ndarray, dtype: str) -> None:
    with open(path, "wb") as fh:
        fh.write(emb_bytes(array, dtype))


def read_emb(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_emb(fh.read())


def file_crc(path) -> int:
    with open(path, "rb") as fh:
        return zlib.crc32(fh.read()) & 0xFFFFFFFF
