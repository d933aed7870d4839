"""Little-endian binary record helpers for the bank/dataset/checkpoint files."""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class FormatError(ValueError):
    """A binary file did not match the expected layout."""


def write_magic(fh: BinaryIO, magic: bytes, version: int) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    fh.write(magic)
    fh.write(struct.pack("<I", version))


def read_magic(fh: BinaryIO, magic: bytes) -> int:
    got = fh.read(4)
    if got != magic:
        raise FormatError(f"bad magic: expected {magic!r}, got {got!r}")
    return read_u32(fh)


def write_u8(fh: BinaryIO, v: int) -> None:
    fh.write(struct.pack("<B", v))


def write_u32(fh: BinaryIO, v: int) -> None:
    fh.write(struct.pack("<I", v))


def write_u64(fh: BinaryIO, v: int) -> None:
    fh.write(struct.pack("<Q", v))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def read_u8(fh: BinaryIO) -> int:
    return struct.unpack("<B", _read_exact(fh, 1))[0]


def read_u32(fh: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(fh, 4))[0]


def read_u64(fh: BinaryIO) -> int:
    return struct.unpack("<Q", _read_exact(fh, 8))[0]


def write_f64_array(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_f64_array(fh: BinaryIO, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    buf = _read_exact(fh, 8 * count)
    return np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)


def write_i64_array(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<i8").tobytes())


def read_i64_array(fh: BinaryIO, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    buf = _read_exact(fh, 8 * count)
    return np.frombuffer(buf, dtype="<i8").reshape(shape).astype(np.int64)
