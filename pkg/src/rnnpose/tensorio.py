"""Little-endian binary records shared by feature bundles and checkpoints.

A record is ``u16 name_len | name (utf-8) | u32 ndim | u64 shape[ndim] |
f64 values[prod(shape)]``.  Containers prefix a 4-byte magic and a u32
format version.
"""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class FormatError(ValueError):
    """Binary container is truncated, has the wrong magic, or an unknown version."""


def write_header(out: BinaryIO, magic: bytes, version: int) -> None:
    out.write(magic)
    out.write(struct.pack("<I", version))


def read_header(src: BinaryIO, magic: bytes, supported: tuple[int, ...]) -> int:
    got = src.read(len(magic))
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(src, 4))
    if version not in supported:
        raise FormatError(f"unsupported format version {version}")
    return version


def _read_exact(src: BinaryIO, n: int) -> bytes:
    buf = src.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated input: wanted {n} bytes, got {len(buf)}")
    return buf


def write_record(out: BinaryIO, name: str, array: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.asarray(array, dtype="<f8", order="C")  # keeps 0-d shape, unlike ascontiguousarray
    out.write(struct.pack("<H", len(raw)))
    out.write(raw)
    out.write(struct.pack("<I", arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    out.write(arr.tobytes(order="C"))


def read_record(src: BinaryIO) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(src, 2))
    name = _read_exact(src, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<I", _read_exact(src, 4))
    shape = struct.unpack(f"<{ndim}Q", _read_exact(src, 8 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    values = np.frombuffer(_read_exact(src, 8 * count), dtype="<f8")
    return name, values.reshape(shape).astype(np.float64)


def write_records(out: BinaryIO, records: dict[str, np.ndarray]) -> None:
    out.write(struct.pack("<I", len(records)))
    for name, arr in records.items():
        write_record(out, name, arr)


def read_records(src: BinaryIO) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(src, 4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name, arr = read_record(src)
        if name in out:
            raise FormatError(f"duplicate record {name!r}")
        out[name] = arr
    return out


def records_equal(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> bool:
    return a.keys() == b.keys() and all(
        a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a
    )

