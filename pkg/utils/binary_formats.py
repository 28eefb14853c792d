"""
Flat binary file formats.

VSMEL1  spectrogram dump: magic, u32 rows, u32 cols, row-major f32
VSHP1   head parameters: magic, u32 dims (hidden, input, hidden, classes),
        w1, b1, w2, b2 as f32, trailing u32 CRC-32 of the float payload
VSED1   embedding dataset: magic, u32 count, u32 dim, then per record
        dim f32 followed by one label byte

All integers and floats are little-endian.
"""

import struct
import zlib
from pathlib import Path
from typing import Union

import numpy as np

from src.guard.domain import EmbeddingDataset, HeadParams, LogMelSpectrogram
from src.guard.errors import ChecksumMismatch, HeadShapeError, MalformedContainer

MEL_MAGIC = b"VSMEL1"
HEAD_MAGIC = b"VSHP1"
DATASET_MAGIC = b"VSED1"

PathLike = Union[str, Path]


def _check_magic(data: bytes, magic: bytes, what: str) -> None:
    if data[:len(magic)] != magic:
        raise MalformedContainer(f"{what}: bad magic {data[:len(magic)]!r}")


def write_spectrogram(spec: LogMelSpectrogram, path: PathLike) -> None:
    rows, cols = spec.values.shape
    with open(path, "wb") as f:
        f.write(MEL_MAGIC + struct.pack("<II", rows, cols))
        f.write(np.ascontiguousarray(spec.values, dtype="<f4").tobytes())


def read_spectrogram(path: PathLike) -> LogMelSpectrogram:
    data = Path(path).read_bytes()
    _check_magic(data, MEL_MAGIC, "spectrogram")
    offset = len(MEL_MAGIC)
    rows, cols = struct.unpack_from("<II", data, offset)
    payload = data[offset + 8:]
    if len(payload) != rows * cols * 4:
        raise MalformedContainer(f"spectrogram: expected {rows * cols * 4} payload bytes, got {len(payload)}")
    values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)
    return LogMelSpectrogram(values)


def head_to_bytes(params: HeadParams) -> bytes:
    d_in, d_hidden, d_out = params.dims
    header = HEAD_MAGIC + struct.pack("<4I", d_hidden, d_in, d_hidden, d_out)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in params.arrays())
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def head_from_bytes(data: bytes) -> HeadParams:
    _check_magic(data, HEAD_MAGIC, "head")
    offset = len(HEAD_MAGIC)
    if len(data) < offset + 16 + 4:
        raise MalformedContainer("head: file too short")
    d_hidden, d_in, d_hidden2, d_out = struct.unpack_from("<4I", data, offset)
    if d_hidden != d_hidden2:
        raise HeadShapeError(f"head: inconsistent hidden sizes {d_hidden} and {d_hidden2}")

    payload = data[offset + 16:-4]
    expected = 4 * (d_hidden * d_in + d_hidden + d_out * d_hidden + d_out)
    if len(payload) != expected:
        raise MalformedContainer(f"head: expected {expected} payload bytes, got {len(payload)}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise ChecksumMismatch("head: CRC-32 of the parameter payload does not match")

    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    shapes = [(d_hidden, d_in), (d_hidden,), (d_out, d_hidden), (d_out,)]
    arrays = []
    start = 0
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(flat[start:start + size].reshape(shape))
        start += size
    return HeadParams(*arrays)


def write_head(params: HeadParams, path: PathLike) -> None:
    Path(path).write_bytes(head_to_bytes(params))


def read_head(path: PathLike) -> HeadParams:
    return head_from_bytes(Path(path).read_bytes())


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("x", "<f4", (dim,)), ("y", "u1")])


def write_dataset(ds: EmbeddingDataset, path: PathLike) -> None:
    records = np.empty(len(ds), dtype=_record_dtype(ds.dim))
    records["x"] = ds.embeddings
    records["y"] = ds.labels
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC + struct.pack("<II", len(ds), ds.dim))
        f.write(records.tobytes())


def read_dataset(path: PathLike) -> EmbeddingDataset:
    data = Path(path).read_bytes()
    _check_magic(data, DATASET_MAGIC, "dataset")
    offset = len(DATASET_MAGIC)
    if len(data) < offset + 8:
        raise MalformedContainer("dataset: file too short")
    count, dim = struct.unpack_from("<II", data, offset)
    dtype = _record_dtype(dim)
    payload = data[offset + 8:]
    if len(payload) != count * dtype.itemsize:
        raise MalformedContainer(
            f"dataset: expected {count} records of {dtype.itemsize} bytes, got {len(payload)} bytes")
    records = np.frombuffer(payload, dtype=dtype)
    if records.size and records["y"].max() > 1:
        raise MalformedContainer("dataset: labels must be 0 or 1")
    return EmbeddingDataset(records["x"].astype(np.float32), records["y"].copy())
