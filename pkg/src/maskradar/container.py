"""Named-record binary container for volumes, datasets and checkpoints.

Layout (all integers little-endian)::

    record*  : b"MRNV" | u16 version | u16 name_len | name | u8 rank | u64 extent * rank | f32 payload
    index    : b"MRNI" | u32 count | (u16 name_len | name | u64 offset) * count
    footer   : u64 index_offset | b"MRNE"

Records are written back to back; the trailing index maps each name to the
byte offset of its record so a single record can be read without scanning.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MRNV"
INDEX_MAGIC = b"MRNI"
END_MAGIC = b"MRNE"
VERSION = 1
_FOOTER = struct.Struct("<Q4s")
_HEAD = struct.Struct("<4sHH")


class ContainerError(Exception):
    """Base class for malformed container files."""


class MagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class IndexMismatchError(ContainerError):
    pass


def encode_record(name: str, array: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"record name too long ({len(raw)} bytes)")
    arr = np.asarray(array, dtype="<f4", order="C")
    if arr.ndim > 0xFF:
        raise ValueError(f"rank {arr.ndim} does not fit the record header")
    head = _HEAD.pack(MAGIC, VERSION, len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def save_volumes(path: str | os.PathLike, records: Mapping[str, np.ndarray]) -> None:
    """Write ``records`` (name -> array, stored as float32) to ``path`` atomically."""
    path = Path(path)
    chunks, index, offset = [], [], 0
    for name, arr in records.items():
        blob = encode_record(name, arr)
        index.append((name, offset))
        chunks.append(blob)
        offset += len(blob)
    idx = INDEX_MAGIC + struct.pack("<I", len(index))
    for name, off in index:
        raw = name.encode("utf-8")
        idx += struct.pack("<H", len(raw)) + raw + struct.pack("<Q", off)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        for blob in chunks:
            fh.write(blob)
        fh.write(idx)
        fh.write(_FOOTER.pack(offset, END_MAGIC))
    os.replace(tmp, path)


def save_volume(path, name: str, array: np.ndarray) -> None:
    save_volumes(path, {name: array})


def _need(buf: bytes, start: int, size: int, what: str):
    if start < 0 or start + size > len(buf):
        raise TruncatedError(f"truncated {what}: need {size} bytes at offset {start}, file has {len(buf)}")
    return buf[start: start + size]


def _read_index(buf: bytes) -> dict[str, int]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise MagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < _FOOTER.size:
        raise TruncatedError("file shorter than its footer")
    index_off, end = _FOOTER.unpack(buf[-_FOOTER.size:])
    if end != END_MAGIC:
        raise TruncatedError("missing end marker; file truncated or not closed")
    limit = len(buf) - _FOOTER.size
    if index_off > limit:
        raise IndexMismatchError(f"index offset {index_off} lies past the data ({limit} bytes)")
    pos = index_off
    if _need(buf, pos, 4, "index")[:4] != INDEX_MAGIC:
        raise IndexMismatchError(f"no index marker at offset {index_off}")
    (count,) = struct.unpack("<I", _need(buf, pos + 4, 4, "index"))
    pos += 8
    index = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _need(buf, pos, 2, "index entry"))
        name = bytes(_need(buf, pos + 2, n, "index entry")).decode("utf-8")
        (off,) = struct.unpack("<Q", _need(buf, pos + 2 + n, 8, "index entry"))
        pos += 10 + n
        if off >= index_off:
            raise IndexMismatchError(f"index entry {name!r} points at {off}, beyond the record area")
        index[name] = off
    if pos != limit:
        raise IndexMismatchError("index length disagrees with footer")
    return index


def _read_record(buf: bytes, offset: int, expect: str | None = None) -> tuple[str, np.ndarray, int]:
    magic, version, n = _HEAD.unpack(_need(buf, offset, _HEAD.size, "record header"))
    if magic != MAGIC:
        if expect is not None:
            raise IndexMismatchError(f"index entry {expect!r} at {offset} does not start a record")
        raise MagicError(f"bad record magic {magic!r} at offset {offset}")
    if version != VERSION:
        raise VersionError(f"record version {version}, this reader supports {VERSION}")
    pos = offset + _HEAD.size
    name = bytes(_need(buf, pos, n, "record name")).decode("utf-8")
    if expect is not None and name != expect:
        raise IndexMismatchError(f"index entry {expect!r} points at record {name!r}")
    pos += n
    (rank,) = struct.unpack("<B", _need(buf, pos, 1, "record rank"))
    shape = struct.unpack(f"<{rank}Q", _need(buf, pos + 1, 8 * rank, "record extents"))
    pos += 1 + 8 * rank
    size = int(np.prod(shape, dtype=np.int64)) * 4
    payload = _need(buf, pos, size, f"payload of {name!r}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return name, arr, pos + size


def load_volumes(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Read every record; the index must agree with the record sequence."""
    buf = Path(path).read_bytes()
    index = _read_index(buf)
    index_off = _FOOTER.unpack(buf[-_FOOTER.size:])[0]
    out, pos = {}, 0
    while pos < index_off:
        start = pos
        name, arr, pos = _read_record(buf, pos)
        if index.get(name) != start:
            raise IndexMismatchError(f"record {name!r} at {start} is not where the index says")
        out[name] = arr
    if pos != index_off or len(out) != len(index):
        raise IndexMismatchError("record area and index disagree")
    return out


def load_volume(path: str | os.PathLike, name: str) -> np.ndarray:
    """Random access by name through the index."""
    buf = Path(path).read_bytes()
    index = _read_index(buf)
    if name not in index:
        raise KeyError(f"{path}: no record named {name!r} (have {sorted(index)})")
    return _read_record(buf, index[name], expect=name)[1]


def record_names(path: str | os.PathLike) -> list[str]:
    return list(_read_index(Path(path).read_bytes()))
