"""Versioned binary container shared by checkpoints, Trojan batches and datasets.

Layout (all integers little-endian)::

    magic            8 bytes, identifies the payload kind
    version          u32
    section_count    u32
    section*         name_len u16 | name utf-8 | dtype u8 | ndim u8 | dims u32*ndim
                     | nbytes u64 | data | crc32 u32 (over the section bytes before it)
    checksum         u64, first 8 bytes (LE) of BLAKE2b over every byte after the magic

dtype codes: 1 = float32, 2 = int32, 3 = uint8, 4 = utf-8 JSON text (ndim 0),
5 = float64.
Arrays are stored row-major.  The per-section CRC lets a checksum failure name
the byte offset of the damaged section.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<i4"), 3: np.dtype("u1"), 5: np.dtype("<f8")}
_CODES = {np.dtype("<f4"): 1, np.dtype("<i4"): 2, np.dtype("u1"): 3, np.dtype("<f8"): 5}
_JSON = 4


class ContainerError(Exception):
    """Base class for unreadable container files."""


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class ChecksumError(ContainerError):
    def __init__(self, message: str, offset: int | None = None) -> None:
        super().__init__(message)
        self.offset = offset


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def encode(magic: bytes, sections: dict) -> bytes:
    """Serialize ``sections`` (name -> ndarray or JSON-able object) in insertion order."""
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    body = bytearray(struct.pack("<II", FORMAT_VERSION, len(sections)))
    for name, value in sections.items():
        raw_name = name.encode("utf-8")
        sec = bytearray(struct.pack("<H", len(raw_name)) + raw_name)
        if isinstance(value, np.ndarray):
            arr = np.ascontiguousarray(value)
            if arr.dtype.kind == "f":
                arr = arr.astype("<f8" if arr.dtype.itemsize == 8 else "<f4")
            elif arr.dtype.kind in "iub" and arr.dtype != np.dtype("u1"):
                arr = arr.astype("<i4")
            code = _CODES[arr.dtype]
            data = arr.tobytes(order="C")
            sec += struct.pack("<BB", code, arr.ndim)
            sec += struct.pack(f"<{arr.ndim}I", *arr.shape)
        else:
            data = json.dumps(value, sort_keys=True, separators=(",", ":")).encode("utf-8")
            sec += struct.pack("<BB", _JSON, 0)
        sec += struct.pack("<Q", len(data)) + data
        sec += struct.pack("<I", zlib.crc32(sec))
        body += sec
    return magic + bytes(body) + struct.pack("<Q", _checksum(bytes(body)))


def decode(magic: bytes, blob: bytes) -> dict:
    if len(blob) < 8 + 8 + 8:
        raise ChecksumError(f"file truncated: {len(blob)} bytes is shorter than any valid container")
    if blob[:8] != magic:
        raise BadMagicError(f"bad magic {blob[:8]!r}, expected {magic!r}")
    body, trailer = blob[8:-8], blob[-8:]
    (version,) = struct.unpack_from("<I", body, 0)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, this build reads {FORMAT_VERSION}")
    stored = struct.unpack("<Q", trailer)[0]
    if stored != _checksum(body):
        raise ChecksumError(*_locate_damage(blob))
    return _parse_sections(body)


def _parse_sections(body: bytes) -> dict:
    (_, count) = struct.unpack_from("<II", body, 0)
    pos = 8
    out: dict = {}
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        dims = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        data = body[pos : pos + nbytes]
        pos += nbytes
        (crc,) = struct.unpack_from("<I", body, pos)
        if crc != zlib.crc32(body[start:pos]):
            raise ChecksumError(f"section {name!r} failed its CRC", offset=8 + start)
        pos += 4
        if code == _JSON:
            out[name] = json.loads(data.decode("utf-8"))
        else:
            out[name] = np.frombuffer(data, dtype=_DTYPES[code]).reshape(dims).copy()
    if pos != len(body):
        raise ChecksumError(f"{len(body) - pos} trailing bytes after the last section", offset=8 + pos)
    return out


def _locate_damage(blob: bytes) -> tuple[str, int | None]:
    """Best-effort description and offset of the first damaged region."""
    body = blob[8:-8]
    try:
        (_, count) = struct.unpack_from("<II", body, 0)
        pos = 8
        for _ in range(count):
            start = pos
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2 + nlen
            _, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2 + 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", body, pos)
            pos += 8 + nbytes
            if pos + 4 > len(body):
                return (f"file truncated inside the section starting at byte offset {8 + start}", 8 + start)
            (crc,) = struct.unpack_from("<I", body, pos)
            if crc != zlib.crc32(body[start:pos]):
                return (f"checksum mismatch: corrupt section starting at byte offset {8 + start}", 8 + start)
            pos += 4
        if pos != len(body):
            return (f"checksum mismatch: unexpected bytes at offset {8 + pos}", 8 + pos)
    except (struct.error, UnicodeDecodeError):
        return ("checksum mismatch: file truncated or section headers corrupt", None)
    return (f"checksum mismatch: trailer at byte offset {len(blob) - 8} is corrupt", len(blob) - 8)


def write_atomic(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, magic: bytes, sections: dict) -> None:
    write_atomic(path, encode(magic, sections))


def load(path, magic: bytes) -> dict:
    return decode(magic, Path(path).read_bytes())
