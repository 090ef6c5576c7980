"""Instance snapshot codec: the on-disk form of a swapped-out controller.

A snapshot captures everything a deterministic guest needs to resume — its
whole linear memory, every wasm global, and the set of operation ids it is
waiting on (the host re-checks that set against its own records on reload).
Layout, all little-endian::

    "WOPS"  u16 version            (currently 1)
    16B     instance id            (UUID bytes)
    32B     module hash            (raw sha-256 of the module source)
    u32     memory pages
    u32     global count, then per global: u32 index, u8 valtype, u64 value
    u32     pending count, then u64 operation ids
    u8      compression            (0 raw, 1 zlib)
    u64     payload length
    ...     memory payload
    u32     crc32 over all preceding bytes

The trailing checksum is verified before anything is interpreted; any
mismatch, truncation, or shape violation raises :class:`CorruptSnapshot`.
Writes go through a temp file + fsync + rename so a torn write can never be
mistaken for a snapshot.
"""

from __future__ import annotations

import os
import struct
import uuid
import zlib
from dataclasses import dataclass
from pathlib import Path

from wasmop.wasm.interp import PAGE_SIZE

SNAPSHOT_MAGIC = b"WOPS"
SNAPSHOT_VERSION = 1

COMPRESS_NONE = 0
COMPRESS_ZLIB = 1

_GLOBAL = struct.Struct("<IBQ")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class SnapshotError(Exception):
    pass


class CorruptSnapshot(SnapshotError):
    """The file is not a usable snapshot; the instance cannot be resumed."""


@dataclass(frozen=True, slots=True)
class Snapshot:
    instance_id: uuid.UUID
    module_hash: str  # sha-256 hex of the module source
    pages: int
    globals: tuple[tuple[int, int, int], ...]  # (index, valtype, value)
    pending_ids: tuple[int, ...]
    memory: bytes


def write_snapshot(path: Path | str, snap: Snapshot, *, compress: bool = True) -> int:
    """Write atomically; returns the file size in bytes."""
    if len(snap.memory) != snap.pages * PAGE_SIZE:
        raise SnapshotError(
            f"memory payload is {len(snap.memory)} bytes for {snap.pages} pages"
        )
    head = bytearray()
    head += SNAPSHOT_MAGIC
    head += _U16.pack(SNAPSHOT_VERSION)
    head += snap.instance_id.bytes
    head += bytes.fromhex(snap.module_hash)
    if len(head) != 4 + 2 + 16 + 32:
        raise SnapshotError("module hash must be a sha-256 hex digest")
    head += _U32.pack(snap.pages)
    head += _U32.pack(len(snap.globals))
    for index, valtype, value in snap.globals:
        head += _GLOBAL.pack(index, valtype, value)
    head += _U32.pack(len(snap.pending_ids))
    for aid in snap.pending_ids:
        head += _U64.pack(aid)
    payload = zlib.compress(snap.memory, 1) if compress else snap.memory
    head += bytes([COMPRESS_ZLIB if compress else COMPRESS_NONE])
    head += _U64.pack(len(payload))
    blob = bytes(head) + payload
    blob += _U32.pack(zlib.crc32(blob))

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return len(blob)


def read_snapshot(path: Path | str) -> Snapshot:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise SnapshotError(f"cannot read snapshot: {e}") from None
    if len(blob) < 4 + 2 + 16 + 32 + 4 + 4 + 4 + 1 + 8 + 4:
        raise CorruptSnapshot("truncated snapshot")
    if blob[:4] != SNAPSHOT_MAGIC:
        raise CorruptSnapshot("bad magic")
    (declared_crc,) = _U32.unpack_from(blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != declared_crc:
        raise CorruptSnapshot("checksum mismatch")

    pos = 4
    (version,) = _U16.unpack_from(blob, pos)
    pos += 2
    if version != SNAPSHOT_VERSION:
        raise CorruptSnapshot(f"unsupported snapshot version {version}")
    instance_id = uuid.UUID(bytes=blob[pos : pos + 16])
    pos += 16
    digest = blob[pos : pos + 32].hex()
    pos += 32
    (pages,) = _U32.unpack_from(blob, pos)
    pos += 4
    (n_globals,) = _U32.unpack_from(blob, pos)
    pos += 4
    need = n_globals * _GLOBAL.size + 4
    if pos + need > len(blob) - 4:
        raise CorruptSnapshot("global table overruns file")
    globals_ = tuple(
        _GLOBAL.unpack_from(blob, pos + i * _GLOBAL.size) for i in range(n_globals)
    )
    pos += n_globals * _GLOBAL.size
    (n_pending,) = _U32.unpack_from(blob, pos)
    pos += 4
    if pos + n_pending * 8 + 1 + 8 > len(blob) - 4:
        raise CorruptSnapshot("pending table overruns file")
    pending = tuple(_U64.unpack_from(blob, pos + i * 8)[0] for i in range(n_pending))
    pos += n_pending * 8
    compression = blob[pos]
    pos += 1
    (payload_len,) = _U64.unpack_from(blob, pos)
    pos += 8
    if pos + payload_len != len(blob) - 4:
        raise CorruptSnapshot("payload length disagrees with file size")
    payload = blob[pos : pos + payload_len]
    if compression == COMPRESS_ZLIB:
        try:
            memory = zlib.decompress(payload)
        except zlib.error as e:
            raise CorruptSnapshot(f"payload does not decompress: {e}") from None
    elif compression == COMPRESS_NONE:
        memory = payload
    else:
        raise CorruptSnapshot(f"unknown compression {compression}")
    if len(memory) != pages * PAGE_SIZE:
        raise CorruptSnapshot(
            f"memory is {len(memory)} bytes but header declares {pages} pages"
        )
    return Snapshot(
        instance_id=instance_id,
        module_hash=digest,
        pages=pages,
        globals=globals_,
        pending_ids=pending,
        memory=memory,
    )
