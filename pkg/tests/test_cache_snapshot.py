"""Unit tests for the compiled-module cache and the snapshot codec."""

from __future__ import annotations

import os
import struct
import uuid
import zlib

import pytest

from wasmop.guest import programs
from wasmop.guest.dsl import I32, I64
from wasmop.runtime.cache import AbiError, ModuleCache, check_module_abi, module_hash
from wasmop.runtime.snapshot import (
    CorruptSnapshot,
    Snapshot,
    SnapshotError,
    read_snapshot,
    write_snapshot,
)
from wasmop.wasm import ENGINE_VERSION, lower, parse_module
from wasmop.wasm import opcodes as op
from wasmop.wasm.builder import ModuleBuilder
from wasmop.wasm.interp import PAGE_SIZE


def lowered_for(blob: bytes):
    return lower(parse_module(blob), ENGINE_VERSION)


# -- module cache ----------------------------------------------------------------


def test_cache_compiles_once_then_hits(tmp_path):
    cache = ModuleCache(tmp_path)
    blob = programs.synthetic_operator()
    digest, lowered = cache.compile(blob)
    assert digest == module_hash(blob)
    assert cache.stats() == {"hits": 0, "misses": 1, "resident": 1}
    digest2, lowered2 = cache.compile(blob)
    assert digest2 == digest
    assert lowered2 is lowered
    assert cache.stats()["hits"] == 1
    assert cache.cache_path(digest).exists()
    assert cache.meta_path(digest).exists()


def test_cache_survives_process_restart(tmp_path):
    blob = programs.two_task_probe()
    digest, _ = ModuleCache(tmp_path).compile(blob)
    fresh = ModuleCache(tmp_path)
    digest2, lowered = fresh.compile(blob)
    assert digest2 == digest
    assert fresh.stats() == {"hits": 1, "misses": 0, "resident": 1}
    assert "start" in lowered.export_map()


def test_cache_rejects_corrupt_file_and_rebuilds(tmp_path):
    blob = programs.trivial_finisher()
    cache = ModuleCache(tmp_path)
    digest, _ = cache.compile(blob)
    path = cache.cache_path(digest)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))

    fresh = ModuleCache(tmp_path)
    _, lowered = fresh.compile(blob)
    assert fresh.stats()["misses"] == 1
    assert "start" in lowered.export_map()
    # The rebuilt file is valid again.
    again = ModuleCache(tmp_path)
    again.compile(blob)
    assert again.stats()["hits"] == 1


def test_cache_treats_other_engine_version_as_stale(tmp_path):
    blob = programs.trivial_finisher()
    cache = ModuleCache(tmp_path)
    digest, _ = cache.compile(blob)
    path = cache.cache_path(digest)
    raw = path.read_bytes()
    other = b"someengine-0.0"
    patched = raw[:4] + struct.pack("<HH", 1, len(other)) + other
    ver_len = struct.unpack_from("<H", raw, 6)[0]
    patched += raw[8 + ver_len :]
    path.write_bytes(patched)

    fresh = ModuleCache(tmp_path)
    fresh.compile(blob)
    assert fresh.stats()["misses"] == 1


def test_cache_meta_records_source(tmp_path):
    import json

    blob = programs.two_task_probe()
    cache = ModuleCache(tmp_path)
    digest, _ = cache.compile(blob)
    meta = json.loads(cache.meta_path(digest).read_text())
    assert meta["source_len"] == len(blob)
    assert meta["engine_version"] == ENGINE_VERSION
    assert "created_at" in meta


def test_cache_get_unknown_hash_returns_none(tmp_path):
    assert ModuleCache(tmp_path).get("0" * 64) is None


# -- ABI validation ---------------------------------------------------------------


def _skeleton(include=("start", "allocate", "wakeup"), export_memory=True):
    b = ModuleBuilder()
    b.add_memory(2, None)
    if export_memory:
        b.export_memory("memory")
    if "start" in include:
        b.export_func("start", b.add_func((), (), (), []))
    if "allocate" in include:
        b.export_func(
            "allocate", b.add_func((op.I32,), (op.I32,), (), [(op.LOCAL_GET, 0)])
        )
    if "wakeup" in include:
        b.export_func("wakeup", b.add_func((op.I64, op.I32, op.I32), (), (), []))
    return b


def test_abi_accepts_minimal_module():
    check_module_abi(lowered_for(_skeleton().build()))


@pytest.mark.parametrize("missing", ["start", "allocate", "wakeup"])
def test_abi_missing_required_export(missing):
    keep = tuple(n for n in ("start", "allocate", "wakeup") if n != missing)
    with pytest.raises(AbiError) as exc:
        check_module_abi(lowered_for(_skeleton(include=keep).build()))
    assert exc.value.symbol == missing


def test_abi_requires_exported_memory():
    with pytest.raises(AbiError) as exc:
        check_module_abi(lowered_for(_skeleton(export_memory=False).build()))
    assert exc.value.symbol == "memory"


def test_abi_rejects_wrong_export_signature():
    b = ModuleBuilder()
    b.add_memory(2, None)
    b.export_memory("memory")
    b.export_func("start", b.add_func((), (), (), []))
    # allocate must be (i32) -> (i32)
    b.export_func("allocate", b.add_func((op.I64,), (op.I32,), (), [(op.I32_CONST, 0)]))
    b.export_func("wakeup", b.add_func((op.I64, op.I32, op.I32), (), (), []))
    with pytest.raises(AbiError) as exc:
        check_module_abi(lowered_for(b.build()))
    assert exc.value.symbol == "allocate"


def test_abi_rejects_unknown_host_import():
    b = ModuleBuilder()
    b.import_func("env", "frobnicate", (op.I32,), ())
    b.add_memory(2, None)
    b.export_memory("memory")
    b.export_func("start", b.add_func((), (), (), []))
    b.export_func("allocate", b.add_func((op.I32,), (op.I32,), (), [(op.LOCAL_GET, 0)]))
    b.export_func("wakeup", b.add_func((op.I64, op.I32, op.I32), (), (), []))
    with pytest.raises(AbiError) as exc:
        check_module_abi(lowered_for(b.build()))
    assert exc.value.symbol == "env.frobnicate"


def test_abi_rejects_import_from_unknown_module():
    b = ModuleBuilder()
    b.import_func("mystery", "thing", (), ())
    b.add_memory(2, None)
    b.export_memory("memory")
    b.export_func("start", b.add_func((), (), (), []))
    b.export_func("allocate", b.add_func((op.I32,), (op.I32,), (), [(op.LOCAL_GET, 0)]))
    b.export_func("wakeup", b.add_func((op.I64, op.I32, op.I32), (), (), []))
    with pytest.raises(AbiError) as exc:
        check_module_abi(lowered_for(b.build()))
    assert exc.value.symbol == "mystery.thing"


def test_abi_rejects_wrong_import_signature():
    b = ModuleBuilder()
    b.import_func("env", "kube_request", (op.I32,), (op.I64,))
    b.add_memory(2, None)
    b.export_memory("memory")
    b.export_func("start", b.add_func((), (), (), []))
    b.export_func("allocate", b.add_func((op.I32,), (op.I32,), (), [(op.LOCAL_GET, 0)]))
    b.export_func("wakeup", b.add_func((op.I64, op.I32, op.I32), (), (), []))
    with pytest.raises(AbiError) as exc:
        check_module_abi(lowered_for(b.build()))
    assert exc.value.symbol == "env.kube_request"


def test_abi_accepts_all_shipped_programs():
    for factory in programs.CATALOG.values():
        check_module_abi(lowered_for(factory()))


# -- snapshot codec ----------------------------------------------------------------


def sample_snapshot(pages=2, compress_friendly=True) -> Snapshot:
    if compress_friendly:
        memory = (b"\xa5" * 1000 + b"\x00" * 3096) * (pages * 16)
    else:
        memory = os.urandom(pages * PAGE_SIZE)
    assert len(memory) == pages * PAGE_SIZE
    return Snapshot(
        instance_id=uuid.uuid4(),
        module_hash="ab" * 32,
        pages=pages,
        globals=((0, 0x7F, 0x20000), (1, 0x7E, 2**63 + 17), (2, 0x7F, 0)),
        pending_ids=(1, 7, 2**64 - 1),
        memory=memory,
    )


@pytest.mark.parametrize("compress", [True, False])
def test_snapshot_round_trip(tmp_path, compress):
    snap = sample_snapshot(compress_friendly=compress)
    path = tmp_path / "inst.wops"
    size = write_snapshot(path, snap, compress=compress)
    assert size == path.stat().st_size
    back = read_snapshot(path)
    assert back == snap
    if compress:
        assert size < len(snap.memory)  # ballast-style content compresses


def test_snapshot_empty_tables(tmp_path):
    snap = Snapshot(
        instance_id=uuid.uuid4(),
        module_hash="00" * 32,
        pages=2,
        globals=(),
        pending_ids=(),
        memory=bytes(2 * PAGE_SIZE),
    )
    path = tmp_path / "x.wops"
    write_snapshot(path, snap)
    assert read_snapshot(path) == snap


def test_snapshot_rejects_bit_flip(tmp_path):
    path = tmp_path / "x.wops"
    write_snapshot(path, sample_snapshot())
    raw = bytearray(path.read_bytes())
    raw[30] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptSnapshot, match="checksum"):
        read_snapshot(path)


def test_snapshot_rejects_truncation(tmp_path):
    path = tmp_path / "x.wops"
    write_snapshot(path, sample_snapshot())
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CorruptSnapshot):
        read_snapshot(path)


def test_snapshot_rejects_bad_magic(tmp_path):
    path = tmp_path / "x.wops"
    write_snapshot(path, sample_snapshot())
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptSnapshot, match="magic"):
        read_snapshot(path)


def test_snapshot_rejects_future_version(tmp_path):
    path = tmp_path / "x.wops"
    write_snapshot(path, sample_snapshot())
    raw = bytearray(path.read_bytes())
    struct.pack_into("<H", raw, 4, 99)
    struct.pack_into("<I", raw, len(raw) - 4, zlib.crc32(bytes(raw[:-4])))
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptSnapshot, match="version"):
        read_snapshot(path)


def test_snapshot_rejects_wrong_payload_size_declaration(tmp_path):
    snap = sample_snapshot()
    path = tmp_path / "x.wops"
    write_snapshot(path, snap, compress=False)
    raw = bytearray(path.read_bytes())
    # The payload length field sits 9 bytes before the payload; shrink it.
    offset = len(raw) - 4 - len(snap.memory) - 8
    struct.pack_into("<Q", raw, offset, len(snap.memory) - 1)
    struct.pack_into("<I", raw, len(raw) - 4, zlib.crc32(bytes(raw[:-4])))
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptSnapshot):
        read_snapshot(path)


def test_snapshot_write_validates_shape(tmp_path):
    snap = sample_snapshot()
    with pytest.raises(SnapshotError, match="pages"):
        write_snapshot(
            tmp_path / "bad.wops",
            Snapshot(
                instance_id=snap.instance_id,
                module_hash=snap.module_hash,
                pages=3,
                globals=(),
                pending_ids=(),
                memory=snap.memory,
            ),
        )
    with pytest.raises(SnapshotError, match="hash"):
        write_snapshot(
            tmp_path / "bad2.wops",
            Snapshot(
                instance_id=snap.instance_id,
                module_hash="abcd",
                pages=snap.pages,
                globals=(),
                pending_ids=(),
                memory=snap.memory,
            ),
        )


def test_snapshot_missing_file_is_snapshot_error(tmp_path):
    with pytest.raises(SnapshotError):
        read_snapshot(tmp_path / "absent.wops")
