"""Compiled-module cache keyed by the sha-256 of the module source.

Compilation (parse + lower + ABI validation) happens at most once per source
hash; the lowered form is persisted next to a small JSON metadata file and
re-used by later processes:

    <hash>.cwasm   b"WOPC" | u16 format | u16 len | engine version | marshal payload
    <hash>.meta    {"source_len": ..., "created_at": ..., "engine_version": ...}

A cache file whose magic, format, or engine version does not match — or whose
payload fails to deserialize — is treated as a miss and silently rebuilt, so
engine upgrades and torn writes both self-heal.

ABI validation enforces the host/guest contract from `wasmop.abi` by name:
required exports with exact signatures, an exported memory, and imports drawn
only from the `env` host functions and the WASI subset the engine provides.
Violations raise :class:`AbiError` naming the offending symbol.
"""

from __future__ import annotations

import hashlib
import json
import marshal
import os
import struct
import time
from pathlib import Path

from wasmop import abi
from wasmop.wasm import ENGINE_VERSION, LoweredModule, lower, parse_module
from wasmop.wasm import opcodes as op
from wasmop.wasm import wasi

CACHE_MAGIC = b"WOPC"
CACHE_FORMAT = 1

_VT_NAMES = {op.I32: "i32", op.I64: "i64", op.F32: "f32", op.F64: "f64"}


class AbiError(Exception):
    """The module violates the host/guest contract; `symbol` names where."""

    def __init__(self, message: str, symbol: str):
        self.symbol = symbol
        super().__init__(f"{symbol}: {message}")


def module_hash(wasm_bytes: bytes) -> str:
    return hashlib.sha256(wasm_bytes).hexdigest()


def _sig_names(
    sig: tuple[tuple[int, ...], tuple[int, ...]],
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    params, results = sig
    return (
        tuple(_VT_NAMES.get(v, hex(v)) for v in params),
        tuple(_VT_NAMES.get(v, hex(v)) for v in results),
    )


def check_module_abi(lowered: LoweredModule) -> None:
    exports = lowered.export_map()

    for name in abi.REQUIRED_EXPORTS:
        if name not in exports:
            raise AbiError("required export missing", name)
    mem = exports.get(abi.MEMORY_EXPORT)
    if mem is None or mem[0] != "memory" or lowered.memory is None:
        raise AbiError("exported linear memory required", abi.MEMORY_EXPORT)

    for name, want in abi.GUEST_EXPORTS.items():
        entry = exports.get(name)
        if entry is None:
            continue  # only the REQUIRED_EXPORTS must exist
        kind, index = entry
        if kind != "func":
            raise AbiError(f"export must be a function, is {kind}", name)
        if _sig_names(lowered.func_signature(index)) != want:
            got = _sig_names(lowered.func_signature(index))
            raise AbiError(f"export signature {got} does not match {want}", name)

    for module, name, type_idx in lowered.imports:
        symbol = f"{module}.{name}"
        if module == abi.HOST_IMPORT_MODULE:
            want = abi.HOST_IMPORTS.get(name)
        elif module == wasi.WASI_MODULE:
            want = wasi.SIGNATURES.get(name)
        else:
            raise AbiError("import from unknown module", symbol)
        if want is None:
            raise AbiError("unknown import", symbol)
        got = _sig_names(lowered.types[type_idx])
        if got != want:
            raise AbiError(f"import signature {got} does not match {want}", symbol)


def compile_module(wasm_bytes: bytes) -> LoweredModule:
    """Parse, lower, and ABI-check one module (no caching)."""
    lowered = lower(parse_module(wasm_bytes), ENGINE_VERSION)
    check_module_abi(lowered)
    return lowered


class ModuleCache:
    """Two-level (memory, disk) cache of compiled controller modules."""

    def __init__(self, directory: Path | str):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0
        self._loaded: dict[str, LoweredModule] = {}

    def cache_path(self, digest: str) -> Path:
        return self.directory / f"{digest}.cwasm"

    def meta_path(self, digest: str) -> Path:
        return self.directory / f"{digest}.meta"

    def compile(self, wasm_bytes: bytes) -> tuple[str, LoweredModule]:
        digest = module_hash(wasm_bytes)
        cached = self.get(digest)
        if cached is not None:
            self.hits += 1
            return digest, cached
        self.misses += 1
        lowered = compile_module(wasm_bytes)
        self._persist(digest, lowered, len(wasm_bytes))
        self._loaded[digest] = lowered
        return digest, lowered

    def get(self, digest: str) -> LoweredModule | None:
        """Fetch a compiled module by hash from memory or disk, else None."""
        lowered = self._loaded.get(digest)
        if lowered is None:
            lowered = self._load_file(digest)
            if lowered is not None:
                self._loaded[digest] = lowered
        return lowered

    def stats(self) -> dict[str, int]:
        return {"hits": self.hits, "misses": self.misses, "resident": len(self._loaded)}

    def _load_file(self, digest: str) -> LoweredModule | None:
        try:
            blob = self.cache_path(digest).read_bytes()
        except OSError:
            return None
        try:
            if blob[:4] != CACHE_MAGIC:
                return None
            fmt, ver_len = struct.unpack_from("<HH", blob, 4)
            if fmt != CACHE_FORMAT:
                return None
            end = 8 + ver_len
            if blob[8:end].decode("utf-8") != ENGINE_VERSION:
                return None
            payload = marshal.loads(blob[end:])
            return LoweredModule.from_payload(payload)
        except (ValueError, TypeError, EOFError, IndexError, struct.error):
            return None

    def _persist(self, digest: str, lowered: LoweredModule, source_len: int) -> None:
        version = ENGINE_VERSION.encode("utf-8")
        blob = (
            CACHE_MAGIC
            + struct.pack("<HH", CACHE_FORMAT, len(version))
            + version
            + marshal.dumps(lowered.to_payload())
        )
        _atomic_write(self.cache_path(digest), blob)
        meta = {
            "source_len": source_len,
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "engine_version": ENGINE_VERSION,
        }
        _atomic_write(self.meta_path(digest), json.dumps(meta, indent=0).encode())


def _atomic_write(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
