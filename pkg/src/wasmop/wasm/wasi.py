"""Minimal WASI preview1 subset.

Enough surface for toolchain-produced guests to boot and print: fd_write on
stdout/stderr, deterministic random_get (seeded hash stream so replays are
reproducible), wall/monotonic clocks, empty args/environ, and proc_exit.
Everything else a module might import is simply absent and fails the import
check with its name.
"""

from __future__ import annotations

import hashlib
import struct
import time
from typing import Callable

from wasmop.wasm.interp import Instance, ProcExit

WASI_MODULE = "wasi_snapshot_preview1"

# errno values from the WASI spec
_ERRNO_SUCCESS = 0
_ERRNO_BADF = 8
_ERRNO_INVAL = 28

SIGNATURES: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "args_get": (("i32", "i32"), ("i32",)),
    "args_sizes_get": (("i32", "i32"), ("i32",)),
    "environ_get": (("i32", "i32"), ("i32",)),
    "environ_sizes_get": (("i32", "i32"), ("i32",)),
    "clock_time_get": (("i32", "i64", "i32"), ("i32",)),
    "fd_close": (("i32",), ("i32",)),
    "fd_fdstat_get": (("i32", "i32"), ("i32",)),
    "fd_seek": (("i32", "i64", "i32", "i32"), ("i32",)),
    "fd_write": (("i32", "i32", "i32", "i32"), ("i32",)),
    "proc_exit": (("i32",), ()),
    "random_get": (("i32", "i32"), ("i32",)),
    "sched_yield": ((), ("i32",)),
}

LogSink = Callable[[int, bytes], None]


class _RandomStream:
    """Deterministic byte stream: sha256(seed || counter) blocks."""

    def __init__(self, seed: bytes):
        self._seed = seed
        self._counter = 0

    def take(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            block = hashlib.sha256(
                self._seed + self._counter.to_bytes(8, "little")
            ).digest()
            self._counter += 1
            out.extend(block)
        return bytes(out[:n])


def make_wasi_imports(
    *,
    write_sink: LogSink | None = None,
    random_seed: bytes = b"",
) -> dict[tuple[str, str], object]:
    rng = _RandomStream(random_seed)

    def fd_write(inst: Instance, fd: int, iovs: int, iovs_len: int, nwritten_ptr: int) -> int:
        if fd not in (1, 2):
            return _ERRNO_BADF
        total = 0
        chunks = []
        for i in range(iovs_len):
            base, length = struct.unpack("<II", inst.read_mem(iovs + i * 8, 8))
            chunks.append(inst.read_mem(base, length))
            total += length
        if write_sink is not None:
            write_sink(fd, b"".join(chunks))
        inst.write_mem(nwritten_ptr, struct.pack("<I", total))
        return _ERRNO_SUCCESS

    def proc_exit(inst: Instance, code: int) -> None:
        raise ProcExit(code)

    def random_get(inst: Instance, buf: int, length: int) -> int:
        inst.write_mem(buf, rng.take(length))
        return _ERRNO_SUCCESS

    def clock_time_get(inst: Instance, clock_id: int, precision: int, out_ptr: int) -> int:
        if clock_id == 0:
            ns = time.time_ns()
        elif clock_id in (1, 2, 3):
            ns = time.monotonic_ns()
        else:
            return _ERRNO_INVAL
        inst.write_mem(out_ptr, struct.pack("<Q", ns))
        return _ERRNO_SUCCESS

    def sizes_get_zero(inst: Instance, count_ptr: int, buf_size_ptr: int) -> int:
        inst.write_mem(count_ptr, b"\x00\x00\x00\x00")
        inst.write_mem(buf_size_ptr, b"\x00\x00\x00\x00")
        return _ERRNO_SUCCESS

    def get_nothing(inst: Instance, a: int, b: int) -> int:
        return _ERRNO_SUCCESS

    def fd_close(inst: Instance, fd: int) -> int:
        return _ERRNO_SUCCESS

    def fd_fdstat_get(inst: Instance, fd: int, out_ptr: int) -> int:
        if fd not in (1, 2):
            return _ERRNO_BADF
        # filetype=character_device, no flags, no rights
        inst.write_mem(out_ptr, struct.pack("<BxHIQQ", 2, 0, 0, 0, 0))
        return _ERRNO_SUCCESS

    def fd_seek(inst: Instance, fd: int, offset: int, whence: int, out_ptr: int) -> int:
        return _ERRNO_BADF

    def sched_yield(inst: Instance) -> int:
        return _ERRNO_SUCCESS

    return {
        (WASI_MODULE, "args_get"): get_nothing,
        (WASI_MODULE, "args_sizes_get"): sizes_get_zero,
        (WASI_MODULE, "environ_get"): get_nothing,
        (WASI_MODULE, "environ_sizes_get"): sizes_get_zero,
        (WASI_MODULE, "clock_time_get"): clock_time_get,
        (WASI_MODULE, "fd_close"): fd_close,
        (WASI_MODULE, "fd_fdstat_get"): fd_fdstat_get,
        (WASI_MODULE, "fd_seek"): fd_seek,
        (WASI_MODULE, "fd_write"): fd_write,
        (WASI_MODULE, "proc_exit"): proc_exit,
        (WASI_MODULE, "random_get"): random_get,
        (WASI_MODULE, "sched_yield"): sched_yield,
    }
