"""Flat-code interpreter with mmap-backed linear memory.

Execution model: lowered function bodies are bound once per module into
lists of (handler, a, b) triples; the dispatch loop is

    while pc >= 0:
        ins = code[pc]
        pc = ins[0](inst, stack, locs, pc, ins[1], ins[2])

Values live in the unsigned domain (i32 in [0, 2^32), i64 in [0, 2^64));
signed operators convert at the boundary. RETURN hands results back by
truncating the operand stack and returning pc -1.

Linear memory sits in an anonymous mmap so releasing an instance
(`Instance.release`) returns the pages to the OS immediately instead of
parking them in the allocator: resident memory actually drops when a
controller is swapped out, which the host's unload accounting relies on.

The watchdog is a per-turn deadline checked on loop back-edges and calls
(every 256 such steps), so straight-line code pays nothing for it.
"""

from __future__ import annotations

import mmap
import operator as _op_mod
from time import monotonic as _monotonic
from weakref import WeakKeyDictionary

from wasmop.wasm import opcodes as op
from wasmop.wasm.lower import BR_BACK, BR_IF_BACK, BR_IF_Z, LoweredModule

PAGE_SIZE = 65536

_U32 = 0xFFFFFFFF
_U64 = 0xFFFFFFFFFFFFFFFF


def _anon_map(size: int) -> mmap.mmap:
    # MAP_PRIVATE is load-bearing: the default shared anonymous mapping is
    # backed by a fixed-size shmem object, so growing it via resize() extends
    # the VMA but not the object, and touching the new pages raises SIGBUS.
    # Private anonymous memory zero-fills on demand after mremap.
    return mmap.mmap(-1, size, flags=mmap.MAP_PRIVATE | mmap.MAP_ANONYMOUS)


class Trap(Exception):
    """Guest execution aborted; the instance must be considered poisoned."""

    @property
    def reason(self) -> str:
        return str(self)


class ProcExit(Exception):
    """Guest requested termination with an exit code (WASI proc_exit)."""

    def __init__(self, code: int):
        self.code = code
        super().__init__(f"proc_exit({code})")


class LinkError(Exception):
    """Instantiation failed before any guest code ran."""


class LinearMemory:
    __slots__ = ("data", "size", "pages", "max_pages")

    def __init__(self, min_pages: int, max_pages: int | None, cap_pages: int):
        limit = cap_pages if max_pages is None else min(max_pages, cap_pages)
        if min_pages > limit:
            raise LinkError(f"memory minimum {min_pages} pages exceeds limit {limit}")
        self.max_pages = limit
        self.pages = min_pages
        self.size = min_pages * PAGE_SIZE
        self.data = _anon_map(self.size) if self.size else None

    def grow(self, delta_pages: int) -> int:
        new_pages = self.pages + delta_pages
        if new_pages > self.max_pages:
            return _U32
        old = self.pages
        if delta_pages == 0:
            return old
        new_size = new_pages * PAGE_SIZE
        if self.data is None:
            self.data = _anon_map(new_size)
        else:
            try:
                self.data.resize(new_size)
            except (OSError, SystemError, ValueError):
                grown = _anon_map(new_size)
                grown[: self.size] = self.data[: self.size]
                self.data.close()
                self.data = grown
        self.pages = new_pages
        self.size = new_size
        return old

    def read(self, addr: int, length: int) -> bytes:
        if addr < 0 or length < 0 or addr + length > self.size:
            raise Trap("out of bounds memory access")
        if length == 0:
            return b""
        return self.data[addr : addr + length]

    def write(self, addr: int, payload: bytes) -> None:
        if addr < 0 or addr + len(payload) > self.size:
            raise Trap("out of bounds memory access")
        if payload:
            self.data[addr : addr + len(payload)] = payload

    def snapshot(self) -> bytes:
        return b"" if self.data is None else self.data[: self.size]

    def restore(self, pages: int, payload: bytes) -> None:
        if pages < self.pages:
            raise Trap("snapshot smaller than initial memory")
        if pages > self.pages and self.grow(pages - self.pages) == _U32:
            raise Trap("snapshot exceeds memory limit")
        if len(payload) != self.size:
            raise Trap("snapshot length disagrees with page count")
        self.write(0, payload)

    def close(self) -> None:
        if self.data is not None:
            self.data.close()
            self.data = None
        self.size = 0


# --- handlers ---------------------------------------------------------------
# Uniform signature: (inst, stack, locs, pc, a, b) -> next pc; -1 ends the
# function with its results as the remaining stack tail.


def _h_unreachable(inst, stack, locs, pc, a, b):
    raise Trap("unreachable executed")


def _h_drop(inst, stack, locs, pc, a, b):
    stack.pop()
    return pc + 1


def _h_select(inst, stack, locs, pc, a, b):
    c = stack.pop()
    v2 = stack.pop()
    if not c:
        stack[-1] = v2
    return pc + 1


def _h_br(inst, stack, locs, pc, a, b):
    arity, keep = b
    if arity:
        stack[keep:] = stack[-arity:]
    else:
        del stack[keep:]
    return a


def _h_br_back(inst, stack, locs, pc, a, b):
    steps = inst.steps = inst.steps + 1
    if not steps & 255:
        d = inst.deadline
        if d is not None and _monotonic() >= d:
            raise Trap("watchdog deadline exceeded")
    del stack[b[1] :]  # loop labels carry no values
    return a


def _h_br_if(inst, stack, locs, pc, a, b):
    if not stack.pop():
        return pc + 1
    arity, keep = b
    if arity:
        stack[keep:] = stack[-arity:]
    else:
        del stack[keep:]
    return a


def _h_br_if_back(inst, stack, locs, pc, a, b):
    if not stack.pop():
        return pc + 1
    steps = inst.steps = inst.steps + 1
    if not steps & 255:
        d = inst.deadline
        if d is not None and _monotonic() >= d:
            raise Trap("watchdog deadline exceeded")
    del stack[b[1] :]
    return a


def _h_br_if_z(inst, stack, locs, pc, a, b):
    if stack.pop():
        return pc + 1
    arity, keep = b
    if arity:
        stack[keep:] = stack[-arity:]
    else:
        del stack[keep:]
    return a


def _h_br_table(inst, stack, locs, pc, a, b):
    steps = inst.steps = inst.steps + 1
    if not steps & 255:
        d = inst.deadline
        if d is not None and _monotonic() >= d:
            raise Trap("watchdog deadline exceeded")
    idx = stack.pop()
    entry = a[idx] if idx < len(a) - 1 else a[-1]
    target, arity, keep = entry
    if arity:
        stack[keep:] = stack[-arity:]
    else:
        del stack[keep:]
    return target


def _h_return(inst, stack, locs, pc, a, b):
    if a:
        stack[:] = stack[-a:]
    else:
        stack.clear()
    return -1


def _h_call(inst, stack, locs, pc, a, b):
    fe = inst.funcs[a]
    if b:
        args = stack[-b:]
        del stack[-b:]
    else:
        args = []
    if fe[0]:
        res = fe[1](inst, *args)
        if fe[3]:
            stack.append(res)
    else:
        res = _run(inst, fe, args)
        if res:
            stack.extend(res)
    return pc + 1


def _h_local_get(inst, stack, locs, pc, a, b):
    stack.append(locs[a])
    return pc + 1


def _h_local_set(inst, stack, locs, pc, a, b):
    locs[a] = stack.pop()
    return pc + 1


def _h_local_tee(inst, stack, locs, pc, a, b):
    locs[a] = stack[-1]
    return pc + 1


def _h_global_get(inst, stack, locs, pc, a, b):
    stack.append(inst.globals[a])
    return pc + 1


def _h_global_set(inst, stack, locs, pc, a, b):
    inst.globals[a] = stack.pop()
    return pc + 1


# Loads / stores. `a` is the static offset.

def _h_i32_load(inst, stack, locs, pc, a, b):
    m = inst.mem
    addr = stack[-1] + a
    if addr + 4 > m.size:
        raise Trap("out of bounds memory access")
    stack[-1] = int.from_bytes(m.data[addr : addr + 4], "little")
    return pc + 1


def _h_i64_load(inst, stack, locs, pc, a, b):
    m = inst.mem
    addr = stack[-1] + a
    if addr + 8 > m.size:
        raise Trap("out of bounds memory access")
    stack[-1] = int.from_bytes(m.data[addr : addr + 8], "little")
    return pc + 1


def _make_load_narrow(width: int, signed: bool):
    sign_bit = 1 << (width * 8 - 1)
    wrap = 1 << (width * 8)

    def handler(inst, stack, locs, pc, a, b):
        m = inst.mem
        addr = stack[-1] + a
        if addr + width > m.size:
            raise Trap("out of bounds memory access")
        v = int.from_bytes(m.data[addr : addr + width], "little")
        if signed and v & sign_bit:
            v -= wrap
            v &= _U64
        stack[-1] = v
        return pc + 1

    return handler


def _make_load_narrow32(width: int, signed: bool):
    sign_bit = 1 << (width * 8 - 1)
    wrap = 1 << (width * 8)

    def handler(inst, stack, locs, pc, a, b):
        m = inst.mem
        addr = stack[-1] + a
        if addr + width > m.size:
            raise Trap("out of bounds memory access")
        v = int.from_bytes(m.data[addr : addr + width], "little")
        if signed and v & sign_bit:
            v = (v - wrap) & _U32
        stack[-1] = v
        return pc + 1

    return handler


def _make_store(width: int):
    mask = (1 << (width * 8)) - 1

    def handler(inst, stack, locs, pc, a, b):
        v = stack.pop()
        m = inst.mem
        addr = stack.pop() + a
        if addr + width > m.size:
            raise Trap("out of bounds memory access")
        m.data[addr : addr + width] = (v & mask).to_bytes(width, "little")
        return pc + 1

    return handler


def _h_memory_size(inst, stack, locs, pc, a, b):
    stack.append(inst.mem.pages)
    return pc + 1


def _h_memory_grow(inst, stack, locs, pc, a, b):
    stack[-1] = inst.mem.grow(stack[-1])
    return pc + 1


def _h_memory_copy(inst, stack, locs, pc, a, b):
    n = stack.pop()
    src = stack.pop()
    dst = stack.pop()
    m = inst.mem
    if dst + n > m.size or src + n > m.size:
        raise Trap("out of bounds memory access")
    if n:
        m.data[dst : dst + n] = m.data[src : src + n]
    return pc + 1


def _h_memory_fill(inst, stack, locs, pc, a, b):
    n = stack.pop()
    val = stack.pop()
    dst = stack.pop()
    m = inst.mem
    if dst + n > m.size:
        raise Trap("out of bounds memory access")
    if n:
        m.data[dst : dst + n] = bytes([val & 0xFF]) * n
    return pc + 1


def _h_const(inst, stack, locs, pc, a, b):
    stack.append(a)
    return pc + 1


# Comparison / arithmetic helpers.

def _s32(v: int) -> int:
    return v - ((v & 0x80000000) << 1)


def _s64(v: int) -> int:
    return v - ((v & 0x8000000000000000) << 1)


def _h_i32_eqz(inst, stack, locs, pc, a, b):
    stack[-1] = 1 if stack[-1] == 0 else 0
    return pc + 1


def _make_cmp(signed: bool, is64: bool, rel):
    conv = (_s64 if is64 else _s32) if signed else None

    def handler(inst, stack, locs, pc, a, b):
        r = stack.pop()
        l = stack[-1]
        if conv:
            l = conv(l)
            r = conv(r)
        stack[-1] = 1 if rel(l, r) else 0
        return pc + 1

    return handler


def _make_binop(mask: int, fn):
    def handler(inst, stack, locs, pc, a, b):
        r = stack.pop()
        stack[-1] = fn(stack[-1], r) & mask
        return pc + 1

    return handler


def _h_div_u(inst, stack, locs, pc, a, b):
    r = stack.pop()
    if r == 0:
        raise Trap("integer divide by zero")
    stack[-1] = stack[-1] // r
    return pc + 1


def _h_rem_u(inst, stack, locs, pc, a, b):
    r = stack.pop()
    if r == 0:
        raise Trap("integer divide by zero")
    stack[-1] = stack[-1] % r
    return pc + 1


def _make_div_s(is64: bool):
    conv = _s64 if is64 else _s32
    mask = _U64 if is64 else _U32
    overflow = 1 << (63 if is64 else 31)

    def handler(inst, stack, locs, pc, a, b):
        r = conv(stack.pop())
        if r == 0:
            raise Trap("integer divide by zero")
        l = conv(stack[-1])
        q = abs(l) // abs(r)
        if (l < 0) != (r < 0):
            q = -q
        if q == overflow:
            raise Trap("integer overflow")
        stack[-1] = q & mask
        return pc + 1

    return handler


def _make_rem_s(is64: bool):
    conv = _s64 if is64 else _s32
    mask = _U64 if is64 else _U32

    def handler(inst, stack, locs, pc, a, b):
        r = conv(stack.pop())
        if r == 0:
            raise Trap("integer divide by zero")
        l = conv(stack[-1])
        m = abs(l) % abs(r)
        if l < 0:
            m = -m
        stack[-1] = m & mask
        return pc + 1

    return handler


def _make_shift(is64: bool, kind: str):
    bits = 64 if is64 else 32
    mask = _U64 if is64 else _U32
    conv = _s64 if is64 else _s32

    def handler(inst, stack, locs, pc, a, b):
        c = stack.pop() & (bits - 1)
        v = stack[-1]
        if kind == "shl":
            stack[-1] = (v << c) & mask
        elif kind == "shr_u":
            stack[-1] = v >> c
        elif kind == "shr_s":
            stack[-1] = (conv(v) >> c) & mask
        elif kind == "rotl":
            stack[-1] = ((v << c) | (v >> (bits - c))) & mask if c else v
        else:  # rotr
            stack[-1] = ((v >> c) | (v << (bits - c))) & mask if c else v
        return pc + 1

    return handler


def _make_unop(bits: int, kind: str):
    def handler(inst, stack, locs, pc, a, b):
        v = stack[-1]
        if kind == "clz":
            stack[-1] = bits - v.bit_length()
        elif kind == "ctz":
            stack[-1] = (v & -v).bit_length() - 1 if v else bits
        else:  # popcnt
            stack[-1] = v.bit_count()
        return pc + 1

    return handler


def _h_i32_wrap_i64(inst, stack, locs, pc, a, b):
    stack[-1] &= _U32
    return pc + 1


def _h_noop_conv(inst, stack, locs, pc, a, b):
    return pc + 1  # i64.extend_i32_u: unsigned domain needs no change


def _make_sign_extend(from_bits: int, mask: int):
    sign_bit = 1 << (from_bits - 1)
    wrap = 1 << from_bits
    low = wrap - 1

    def handler(inst, stack, locs, pc, a, b):
        v = stack[-1] & low
        if v & sign_bit:
            v -= wrap
        stack[-1] = v & mask
        return pc + 1

    return handler


def _build_handlers() -> dict:
    h = {
        op.UNREACHABLE: _h_unreachable,
        op.DROP: _h_drop,
        op.SELECT: _h_select,
        op.BR: _h_br,
        BR_BACK: _h_br_back,
        op.BR_IF: _h_br_if,
        BR_IF_BACK: _h_br_if_back,
        BR_IF_Z: _h_br_if_z,
        op.BR_TABLE: _h_br_table,
        op.RETURN: _h_return,
        op.CALL: _h_call,
        op.LOCAL_GET: _h_local_get,
        op.LOCAL_SET: _h_local_set,
        op.LOCAL_TEE: _h_local_tee,
        op.GLOBAL_GET: _h_global_get,
        op.GLOBAL_SET: _h_global_set,
        op.I32_LOAD: _h_i32_load,
        op.I64_LOAD: _h_i64_load,
        op.I32_LOAD8_S: _make_load_narrow32(1, True),
        op.I32_LOAD8_U: _make_load_narrow32(1, False),
        op.I32_LOAD16_S: _make_load_narrow32(2, True),
        op.I32_LOAD16_U: _make_load_narrow32(2, False),
        op.I64_LOAD8_S: _make_load_narrow(1, True),
        op.I64_LOAD8_U: _make_load_narrow(1, False),
        op.I64_LOAD16_S: _make_load_narrow(2, True),
        op.I64_LOAD16_U: _make_load_narrow(2, False),
        op.I64_LOAD32_S: _make_load_narrow(4, True),
        op.I64_LOAD32_U: _make_load_narrow(4, False),
        op.I32_STORE: _make_store(4),
        op.I64_STORE: _make_store(8),
        op.I32_STORE8: _make_store(1),
        op.I32_STORE16: _make_store(2),
        op.I64_STORE8: _make_store(1),
        op.I64_STORE16: _make_store(2),
        op.I64_STORE32: _make_store(4),
        op.MEMORY_SIZE: _h_memory_size,
        op.MEMORY_GROW: _h_memory_grow,
        op.MEMORY_COPY: _h_memory_copy,
        op.MEMORY_FILL: _h_memory_fill,
        op.I32_CONST: _h_const,
        op.I64_CONST: _h_const,
        op.I32_EQZ: _h_i32_eqz,
        op.I64_EQZ: _h_i32_eqz,
        op.I32_WRAP_I64: _h_i32_wrap_i64,
        op.I64_EXTEND_I32_U: _h_noop_conv,
        op.I64_EXTEND_I32_S: _make_sign_extend(32, _U64),
        op.I32_EXTEND8_S: _make_sign_extend(8, _U32),
        op.I32_EXTEND16_S: _make_sign_extend(16, _U32),
        op.I64_EXTEND8_S: _make_sign_extend(8, _U64),
        op.I64_EXTEND16_S: _make_sign_extend(16, _U64),
        op.I64_EXTEND32_S: _make_sign_extend(32, _U64),
    }
    eq, ne, lt, gt, le, ge = (_op_mod.eq, _op_mod.ne, _op_mod.lt,
                              _op_mod.gt, _op_mod.le, _op_mod.ge)
    for base, is64 in ((op.I32_EQ, False), (op.I64_EQ, True)):
        h[base + 0] = _make_cmp(False, is64, eq)
        h[base + 1] = _make_cmp(False, is64, ne)
        h[base + 2] = _make_cmp(True, is64, lt)
        h[base + 3] = _make_cmp(False, is64, lt)
        h[base + 4] = _make_cmp(True, is64, gt)
        h[base + 5] = _make_cmp(False, is64, gt)
        h[base + 6] = _make_cmp(True, is64, le)
        h[base + 7] = _make_cmp(False, is64, le)
        h[base + 8] = _make_cmp(True, is64, ge)
        h[base + 9] = _make_cmp(False, is64, ge)

    for mask, add_code in ((_U32, op.I32_ADD), (_U64, op.I64_ADD)):
        is64 = mask == _U64
        bits = 64 if is64 else 32
        h[add_code + 0] = _make_binop(mask, _op_mod.add)
        h[add_code + 1] = _make_binop(mask, _op_mod.sub)
        h[add_code + 2] = _make_binop(mask, _op_mod.mul)
        h[add_code + 3] = _make_div_s(is64)
        h[add_code + 4] = _h_div_u
        h[add_code + 5] = _make_rem_s(is64)
        h[add_code + 6] = _h_rem_u
        h[add_code + 7] = _make_binop(mask, _op_mod.and_)
        h[add_code + 8] = _make_binop(mask, _op_mod.or_)
        h[add_code + 9] = _make_binop(mask, _op_mod.xor)
        h[add_code + 10] = _make_shift(is64, "shl")
        h[add_code + 11] = _make_shift(is64, "shr_s")
        h[add_code + 12] = _make_shift(is64, "shr_u")
        h[add_code + 13] = _make_shift(is64, "rotl")
        h[add_code + 14] = _make_shift(is64, "rotr")
        clz_code = op.I32_CLZ if not is64 else op.I64_CLZ
        h[clz_code + 0] = _make_unop(bits, "clz")
        h[clz_code + 1] = _make_unop(bits, "ctz")
        h[clz_code + 2] = _make_unop(bits, "popcnt")
    return h


HANDLERS = _build_handlers()

_BOUND: "WeakKeyDictionary[LoweredModule, list]" = WeakKeyDictionary()


def _bound_code(lowered: LoweredModule) -> list:
    bound = _BOUND.get(lowered)
    if bound is None:
        bound = [
            tuple((HANDLERS[code], a, b) for code, a, b in f.code) for f in lowered.funcs
        ]
        _BOUND[lowered] = bound
    return bound


def _run(inst: "Instance", fe: tuple, args: list) -> list:
    depth = inst.depth = inst.depth + 1
    if depth > inst.max_depth:
        raise Trap("call stack exhausted")
    steps = inst.steps = inst.steps + 1
    if not steps & 255:
        d = inst.deadline
        if d is not None and _monotonic() >= d:
            raise Trap("watchdog deadline exceeded")
    if fe[4]:
        args = args + [0] * fe[4]
    code = fe[1]
    stack: list = []
    pc = 0
    while pc >= 0:
        ins = code[pc]
        pc = ins[0](inst, stack, args, pc, ins[1], ins[2])
    inst.depth = depth - 1
    return stack


class Instance:
    """One live guest: funcs table, globals, linear memory."""

    def __init__(
        self,
        lowered: LoweredModule,
        imports: dict[tuple[str, str], object] | None = None,
        *,
        cap_pages: int = 4096,
        max_depth: int = 192,
        deadline: float | None = None,
    ):
        imports = imports or {}
        self.lowered = lowered
        self.deadline: float | None = deadline
        self.steps = 0
        self.depth = 0
        self.max_depth = max_depth
        self.globals = [init for _, _, init in lowered.globals]
        self.mem: LinearMemory | None = (
            LinearMemory(lowered.memory[0], lowered.memory[1], cap_pages)
            if lowered.memory
            else None
        )
        self.released = False

        funcs: list[tuple] = []
        for module, name, type_idx in lowered.imports:
            fn = imports.get((module, name))
            if fn is None:
                raise LinkError(f"missing import {module}.{name}")
            params, results = lowered.types[type_idx]
            funcs.append((True, fn, len(params), len(results), 0))
        for bound, f in zip(_bound_code(lowered), lowered.funcs):
            funcs.append((False, bound, f.n_params, f.n_results, f.n_locals))
        self.funcs = funcs
        self._exports = lowered.export_map()

        for offset, blob in lowered.data:
            if self.mem is None or offset + len(blob) > self.mem.size:
                raise Trap("data segment out of bounds")
            self.mem.write(offset, blob)

        if lowered.start is not None:
            self._invoke(lowered.start, [])

    def _invoke(self, func_index: int, args: list) -> list:
        fe = self.funcs[func_index]
        if fe[0]:
            res = fe[1](self, *args)
            return [res] if fe[3] else []
        return _run(self, fe, args)

    def export_func_index(self, name: str) -> int:
        entry = self._exports.get(name)
        if entry is None or entry[0] != "func":
            raise LinkError(f"no exported function {name!r}")
        return entry[1]

    def has_export(self, name: str) -> bool:
        return name in self._exports

    def call(self, name: str, *args: int, deadline: float | None = None) -> list:
        if self.released:
            raise Trap("instance released")
        idx = self.export_func_index(name)
        params, _ = self.lowered.func_signature(idx)
        if len(args) != len(params):
            raise LinkError(f"{name} takes {len(params)} arguments, got {len(args)}")
        masked = [
            int(v) & (_U32 if vt == op.I32 else _U64) for v, vt in zip(args, params)
        ]
        if deadline is not None:
            self.deadline = deadline
        self.depth = 0
        return self._invoke(idx, masked)

    def set_deadline(self, deadline: float | None) -> None:
        self.deadline = deadline

    def read_mem(self, addr: int, length: int) -> bytes:
        if self.mem is None:
            raise Trap("module has no memory")
        return self.mem.read(addr, length)

    def write_mem(self, addr: int, payload: bytes) -> None:
        if self.mem is None:
            raise Trap("module has no memory")
        self.mem.write(addr, payload)

    def global_values(self) -> list[tuple[int, int, int]]:
        """(index, valtype, value) for every module-defined global."""
        return [
            (i, meta[0], self.globals[i]) for i, meta in enumerate(self.lowered.globals)
        ]

    def restore_globals(self, entries: list[tuple[int, int, int]]) -> None:
        metas = self.lowered.globals
        if len(entries) != len(metas):
            raise Trap("snapshot global count disagrees with module")
        for index, valtype, value in entries:
            if index >= len(metas) or metas[index][0] != valtype:
                raise Trap("snapshot global shape disagrees with module")
            if metas[index][1]:
                self.globals[index] = value
            elif self.globals[index] != value:
                raise Trap("snapshot changes an immutable global")

    def release(self) -> None:
        if self.mem is not None:
            self.mem.close()
        self.released = True
