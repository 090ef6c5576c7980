"""wasm32 binary emitter.

Instruction input format mirrors the parser's decoded form exactly — a body
is a sequence of tuples like (I32_CONST, 5), (I32_LOAD, align, offset),
(BLOCK, None), (BR_TABLE, (0, 1), 2) — so built modules round-trip through
`parse_module` unchanged.
"""

from __future__ import annotations

from wasmop.wasm import leb128, opcodes
from wasmop.wasm.structure import FuncType


class BuildError(ValueError):
    pass


def _limits(minimum: int, maximum: int | None) -> bytes:
    if maximum is None:
        return b"\x00" + leb128.write_u(minimum)
    return b"\x01" + leb128.write_u(minimum) + leb128.write_u(maximum)


def _name(s: str) -> bytes:
    raw = s.encode("utf-8")
    return leb128.write_u(len(raw)) + raw


def encode_instr(instr: tuple) -> bytes:
    op = instr[0]
    entry = opcodes.OPCODES.get(op)
    if entry is None:
        raise BuildError(f"unknown opcode 0x{op:02x}")
    name, shape = entry
    head = bytes([0xFC]) + leb128.write_u(op & 0xFF) if op > 0xFF else bytes([op])
    if shape == opcodes.IMM_NONE or op in (opcodes.MEMORY_SIZE, opcodes.MEMORY_GROW,
                                           opcodes.MEMORY_COPY, opcodes.MEMORY_FILL):
        if op == opcodes.MEMORY_COPY:
            return head + b"\x00\x00"
        if op in (opcodes.MEMORY_SIZE, opcodes.MEMORY_GROW, opcodes.MEMORY_FILL):
            return head + b"\x00"
        return head
    if shape == opcodes.IMM_BLOCK:
        bt = instr[1]
        if bt is None:
            return head + b"\x40"
        if isinstance(bt, int):
            return head + bytes([bt])
        raise BuildError("multi-value block types are not emitted")
    if shape == opcodes.IMM_IDX:
        return head + leb128.write_u(instr[1])
    if shape == opcodes.IMM_MEMARG:
        return head + leb128.write_u(instr[1]) + leb128.write_u(instr[2])
    if shape == opcodes.IMM_BRTABLE:
        targets, default = instr[1], instr[2]
        out = head + leb128.write_u(len(targets))
        for t in targets:
            out += leb128.write_u(t)
        return out + leb128.write_u(default)
    if shape == opcodes.IMM_I32:
        return head + leb128.write_s(instr[1])
    if shape == opcodes.IMM_I64:
        return head + leb128.write_s(instr[1])
    if shape in (opcodes.IMM_F32, opcodes.IMM_F64):
        return head + bytes(instr[1])
    if shape == opcodes.IMM_CALLIND:
        return head + leb128.write_u(instr[1]) + leb128.write_u(instr[2])
    raise BuildError(f"cannot emit {name}")


class ModuleBuilder:
    def __init__(self) -> None:
        self._types: list[FuncType] = []
        self._imports: list[tuple[str, str, int]] = []  # func imports only
        self._funcs: list[tuple[int, tuple[tuple[int, int], ...], tuple[tuple, ...]]] = []
        self._memory: tuple[int, int | None] | None = None
        self._globals: list[tuple[int, bool, tuple]] = []  # valtype, mutable, init instr
        self._exports: list[tuple[str, int, int]] = []  # name, kind code, index
        self._start: int | None = None
        self._data: list[tuple[int, bytes]] = []
        self._sealed_imports = False

    def type_index(self, params: tuple[int, ...], results: tuple[int, ...]) -> int:
        ft = FuncType(tuple(params), tuple(results))
        for i, existing in enumerate(self._types):
            if existing == ft:
                return i
        self._types.append(ft)
        return len(self._types) - 1

    def import_func(
        self, module: str, name: str, params: tuple[int, ...], results: tuple[int, ...]
    ) -> int:
        if self._sealed_imports:
            raise BuildError("imports must be declared before local functions")
        self._imports.append((module, name, self.type_index(params, results)))
        return len(self._imports) - 1

    def add_func(
        self,
        params: tuple[int, ...],
        results: tuple[int, ...],
        local_types: tuple[int, ...],
        body: list[tuple] | tuple[tuple, ...],
    ) -> int:
        self._sealed_imports = True
        # Compress locals into (count, type) runs.
        runs: list[tuple[int, int]] = []
        for vt in local_types:
            if runs and runs[-1][1] == vt:
                runs[-1] = (runs[-1][0] + 1, vt)
            else:
                runs.append((1, vt))
        body = tuple(body)
        if not body or body[-1][0] != opcodes.END:
            body = body + ((opcodes.END,),)
        self._funcs.append((self.type_index(params, results), tuple(runs), body))
        return len(self._imports) + len(self._funcs) - 1

    def add_memory(self, min_pages: int, max_pages: int | None = None) -> None:
        if self._memory is not None:
            raise BuildError("only one memory is supported")
        self._memory = (min_pages, max_pages)

    def add_global(self, valtype: int, mutable: bool, init_value: int) -> int:
        const_op = opcodes.I32_CONST if valtype == opcodes.I32 else opcodes.I64_CONST
        self._globals.append((valtype, mutable, (const_op, init_value)))
        return len(self._globals) - 1

    def export_func(self, name: str, index: int) -> None:
        self._exports.append((name, 0, index))

    def export_memory(self, name: str = "memory") -> None:
        self._exports.append((name, 2, 0))

    def export_global(self, name: str, index: int) -> None:
        self._exports.append((name, 3, index))

    def set_start(self, index: int) -> None:
        self._start = index

    def add_data(self, offset: int, data: bytes) -> None:
        if data:
            self._data.append((offset, bytes(data)))

    def _section(self, section_id: int, payload: bytes) -> bytes:
        return bytes([section_id]) + leb128.write_u(len(payload)) + payload

    def build(self) -> bytes:
        out = bytearray(b"\x00asm\x01\x00\x00\x00")

        if self._types:
            payload = leb128.write_u(len(self._types))
            for ft in self._types:
                payload += b"\x60"
                payload += leb128.write_u(len(ft.params)) + bytes(ft.params)
                payload += leb128.write_u(len(ft.results)) + bytes(ft.results)
            out += self._section(1, payload)

        if self._imports:
            payload = leb128.write_u(len(self._imports))
            for module, name, type_idx in self._imports:
                payload += _name(module) + _name(name) + b"\x00" + leb128.write_u(type_idx)
            out += self._section(2, payload)

        if self._funcs:
            payload = leb128.write_u(len(self._funcs))
            for type_idx, _, _ in self._funcs:
                payload += leb128.write_u(type_idx)
            out += self._section(3, payload)

        if self._memory is not None:
            out += self._section(5, leb128.write_u(1) + _limits(*self._memory))

        if self._globals:
            payload = leb128.write_u(len(self._globals))
            for valtype, mutable, init in self._globals:
                payload += bytes([valtype, 1 if mutable else 0])
                payload += encode_instr(init) + bytes([opcodes.END])
            out += self._section(6, payload)

        if self._exports:
            payload = leb128.write_u(len(self._exports))
            for name, kind, index in self._exports:
                payload += _name(name) + bytes([kind]) + leb128.write_u(index)
            out += self._section(7, payload)

        if self._start is not None:
            out += self._section(8, leb128.write_u(self._start))

        if self._funcs:
            payload = leb128.write_u(len(self._funcs))
            for _, local_runs, body in self._funcs:
                entry = leb128.write_u(len(local_runs))
                for count, vt in local_runs:
                    entry += leb128.write_u(count) + bytes([vt])
                for instr in body:
                    entry += encode_instr(instr)
                payload += leb128.write_u(len(entry)) + entry
            out += self._section(10, payload)

        if self._data:
            payload = leb128.write_u(len(self._data))
            for offset, data in self._data:
                payload += leb128.write_u(0)
                payload += encode_instr((opcodes.I32_CONST, offset)) + bytes([opcodes.END])
                payload += leb128.write_u(len(data)) + data
            out += self._section(11, payload)

        return bytes(out)
