"""wasm32 binary format decoder.

Produces a `structure.Module`; performs structural checks only (magic,
section framing, LEB bounds, balanced control nesting). Whether the decoded
instructions are supported is decided by `lower`.
"""

from __future__ import annotations

from wasmop.wasm import leb128, opcodes
from wasmop.wasm.structure import (
    DataSegment,
    ExportEntry,
    FuncBody,
    FuncType,
    GlobalEntry,
    ImportEntry,
    Limits,
    Module,
)

MAGIC = b"\x00asm"
VERSION = b"\x01\x00\x00\x00"

_VALTYPES = (opcodes.I32, opcodes.I64, opcodes.F32, opcodes.F64)
_MAX_FUNCS = 1 << 16
_MAX_BODY_INSTRS = 1 << 22


class ParseError(ValueError):
    pass


class _Reader:
    __slots__ = ("buf", "pos", "end")

    def __init__(self, buf: bytes, pos: int = 0, end: int | None = None):
        self.buf = buf
        self.pos = pos
        self.end = len(buf) if end is None else end

    def byte(self) -> int:
        if self.pos >= self.end:
            raise ParseError("unexpected end of section")
        b = self.buf[self.pos]
        self.pos += 1
        return b

    def raw(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise ParseError("unexpected end of section")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        try:
            val, self.pos = leb128.read_u(self.buf[: self.end], self.pos, 32)
        except leb128.LEBError as e:
            raise ParseError(str(e)) from None
        return val

    def s32(self) -> int:
        try:
            val, self.pos = leb128.read_s(self.buf[: self.end], self.pos, 32)
        except leb128.LEBError as e:
            raise ParseError(str(e)) from None
        return val

    def s64(self) -> int:
        try:
            val, self.pos = leb128.read_s(self.buf[: self.end], self.pos, 64)
        except leb128.LEBError as e:
            raise ParseError(str(e)) from None
        return val

    def s33(self) -> int:
        try:
            val, self.pos = leb128.read_s(self.buf[: self.end], self.pos, 33)
        except leb128.LEBError as e:
            raise ParseError(str(e)) from None
        return val

    def name(self) -> str:
        n = self.u32()
        try:
            return self.raw(n).decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("name is not valid UTF-8") from None

    def done(self) -> bool:
        return self.pos >= self.end


def _read_limits(r: _Reader) -> Limits:
    flag = r.byte()
    if flag == 0:
        return Limits(r.u32(), None)
    if flag == 1:
        mn = r.u32()
        mx = r.u32()
        if mx < mn:
            raise ParseError("limits maximum below minimum")
        return Limits(mn, mx)
    raise ParseError(f"bad limits flag 0x{flag:02x}")


def _read_valtype(r: _Reader) -> int:
    vt = r.byte()
    if vt not in _VALTYPES:
        raise ParseError(f"bad value type 0x{vt:02x}")
    return vt


def _read_blocktype(r: _Reader):
    # empty (0x40), a valtype byte, or an s33 type index
    b = r.buf[r.pos] if r.pos < r.end else None
    if b is None:
        raise ParseError("unexpected end of section")
    if b == 0x40:
        r.pos += 1
        return None
    if b in _VALTYPES:
        r.pos += 1
        return b
    idx = r.s33()
    if idx < 0:
        raise ParseError(f"bad block type 0x{b:02x}")
    return ("type", idx)


def _read_instrs(r: _Reader) -> tuple[tuple, ...]:
    """Decode an expression: instructions up to the end that closes it."""
    out: list[tuple] = []
    depth = 0
    while True:
        if len(out) > _MAX_BODY_INSTRS:
            raise ParseError("function body too large")
        op = r.byte()
        if op == 0xFC:
            op = 0xFC00 | r.u32()
        entry = opcodes.OPCODES.get(op)
        if entry is None:
            raise ParseError(f"unknown opcode 0x{op:02x}")
        name, shape = entry
        if op == opcodes.END:
            out.append((op,))
            if depth == 0:
                return tuple(out)
            depth -= 1
            continue
        if op in (opcodes.BLOCK, opcodes.LOOP, opcodes.IF):
            depth += 1
        if shape == opcodes.IMM_NONE:
            out.append((op,))
        elif shape == opcodes.IMM_BLOCK:
            out.append((op, _read_blocktype(r)))
        elif shape == opcodes.IMM_IDX:
            out.append((op, r.u32()))
        elif shape == opcodes.IMM_MEMARG:
            align = r.u32()
            offset = r.u32()
            out.append((op, align, offset))
        elif shape == opcodes.IMM_BRTABLE:
            n = r.u32()
            targets = tuple(r.u32() for _ in range(n))
            out.append((op, targets, r.u32()))
        elif shape == opcodes.IMM_I32:
            out.append((op, r.s32()))
        elif shape == opcodes.IMM_I64:
            out.append((op, r.s64()))
        elif shape == opcodes.IMM_F32:
            out.append((op, r.raw(4)))
        elif shape == opcodes.IMM_F64:
            out.append((op, r.raw(8)))
        elif shape == opcodes.IMM_MEM0:
            if r.byte() != 0:
                raise ParseError(f"{name}: nonzero memory index")
            out.append((op,))
        elif shape == opcodes.IMM_MEM00:
            if r.byte() != 0 or r.byte() != 0:
                raise ParseError(f"{name}: nonzero memory index")
            out.append((op,))
        elif shape == opcodes.IMM_CALLIND:
            type_idx = r.u32()
            table_idx = r.u32()
            out.append((op, type_idx, table_idx))
        elif shape == opcodes.IMM_SELECT_T:
            n = r.u32()
            out.append((op, tuple(_read_valtype(r) for _ in range(n))))
        elif shape == opcodes.IMM_IDX_MEM:
            data_idx = r.u32()
            if r.byte() != 0:
                raise ParseError(f"{name}: nonzero memory index")
            out.append((op, data_idx))
        else:  # pragma: no cover - table is exhaustive
            raise ParseError(f"unhandled immediate shape for {name}")


def _read_const_expr(r: _Reader) -> tuple[tuple, ...]:
    instrs = _read_instrs(r)
    if not instrs or instrs[-1][0] != opcodes.END:
        raise ParseError("constant expression missing end")
    return instrs[:-1]


def parse_module(buf: bytes) -> Module:
    if len(buf) < 8:
        raise ParseError("module shorter than header")
    if buf[:4] != MAGIC:
        raise ParseError("bad magic")
    if buf[4:8] != VERSION:
        raise ParseError(f"unsupported wasm version {buf[4:8].hex()}")

    mod = Module()
    seen: set[int] = set()
    r = _Reader(buf, 8)
    declared_count: int | None = None

    while not r.done():
        section_id = r.byte()
        size = r.u32()
        if r.pos + size > len(buf):
            raise ParseError(f"section {section_id} overruns module")
        body = _Reader(buf, r.pos, r.pos + size)
        r.pos += size

        if section_id == 0:  # custom: skip
            continue
        if section_id > 12:
            raise ParseError(f"unknown section id {section_id}")
        if section_id in seen:
            raise ParseError(f"duplicate section id {section_id}")
        seen.add(section_id)

        if section_id == 1:
            for _ in range(body.u32()):
                if body.byte() != 0x60:
                    raise ParseError("bad function type tag")
                params = tuple(_read_valtype(body) for _ in range(body.u32()))
                results = tuple(_read_valtype(body) for _ in range(body.u32()))
                mod.types.append(FuncType(params, results))
        elif section_id == 2:
            for _ in range(body.u32()):
                module = body.name()
                name = body.name()
                kind = body.byte()
                if kind == 0:
                    mod.imports.append(ImportEntry(module, name, "func", body.u32()))
                elif kind == 1:
                    body.byte()  # reftype
                    mod.imports.append(ImportEntry(module, name, "table", _read_limits(body)))
                elif kind == 2:
                    mod.imports.append(ImportEntry(module, name, "memory", _read_limits(body)))
                elif kind == 3:
                    vt = _read_valtype(body)
                    mut = body.byte()
                    mod.imports.append(ImportEntry(module, name, "global", (vt, bool(mut))))
                else:
                    raise ParseError(f"bad import kind {kind}")
        elif section_id == 3:
            n = body.u32()
            if n > _MAX_FUNCS:
                raise ParseError("too many functions")
            mod.func_type_indices = [body.u32() for _ in range(n)]
        elif section_id == 4:
            for _ in range(body.u32()):
                rt = body.byte()
                if rt not in (opcodes.FUNCREF, opcodes.EXTERNREF):
                    raise ParseError(f"bad reference type 0x{rt:02x}")
                mod.tables.append(_read_limits(body))
        elif section_id == 5:
            mod.memories = [_read_limits(body) for _ in range(body.u32())]
        elif section_id == 6:
            for _ in range(body.u32()):
                vt = _read_valtype(body)
                mut = body.byte()
                if mut not in (0, 1):
                    raise ParseError(f"bad mutability flag {mut}")
                init = _read_const_expr(body)
                mod.globals.append(GlobalEntry(vt, bool(mut), init))
        elif section_id == 7:
            kinds = {0: "func", 1: "table", 2: "memory", 3: "global"}
            for _ in range(body.u32()):
                name = body.name()
                kind = body.byte()
                if kind not in kinds:
                    raise ParseError(f"bad export kind {kind}")
                mod.exports.append(ExportEntry(name, kinds[kind], body.u32()))
        elif section_id == 8:
            mod.start = body.u32()
        elif section_id == 9:
            # Element segments are unsupported; count them so validation can
            # name the construct, without decoding their interior.
            mod.elem_count = body.u32()
            body.pos = body.end
        elif section_id == 10:
            n = body.u32()
            for _ in range(n):
                size = body.u32()
                entry = _Reader(buf, body.pos, body.pos + size)
                body.pos += size
                locals_: list[tuple[int, int]] = []
                total = 0
                for _ in range(entry.u32()):
                    count = entry.u32()
                    vt = _read_valtype(entry)
                    total += count
                    if total > 64_000:
                        raise ParseError("too many locals")
                    locals_.append((count, vt))
                instrs = _read_instrs(entry)
                if not entry.done():
                    raise ParseError("code entry has trailing bytes")
                mod.bodies.append(FuncBody(tuple(locals_), instrs))
        elif section_id == 11:
            for _ in range(body.u32()):
                flag = body.u32()
                if flag == 0:
                    offset = _read_const_expr(body)
                    mod.data.append(DataSegment("active", 0, offset, bytes(body.raw(body.u32()))))
                elif flag == 1:
                    mod.data.append(DataSegment("passive", 0, (), bytes(body.raw(body.u32()))))
                elif flag == 2:
                    mem_idx = body.u32()
                    offset = _read_const_expr(body)
                    mod.data.append(
                        DataSegment("active", mem_idx, offset, bytes(body.raw(body.u32())))
                    )
                else:
                    raise ParseError(f"bad data segment flag {flag}")
        elif section_id == 12:
            declared_count = body.u32()

        if section_id not in (0, 9) and not body.done():
            raise ParseError(f"section {section_id} has trailing bytes")

    if len(mod.func_type_indices) != len(mod.bodies):
        raise ParseError(
            f"function section declares {len(mod.func_type_indices)} functions, "
            f"code section has {len(mod.bodies)}"
        )
    for idx in mod.func_type_indices:
        if idx >= len(mod.types):
            raise ParseError(f"function type index {idx} out of range")
    if declared_count is not None and declared_count != len(mod.data):
        raise ParseError("datacount section disagrees with data section")
    return mod
