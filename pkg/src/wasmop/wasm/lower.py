"""Validation and lowering of parsed modules into flat executable code.

Lowering turns each structured function body into a flat tuple of
(op, a, b) triples with branch targets resolved to absolute instruction
offsets. A branch carries (arity, keep_height): taking it truncates the
operand stack to keep_height values and re-appends the top arity carried
values, which removes all label bookkeeping from the interpreter.

Backward branches get distinct opcodes (BR_BACK / BR_IF_BACK) so only loop
back-edges pay the watchdog-deadline check. `if` conditions compile to
BR_IF_Z, a branch taken when the popped value is zero.

Validation covers the supported integer subset: stack-height consistency,
index bounds, and named rejection of floats, tables, call_indirect, and
multi-value signatures.
"""

from __future__ import annotations

from dataclasses import dataclass

from wasmop.wasm import opcodes as op
from wasmop.wasm.structure import Module

# Synthetic flat-form opcodes (outside the wasm encoding space).
BR_BACK = 0x1_000C
BR_IF_BACK = 0x1_000D
BR_IF_Z = 0x1_000E

_INT_VALTYPES = (op.I32, op.I64)

WASM32_MAX_PAGES = 65536

_U32_MASK = 0xFFFFFFFF
_U64_MASK = 0xFFFFFFFFFFFFFFFF


class ValidationError(ValueError):
    """A module failed validation; `symbol` names the construct if known."""

    def __init__(self, message: str, symbol: str | None = None):
        self.symbol = symbol
        super().__init__(message if symbol is None else f"{symbol}: {message}")


@dataclass(frozen=True)
class LoweredFunc:
    type_idx: int
    n_params: int
    n_results: int
    n_locals: int
    code: tuple[tuple, ...]


# eq=False keeps identity hashing: instances are interned by the module
# cache and used as weak-dict keys, so structural hashing would only cost.
@dataclass(frozen=True, eq=False)
class LoweredModule:
    engine_version: str
    types: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]
    imports: tuple[tuple[str, str, int], ...]  # (module, name, type index)
    funcs: tuple[LoweredFunc, ...]
    globals: tuple[tuple[int, bool, int], ...]  # (valtype, mutable, init value)
    memory: tuple[int, int | None] | None
    exports: tuple[tuple[str, str, int], ...]  # (name, kind, index)
    start: int | None
    data: tuple[tuple[int, bytes], ...]

    def export_map(self) -> dict[str, tuple[str, int]]:
        return {name: (kind, index) for name, kind, index in self.exports}

    def func_signature(self, func_index: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
        if func_index < len(self.imports):
            return self.types[self.imports[func_index][2]]
        return self.types[self.funcs[func_index - len(self.imports)].type_idx]

    def to_payload(self) -> tuple:
        return (
            self.engine_version,
            self.types,
            self.imports,
            tuple(
                (f.type_idx, f.n_params, f.n_results, f.n_locals, f.code) for f in self.funcs
            ),
            self.globals,
            self.memory,
            self.exports,
            self.start,
            self.data,
        )

    @staticmethod
    def from_payload(payload: tuple) -> "LoweredModule":
        (engine_version, types, imports, funcs, globals_, memory, exports, start, data) = payload
        return LoweredModule(
            engine_version=engine_version,
            types=types,
            imports=imports,
            funcs=tuple(LoweredFunc(*f) for f in funcs),
            globals=globals_,
            memory=memory,
            exports=exports,
            start=start,
            data=data,
        )


def _build_effects() -> dict[int, tuple[int, int]]:
    e: dict[int, tuple[int, int]] = {
        op.DROP: (1, 0),
        op.SELECT: (3, 1),
        op.LOCAL_GET: (0, 1),
        op.LOCAL_SET: (1, 0),
        op.LOCAL_TEE: (1, 1),
        op.GLOBAL_GET: (0, 1),
        op.GLOBAL_SET: (1, 0),
        op.MEMORY_SIZE: (0, 1),
        op.MEMORY_GROW: (1, 1),
        op.MEMORY_COPY: (3, 0),
        op.MEMORY_FILL: (3, 0),
        op.I32_CONST: (0, 1),
        op.I64_CONST: (0, 1),
        op.I32_EQZ: (1, 1),
        op.I64_EQZ: (1, 1),
    }
    for load in (
        op.I32_LOAD, op.I64_LOAD,
        op.I32_LOAD8_S, op.I32_LOAD8_U, op.I32_LOAD16_S, op.I32_LOAD16_U,
        op.I64_LOAD8_S, op.I64_LOAD8_U, op.I64_LOAD16_S, op.I64_LOAD16_U,
        op.I64_LOAD32_S, op.I64_LOAD32_U,
    ):
        e[load] = (1, 1)
    for store in (
        op.I32_STORE, op.I64_STORE,
        op.I32_STORE8, op.I32_STORE16,
        op.I64_STORE8, op.I64_STORE16, op.I64_STORE32,
    ):
        e[store] = (2, 0)
    for cmp in range(op.I32_EQ, op.I32_GE_U + 1):
        e[cmp] = (2, 1)
    for cmp in range(op.I64_EQ, op.I64_GE_U + 1):
        e[cmp] = (2, 1)
    for unop in (op.I32_CLZ, op.I32_CTZ, op.I32_POPCNT, op.I64_CLZ, op.I64_CTZ, op.I64_POPCNT):
        e[unop] = (1, 1)
    for binop in range(op.I32_ADD, op.I32_ROTR + 1):
        e[binop] = (2, 1)
    for binop in range(op.I64_ADD, op.I64_ROTR + 1):
        e[binop] = (2, 1)
    for conv in (
        op.I32_WRAP_I64, op.I64_EXTEND_I32_S, op.I64_EXTEND_I32_U,
        op.I32_EXTEND8_S, op.I32_EXTEND16_S,
        op.I64_EXTEND8_S, op.I64_EXTEND16_S, op.I64_EXTEND32_S,
    ):
        e[conv] = (1, 1)
    return e


_EFFECTS = _build_effects()


def _opname(code: int) -> str:
    return op.OPCODE_NAMES.get(code, f"op-0x{code:x}")


class _Frame:
    __slots__ = ("kind", "entry_height", "result_arity", "br_arity", "start_pc",
                 "patches", "else_patch", "live_entry", "unreachable")

    def __init__(self, kind: str, entry_height: int, result_arity: int,
                 start_pc: int, live_entry: bool):
        self.kind = kind
        self.entry_height = entry_height
        self.result_arity = result_arity
        self.br_arity = 0 if kind == "loop" else result_arity
        self.start_pc = start_pc
        # Forward-branch sites to patch at `end`: either an out-index, or
        # ("table", table_pc, entry_idx) for one arm of a br_table.
        self.patches: list = []
        self.else_patch: int | None = None
        self.live_entry = live_entry
        self.unreachable = False


def _apply_patch(out: list, patch, pc: int) -> None:
    if isinstance(patch, tuple):
        _, table_pc, entry_idx = patch
        out[table_pc][1][entry_idx][0] = pc
    else:
        prev = out[patch]
        out[patch] = (prev[0], pc, prev[2])


def _block_arity(blocktype, where: str) -> int:
    if blocktype is None:
        return 0
    if isinstance(blocktype, int):
        if blocktype not in _INT_VALTYPES:
            raise ValidationError(f"float block type in {where}")
        return 1
    raise ValidationError(f"multi-value block type in {where}")


def _lower_body(
    func_name: str,
    instrs: tuple,
    n_results: int,
    n_locals_total: int,
    func_sigs: list[tuple[int, int]],
    n_globals: int,
    has_memory: bool,
) -> tuple[tuple, ...]:
    out: list[tuple] = []
    frames: list[_Frame] = [_Frame("func", 0, n_results, 0, True)]
    height = 0
    i = 0

    def err(msg: str) -> ValidationError:
        return ValidationError(f"{msg} (in {func_name}, instr {i})")

    def resolve_br(rel_depth: int) -> _Frame:
        if rel_depth >= len(frames):
            raise err(f"branch depth {rel_depth} exceeds nesting")
        return frames[-1 - rel_depth]

    def emit_branch(code_fwd: int, code_back: int, rel_depth: int) -> None:
        target = resolve_br(rel_depth)
        arity, keep = target.br_arity, target.entry_height
        if height < keep + arity:
            raise err("stack underflow at branch")
        if target.kind == "loop":
            out.append((code_back, target.start_pc, (arity, keep)))
        else:
            out.append((code_fwd, -1, (arity, keep)))
            target.patches.append(len(out) - 1)

    for i, instr in enumerate(instrs):
        code = instr[0]
        cur = frames[-1]

        if cur.unreachable:
            # Unreachable instructions are dropped; only nesting is tracked.
            if code in (op.BLOCK, op.LOOP, op.IF):
                frames.append(_Frame("dead", height, 0, len(out), False))
            elif code == op.ELSE:
                if cur.kind == "if" and cur.live_entry:
                    # Then-arm ended in a branch: the else-arm is reachable.
                    _apply_patch(out, cur.else_patch, len(out))
                    cur.else_patch = None
                    cur.kind = "if-else"
                    cur.unreachable = False
                    height = cur.entry_height
            elif code == op.END:
                f = frames.pop()
                if f.kind == "func":
                    frames.append(f)
                    break
                if f.live_entry:
                    if f.else_patch is not None:
                        _apply_patch(out, f.else_patch, len(out))
                    for p in f.patches:
                        _apply_patch(out, p, len(out))
                    height = f.entry_height + f.result_arity
            continue

        if code == op.NOP:
            continue

        if code == op.UNREACHABLE:
            out.append((op.UNREACHABLE, 0, 0))
            cur.unreachable = True
            continue

        if code in (op.BLOCK, op.LOOP):
            arity = _block_arity(instr[1], func_name)
            kind = "block" if code == op.BLOCK else "loop"
            frames.append(_Frame(kind, height, arity, len(out), True))
            continue

        if code == op.IF:
            arity = _block_arity(instr[1], func_name)
            if height < 1:
                raise err("stack underflow at if")
            height -= 1
            f = _Frame("if", height, arity, len(out), True)
            out.append((BR_IF_Z, -1, (0, height)))  # skip then-arm when zero
            f.else_patch = len(out) - 1
            frames.append(f)
            continue

        if code == op.ELSE:
            if cur.kind != "if":
                raise err("else without matching if")
            if height != cur.entry_height + cur.result_arity:
                raise err("stack height mismatch at else")
            out.append((op.BR, -1, (cur.result_arity, cur.entry_height)))
            cur.patches.append(len(out) - 1)
            _apply_patch(out, cur.else_patch, len(out))
            cur.else_patch = None
            cur.kind = "if-else"
            cur.unreachable = False
            height = cur.entry_height
            continue

        if code == op.END:
            f = frames.pop()
            if f.kind == "func":
                if height != n_results:
                    raise err(f"function leaves {height} values, declares {n_results}")
                frames.append(f)
                break
            if f.kind == "if" and f.result_arity != 0:
                raise err("if with a result needs an else arm")
            if height != f.entry_height + f.result_arity:
                raise err("stack height mismatch at end")
            if f.else_patch is not None:
                _apply_patch(out, f.else_patch, len(out))
            for p in f.patches:
                _apply_patch(out, p, len(out))
            continue

        if code == op.BR:
            emit_branch(op.BR, BR_BACK, instr[1])
            cur.unreachable = True
            continue

        if code == op.BR_IF:
            if height < 1:
                raise err("stack underflow at br_if")
            height -= 1
            emit_branch(op.BR_IF, BR_IF_BACK, instr[1])
            continue

        if code == op.BR_TABLE:
            targets, default = instr[1], instr[2]
            if height < 1:
                raise err("stack underflow at br_table")
            height -= 1
            table_pc = len(out)
            resolved: list[list] = []
            for rel in (*targets, default):
                target = resolve_br(rel)
                arity, keep = target.br_arity, target.entry_height
                if height < keep + arity:
                    raise err("stack underflow at br_table")
                if target.kind == "loop":
                    resolved.append([target.start_pc, arity, keep])
                else:
                    resolved.append([-1, arity, keep])
                    target.patches.append(("table", table_pc, len(resolved) - 1))
            out.append((op.BR_TABLE, resolved, 0))
            cur.unreachable = True
            continue

        if code == op.RETURN:
            if height < n_results:
                raise err("stack underflow at return")
            out.append((op.RETURN, n_results, 0))
            cur.unreachable = True
            continue

        if code == op.CALL:
            callee = instr[1]
            if callee >= len(func_sigs):
                raise err(f"call to undefined function {callee}")
            pops, pushes = func_sigs[callee]
            if height < pops:
                raise err("stack underflow at call")
            height += pushes - pops
            out.append((op.CALL, callee, pops))
            continue

        if code in (op.CALL_INDIRECT, op.SELECT_T, op.TABLE_GET, op.TABLE_SET,
                    op.MEMORY_INIT, op.DATA_DROP):
            raise ValidationError(f"unsupported instruction {_opname(code)} (in {func_name})")

        effect = _EFFECTS.get(code)
        if effect is None:
            raise ValidationError(f"unsupported instruction {_opname(code)} (in {func_name})")
        pops, pushes = effect

        if code in (op.LOCAL_GET, op.LOCAL_SET, op.LOCAL_TEE):
            if instr[1] >= n_locals_total:
                raise err(f"local index {instr[1]} out of range")
            a = instr[1]
        elif code in (op.GLOBAL_GET, op.GLOBAL_SET):
            if instr[1] >= n_globals:
                raise err(f"global index {instr[1]} out of range")
            a = instr[1]
        elif code == op.I32_CONST:
            a = instr[1] & _U32_MASK
        elif code == op.I64_CONST:
            a = instr[1] & _U64_MASK
        elif op.OPCODES[code][1] == op.IMM_MEMARG:
            if not has_memory:
                raise err(f"{_opname(code)} without a memory")
            a = instr[2]  # keep the offset, drop the alignment hint
        elif code in (op.MEMORY_SIZE, op.MEMORY_GROW, op.MEMORY_COPY, op.MEMORY_FILL):
            if not has_memory:
                raise err(f"{_opname(code)} without a memory")
            a = 0
        else:
            a = 0

        if height < pops:
            raise err(f"stack underflow at {_opname(code)}")
        height += pushes - pops
        out.append((code, a, 0))

    if len(frames) != 1 or frames[0].kind != "func":
        raise ValidationError(f"unbalanced control flow in {func_name}")

    final_pc = len(out)
    out.append((op.RETURN, n_results, 0))
    for p in frames[0].patches:
        _apply_patch(out, p, final_pc)

    # Freeze br_table entries and verify every branch was resolved.
    fixed: list[tuple] = []
    for item in out:
        if item[0] == op.BR_TABLE:
            entries = tuple(tuple(e) for e in item[1])
            if any(e[0] < 0 for e in entries):
                raise ValidationError(f"unresolved br_table target in {func_name}")
            fixed.append((op.BR_TABLE, entries, 0))
        else:
            if item[0] in (op.BR, op.BR_IF, BR_IF_Z, BR_BACK, BR_IF_BACK) and item[1] < 0:
                raise ValidationError(f"unresolved branch target in {func_name}")
            fixed.append(item)
    return tuple(fixed)


def lower(mod: Module, engine_version: str) -> LoweredModule:
    for ft in mod.types:
        for vt in (*ft.params, *ft.results):
            if vt not in _INT_VALTYPES:
                raise ValidationError("float value types unsupported")
        if len(ft.results) > 1:
            raise ValidationError("multi-value results unsupported")

    for imp in mod.imports:
        if imp.kind != "func":
            raise ValidationError(
                f"only function imports are supported, got {imp.kind} import",
                symbol=f"{imp.module}.{imp.name}",
            )
        if imp.desc >= len(mod.types):
            raise ValidationError("import type index out of range",
                                  symbol=f"{imp.module}.{imp.name}")

    if mod.tables or mod.elem_count:
        raise ValidationError("tables and element segments unsupported")
    if len(mod.memories) > 1:
        raise ValidationError("at most one memory is supported")

    memory: tuple[int, int | None] | None = None
    if mod.memories:
        lim = mod.memories[0]
        if lim.minimum > WASM32_MAX_PAGES or (lim.maximum or 0) > WASM32_MAX_PAGES:
            raise ValidationError("memory limits exceed wasm32 page range")
        memory = (lim.minimum, lim.maximum)

    globals_: list[tuple[int, bool, int]] = []
    for g_idx, g in enumerate(mod.globals):
        if g.valtype not in _INT_VALTYPES:
            raise ValidationError(f"float global {g_idx} unsupported")
        if len(g.init) != 1 or g.init[0][0] not in (op.I32_CONST, op.I64_CONST):
            raise ValidationError(f"global {g_idx} initializer must be a constant")
        mask = _U32_MASK if g.valtype == op.I32 else _U64_MASK
        globals_.append((g.valtype, g.mutable, g.init[0][1] & mask))

    imports = tuple((imp.module, imp.name, imp.desc) for imp in mod.imported_funcs())
    n_imports = len(imports)
    n_funcs = n_imports + len(mod.bodies)

    func_sigs: list[tuple[int, int]] = []
    for _, _, t_idx in imports:
        ft = mod.types[t_idx]
        func_sigs.append((len(ft.params), len(ft.results)))
    for t_idx in mod.func_type_indices:
        ft = mod.types[t_idx]
        func_sigs.append((len(ft.params), len(ft.results)))

    export_names = set()
    exports: list[tuple[str, str, int]] = []
    for exp in mod.exports:
        if exp.name in export_names:
            raise ValidationError("duplicate export", symbol=exp.name)
        export_names.add(exp.name)
        if exp.kind == "func":
            if exp.index >= n_funcs:
                raise ValidationError("export index out of range", symbol=exp.name)
        elif exp.kind == "memory":
            if memory is None or exp.index != 0:
                raise ValidationError("memory export without memory", symbol=exp.name)
        elif exp.kind == "global":
            if exp.index >= len(globals_):
                raise ValidationError("export index out of range", symbol=exp.name)
        else:
            raise ValidationError(f"{exp.kind} exports unsupported", symbol=exp.name)
        exports.append((exp.name, exp.kind, exp.index))

    if mod.start is not None:
        if mod.start >= n_funcs:
            raise ValidationError("start function index out of range")
        if func_sigs[mod.start] != (0, 0):
            raise ValidationError("start function must take and return nothing")

    data: list[tuple[int, bytes]] = []
    for seg in mod.data:
        if seg.mode != "active":
            raise ValidationError("passive data segments unsupported")
        if memory is None:
            raise ValidationError("data segment without a memory")
        if seg.mem_index != 0:
            raise ValidationError("data segment memory index out of range")
        if len(seg.offset) != 1 or seg.offset[0][0] != op.I32_CONST:
            raise ValidationError("data segment offset must be an i32 constant")
        data.append((seg.offset[0][1] & _U32_MASK, seg.data))

    funcs: list[LoweredFunc] = []
    for body_idx, body in enumerate(mod.bodies):
        t_idx = mod.func_type_indices[body_idx]
        ft = mod.types[t_idx]
        n_locals = sum(count for count, _ in body.locals)
        for _, vt in body.locals:
            if vt not in _INT_VALTYPES:
                raise ValidationError(f"float locals unsupported (func {body_idx})")
        func_name = f"func[{n_imports + body_idx}]"
        code = _lower_body(
            func_name,
            body.instrs,
            len(ft.results),
            len(ft.params) + n_locals,
            func_sigs,
            len(globals_),
            memory is not None,
        )
        funcs.append(LoweredFunc(t_idx, len(ft.params), len(ft.results), n_locals, code))

    return LoweredModule(
        engine_version=engine_version,
        types=tuple((ft.params, ft.results) for ft in mod.types),
        imports=imports,
        funcs=tuple(funcs),
        globals=tuple(globals_),
        memory=memory,
        exports=tuple(exports),
        start=mod.start,
        data=tuple(data),
    )
