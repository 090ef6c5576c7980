"""Structured assembler for building wasm guest modules in Python.

`GuestModule` wraps the flat binary `ModuleBuilder` with the affordances that
make hand-written controllers maintainable: named parameters and locals,
forward-declared functions (so call graphs need not be topologically sorted),
`with`-scoped blocks/loops/ifs whose labels are Python objects (no manual
relative-depth counting), and a deduplicating static-data allocator.

The output of `build()` is a complete wasm32 binary, byte-for-byte
deterministic for a given construction sequence.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

from wasmop.wasm import opcodes as op
from wasmop.wasm.builder import ModuleBuilder

I32 = op.I32
I64 = op.I64

#: First address handed out by the static-data allocator.  Addresses below
#: this are reserved for fixed scratch cells owned by the runtime fragments.
DATA_BASE = 0x100

#: Static data must stay below this address (the pending table starts here).
DATA_LIMIT = 0x4000


class DslError(Exception):
    """A structural mistake while assembling a guest module."""


@dataclass(frozen=True, slots=True)
class FuncRef:
    """Handle to a declared (possibly not yet defined) function."""

    index: int
    name: str
    n_params: int
    n_results: int


@dataclass(frozen=True, slots=True)
class GlobalRef:
    """Handle to a module global."""

    index: int
    valtype: int


class Label:
    """Branch target for a structured block; identity is what matters."""

    __slots__ = ("kind",)

    def __init__(self, kind: str) -> None:
        self.kind = kind


class FnWriter:
    """Accumulates the body of one function as parser-form instruction tuples."""

    def __init__(
        self,
        ref: FuncRef,
        params: tuple[tuple[str, int], ...],
        results: tuple[int, ...],
    ) -> None:
        self.ref = ref
        self.param_types = tuple(vt for _, vt in params)
        self.results = results
        self.local_types: list[int] = []
        self.code: list[tuple] = []
        self._names: dict[str, int] = {}
        self._ctrl: list[Label] = []
        for i, (name, _vt) in enumerate(params):
            self._register_name(name, i)

    def _register_name(self, name: str, idx: int) -> None:
        if name in self._names:
            raise DslError(f"duplicate local name {name!r} in {self.ref.name}")
        self._names[name] = idx

    # -- locals ------------------------------------------------------------

    def local(self, name: str, valtype: int = I32) -> int:
        """Declare a new local and return its index."""
        idx = len(self.param_types) + len(self.local_types)
        self.local_types.append(valtype)
        self._register_name(name, idx)
        return idx

    # -- raw emission --------------------------------------------------------

    def op(self, mnemonic: str, *imm) -> None:
        """Emit one instruction by mnemonic, e.g. ``f.op("i64.add")``."""
        code = op.NAME_TO_OPCODE.get(mnemonic)
        if code is None:
            raise DslError(f"unknown mnemonic {mnemonic!r}")
        self.code.append((code, *imm))

    def _emit(self, *instr) -> None:
        self.code.append(tuple(instr))

    # -- constants and locals ------------------------------------------------

    def i32(self, value: int) -> None:
        self._emit(op.I32_CONST, value)

    def i64(self, value: int) -> None:
        self._emit(op.I64_CONST, value)

    def get(self, local: int) -> None:
        self._emit(op.LOCAL_GET, local)

    def set(self, local: int) -> None:
        self._emit(op.LOCAL_SET, local)

    def tee(self, local: int) -> None:
        self._emit(op.LOCAL_TEE, local)

    def gget(self, ref: GlobalRef) -> None:
        self._emit(op.GLOBAL_GET, ref.index)

    def gset(self, ref: GlobalRef) -> None:
        self._emit(op.GLOBAL_SET, ref.index)

    # -- frequent i32 operators (address and counter arithmetic) -------------

    def add(self) -> None:
        self._emit(op.I32_ADD)

    def sub(self) -> None:
        self._emit(op.I32_SUB)

    def mul(self) -> None:
        self._emit(op.I32_MUL)

    def and_(self) -> None:
        self._emit(op.I32_AND)

    def or_(self) -> None:
        self._emit(op.I32_OR)

    def shl(self) -> None:
        self._emit(op.I32_SHL)

    def shr_u(self) -> None:
        self._emit(op.I32_SHR_U)

    def eq(self) -> None:
        self._emit(op.I32_EQ)

    def ne(self) -> None:
        self._emit(op.I32_NE)

    def eqz(self) -> None:
        self._emit(op.I32_EQZ)

    def lt_u(self) -> None:
        self._emit(op.I32_LT_U)

    def gt_u(self) -> None:
        self._emit(op.I32_GT_U)

    def le_u(self) -> None:
        self._emit(op.I32_LE_U)

    def ge_u(self) -> None:
        self._emit(op.I32_GE_U)

    # -- memory access ---------------------------------------------------------

    def load32(self, offset: int = 0) -> None:
        self._emit(op.I32_LOAD, 2, offset)

    def load64(self, offset: int = 0) -> None:
        self._emit(op.I64_LOAD, 3, offset)

    def load_u8(self, offset: int = 0) -> None:
        self._emit(op.I32_LOAD8_U, 0, offset)

    def load_u16(self, offset: int = 0) -> None:
        self._emit(op.I32_LOAD16_U, 1, offset)

    def store32(self, offset: int = 0) -> None:
        self._emit(op.I32_STORE, 2, offset)

    def store64(self, offset: int = 0) -> None:
        self._emit(op.I64_STORE, 3, offset)

    def store8(self, offset: int = 0) -> None:
        self._emit(op.I32_STORE8, 0, offset)

    def store16(self, offset: int = 0) -> None:
        self._emit(op.I32_STORE16, 1, offset)

    def memory_copy(self) -> None:
        self._emit(op.MEMORY_COPY, 0, 0)

    def memory_fill(self) -> None:
        self._emit(op.MEMORY_FILL, 0)

    def memory_size(self) -> None:
        self._emit(op.MEMORY_SIZE, 0)

    def memory_grow(self) -> None:
        self._emit(op.MEMORY_GROW, 0)

    # -- calls and control -----------------------------------------------------

    def call(self, ref: FuncRef) -> None:
        self._emit(op.CALL, ref.index)

    def ret(self) -> None:
        self._emit(op.RETURN)

    def unreachable(self) -> None:
        self._emit(op.UNREACHABLE)

    def drop(self) -> None:
        self._emit(op.DROP)

    def select(self) -> None:
        self._emit(op.SELECT)

    @contextlib.contextmanager
    def block(self, result: int | None = None):
        """``with f.block() as done:`` — ``f.br(done)`` jumps past the end."""
        self._emit(op.BLOCK, result)
        label = Label("block")
        self._ctrl.append(label)
        try:
            yield label
        finally:
            self._close(label)

    @contextlib.contextmanager
    def loop(self, result: int | None = None):
        """``with f.loop() as top:`` — ``f.br(top)`` jumps back to the start."""
        self._emit(op.LOOP, result)
        label = Label("loop")
        self._ctrl.append(label)
        try:
            yield label
        finally:
            self._close(label)

    @contextlib.contextmanager
    def if_(self, result: int | None = None):
        """``with f.if_():`` consumes the i32 on the stack; ``f.else_()`` splits."""
        self._emit(op.IF, result)
        label = Label("if")
        self._ctrl.append(label)
        try:
            yield label
        finally:
            self._close(label)

    def else_(self) -> None:
        if not self._ctrl or self._ctrl[-1].kind != "if":
            raise DslError("else_() outside an if_() body")
        self._emit(op.ELSE)

    def _close(self, label: Label) -> None:
        if not self._ctrl or self._ctrl[-1] is not label:
            raise DslError("control structures closed out of order")
        self._ctrl.pop()
        self._emit(op.END)

    def _depth_of(self, label: Label) -> int:
        for depth, candidate in enumerate(reversed(self._ctrl)):
            if candidate is label:
                return depth
        raise DslError("branch to a label that is not currently open")

    def br(self, label: Label) -> None:
        self._emit(op.BR, self._depth_of(label))

    def br_if(self, label: Label) -> None:
        self._emit(op.BR_IF, self._depth_of(label))

    def br_table(self, labels: list[Label], default: Label) -> None:
        self._emit(
            op.BR_TABLE,
            [self._depth_of(lab) for lab in labels],
            self._depth_of(default),
        )

    # -- completion ---------------------------------------------------------------

    def finish_check(self) -> None:
        if self._ctrl:
            raise DslError(
                f"function {self.ref.name!r} ended with "
                f"{len(self._ctrl)} unclosed control structure(s)"
            )


class GuestModule:
    """Builds one guest wasm module from declared imports, globals, data and
    functions.  All imports must be declared before the first function."""

    def __init__(self, *, min_pages: int = 2, max_pages: int | None = None) -> None:
        self._min_pages = min_pages
        self._max_pages = max_pages
        self._imports: list[tuple[str, str, tuple[int, ...], tuple[int, ...]]] = []
        self._decls: list[
            tuple[FuncRef, tuple[tuple[str, int], ...], tuple[int, ...], str | None]
        ] = []
        self._writers: dict[int, FnWriter] = {}
        self._globals: list[tuple[int, bool, int, str | None]] = []
        self._data: list[tuple[int, bytes]] = []
        self._data_index: dict[bytes, int] = {}
        self._data_pos = DATA_BASE
        self._funcs_started = False

    # -- imports ----------------------------------------------------------------

    def import_func(
        self,
        name: str,
        params: tuple[int, ...],
        results: tuple[int, ...],
        module: str = "env",
    ) -> FuncRef:
        if self._funcs_started:
            raise DslError("imports must be declared before any function")
        index = len(self._imports)
        self._imports.append((module, name, tuple(params), tuple(results)))
        return FuncRef(index, f"{module}.{name}", len(params), len(results))

    # -- functions ----------------------------------------------------------------

    def declare(
        self,
        name: str,
        params: tuple[tuple[str, int], ...] = (),
        results: tuple[int, ...] = (),
        export: bool | str = False,
    ) -> FuncRef:
        """Reserve a function index; the body may be supplied later via define()."""
        self._funcs_started = True
        index = len(self._imports) + len(self._decls)
        ref = FuncRef(index, name, len(params), len(results))
        export_name = name if export is True else (export or None)
        self._decls.append((ref, tuple(params), tuple(results), export_name))
        return ref

    def define(self, ref: FuncRef) -> FnWriter:
        slot = ref.index - len(self._imports)
        if not (0 <= slot < len(self._decls)) or self._decls[slot][0] is not ref:
            raise DslError(f"define() for unknown function {ref.name!r}")
        if ref.index in self._writers:
            raise DslError(f"function {ref.name!r} defined twice")
        _, params, results, _ = self._decls[slot]
        writer = FnWriter(ref, params, results)
        self._writers[ref.index] = writer
        return writer

    def func(
        self,
        name: str,
        params: tuple[tuple[str, int], ...] = (),
        results: tuple[int, ...] = (),
        export: bool | str = False,
    ) -> FnWriter:
        """declare() + define() in one step for non-forward-referenced functions."""
        return self.define(self.declare(name, params, results, export))

    # -- globals and data ------------------------------------------------------------

    def global_(
        self,
        init: int = 0,
        valtype: int = I32,
        mutable: bool = True,
        export: str | None = None,
    ) -> GlobalRef:
        index = len(self._globals)
        self._globals.append((valtype, mutable, init, export))
        return GlobalRef(index, valtype)

    def data(self, content: bytes | str) -> tuple[int, int]:
        """Place static bytes, deduplicated by content; returns (ptr, length)."""
        blob = content.encode() if isinstance(content, str) else bytes(content)
        cached = self._data_index.get(blob)
        if cached is not None:
            return cached, len(blob)
        ptr = self._data_pos
        self._data_pos = (ptr + len(blob) + 7) & ~7
        if self._data_pos > DATA_LIMIT:
            raise DslError("static data overflows the reserved region")
        self._data.append((ptr, blob))
        self._data_index[blob] = ptr
        return ptr, len(blob)

    # -- assembly ----------------------------------------------------------------

    def build(self) -> bytes:
        builder = ModuleBuilder()
        for module, name, params, results in self._imports:
            builder.import_func(module, name, params, results)
        builder.add_memory(self._min_pages, self._max_pages)
        builder.export_memory("memory")
        for valtype, mutable, init, export in self._globals:
            gidx = builder.add_global(valtype, mutable, init)
            if export:
                builder.export_global(export, gidx)
        for ref, params, results, export in self._decls:
            writer = self._writers.get(ref.index)
            if writer is None:
                raise DslError(f"function {ref.name!r} declared but never defined")
            writer.finish_check()
            # Always supply the function-level terminator: a body whose last
            # instruction is a block's END would otherwise defeat the
            # builder's auto-append heuristic.
            fidx = builder.add_func(
                writer.param_types,
                results,
                writer.local_types,
                [*writer.code, (op.END,)],
            )
            if fidx != ref.index:
                raise DslError("function index drift during assembly")
            if export:
                builder.export_func(export, fidx)
        for ptr, blob in self._data:
            builder.add_data(ptr, blob)
        return builder.build()
