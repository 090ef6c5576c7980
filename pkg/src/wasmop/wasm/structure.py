"""Decoded module structures shared by the parser, builder, and lowerer."""

from __future__ import annotations

from dataclasses import dataclass, field

Instr = tuple  # (opcode:int, immediate...) in decoded form


@dataclass(frozen=True)
class FuncType:
    params: tuple[int, ...]
    results: tuple[int, ...]


@dataclass(frozen=True)
class Limits:
    minimum: int
    maximum: int | None = None


@dataclass(frozen=True)
class ImportEntry:
    module: str
    name: str
    kind: str  # "func" | "table" | "memory" | "global"
    # func: type index; memory: Limits; global: (valtype, mutable); table: Limits
    desc: object


@dataclass(frozen=True)
class ExportEntry:
    name: str
    kind: str
    index: int


@dataclass(frozen=True)
class GlobalEntry:
    valtype: int
    mutable: bool
    init: tuple[Instr, ...]


@dataclass(frozen=True)
class DataSegment:
    mode: str  # "active" | "passive"
    mem_index: int
    offset: tuple[Instr, ...]  # const expr; empty for passive
    data: bytes


@dataclass(frozen=True)
class FuncBody:
    locals: tuple[tuple[int, int], ...]  # (count, valtype) runs
    instrs: tuple[Instr, ...]


@dataclass
class Module:
    types: list[FuncType] = field(default_factory=list)
    imports: list[ImportEntry] = field(default_factory=list)
    func_type_indices: list[int] = field(default_factory=list)
    tables: list[Limits] = field(default_factory=list)
    memories: list[Limits] = field(default_factory=list)
    globals: list[GlobalEntry] = field(default_factory=list)
    exports: list[ExportEntry] = field(default_factory=list)
    start: int | None = None
    elem_count: int = 0
    bodies: list[FuncBody] = field(default_factory=list)
    data: list[DataSegment] = field(default_factory=list)

    def imported_funcs(self) -> list[ImportEntry]:
        return [imp for imp in self.imports if imp.kind == "func"]
