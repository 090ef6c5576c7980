"""Embedded wasm32 engine.

Pipeline: `parser` decodes the binary format into structures, `lower`
validates and flattens function bodies into pre-resolved instruction lists
(the unit that gets cached on disk), and `interp` executes lowered modules
against mmap-backed linear memory.

The engine implements the integer subset of wasm32 that controller guests
use: i32/i64 arithmetic, full control flow, linear memory with grow,
memory.copy/memory.fill, globals, and host function imports. Floats, tables,
call_indirect, SIMD, and threads are rejected during validation with errors
that name the offending construct.
"""

from wasmop.wasm.interp import Instance, LinearMemory, LinkError, ProcExit, Trap
from wasmop.wasm.lower import LoweredModule, ValidationError, lower
from wasmop.wasm.parser import ParseError, parse_module

ENGINE_VERSION = "wopvm-1.0"

__all__ = [
    "ENGINE_VERSION",
    "Instance",
    "LinearMemory",
    "LinkError",
    "LoweredModule",
    "ParseError",
    "ProcExit",
    "Trap",
    "ValidationError",
    "lower",
    "parse_module",
]
