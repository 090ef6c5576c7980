"""Opcode and value-type tables for the wasm32 binary format.

Prefixed opcodes (0xFC <subop>) are keyed as 0xFC00 | subop so every
instruction has a single integer key. The immediate-shape table covers the
whole MVP instruction set plus sign-extension and bulk-memory so the parser
can decode any structurally valid module; which opcodes actually execute is
decided later, during lowering.
"""

from __future__ import annotations

# Value types (binary encodings)
I32 = 0x7F
I64 = 0x7E
F32 = 0x7D
F64 = 0x7C
FUNCREF = 0x70
EXTERNREF = 0x6F

VALTYPE_NAMES = {I32: "i32", I64: "i64", F32: "f32", F64: "f64"}
NAME_TO_VALTYPE = {v: k for k, v in VALTYPE_NAMES.items()}

# Immediate shapes
IMM_NONE = 0
IMM_BLOCK = 1  # blocktype: None | valtype | ("type", idx)
IMM_IDX = 2  # one u32 index
IMM_MEMARG = 3  # align u32, offset u32 (stored as (align, offset))
IMM_BRTABLE = 4  # (targets tuple, default)
IMM_I32 = 5  # s32 constant
IMM_I64 = 6  # s64 constant
IMM_F32 = 7  # 4 raw bytes
IMM_F64 = 8  # 8 raw bytes
IMM_MEM0 = 9  # single reserved byte (memory index, must be 0)
IMM_MEM00 = 10  # two reserved bytes (memory.copy)
IMM_CALLIND = 11  # type idx u32, table idx u32
IMM_SELECT_T = 12  # vec of valtypes
IMM_IDX_MEM = 13  # data idx u32 + memory idx byte (memory.init)

# Control
UNREACHABLE = 0x00
NOP = 0x01
BLOCK = 0x02
LOOP = 0x03
IF = 0x04
ELSE = 0x05
END = 0x0B
BR = 0x0C
BR_IF = 0x0D
BR_TABLE = 0x0E
RETURN = 0x0F
CALL = 0x10
CALL_INDIRECT = 0x11

# Parametric
DROP = 0x1A
SELECT = 0x1B
SELECT_T = 0x1C

# Variable
LOCAL_GET = 0x20
LOCAL_SET = 0x21
LOCAL_TEE = 0x22
GLOBAL_GET = 0x23
GLOBAL_SET = 0x24
TABLE_GET = 0x25
TABLE_SET = 0x26

# Memory
I32_LOAD = 0x28
I64_LOAD = 0x29
F32_LOAD = 0x2A
F64_LOAD = 0x2B
I32_LOAD8_S = 0x2C
I32_LOAD8_U = 0x2D
I32_LOAD16_S = 0x2E
I32_LOAD16_U = 0x2F
I64_LOAD8_S = 0x30
I64_LOAD8_U = 0x31
I64_LOAD16_S = 0x32
I64_LOAD16_U = 0x33
I64_LOAD32_S = 0x34
I64_LOAD32_U = 0x35
I32_STORE = 0x36
I64_STORE = 0x37
F32_STORE = 0x38
F64_STORE = 0x39
I32_STORE8 = 0x3A
I32_STORE16 = 0x3B
I64_STORE8 = 0x3C
I64_STORE16 = 0x3D
I64_STORE32 = 0x3E
MEMORY_SIZE = 0x3F
MEMORY_GROW = 0x40

# Constants
I32_CONST = 0x41
I64_CONST = 0x42
F32_CONST = 0x43
F64_CONST = 0x44

# i32 compare
I32_EQZ = 0x45
I32_EQ = 0x46
I32_NE = 0x47
I32_LT_S = 0x48
I32_LT_U = 0x49
I32_GT_S = 0x4A
I32_GT_U = 0x4B
I32_LE_S = 0x4C
I32_LE_U = 0x4D
I32_GE_S = 0x4E
I32_GE_U = 0x4F

# i64 compare
I64_EQZ = 0x50
I64_EQ = 0x51
I64_NE = 0x52
I64_LT_S = 0x53
I64_LT_U = 0x54
I64_GT_S = 0x55
I64_GT_U = 0x56
I64_LE_S = 0x57
I64_LE_U = 0x58
I64_GE_S = 0x59
I64_GE_U = 0x5A

# i32 arithmetic
I32_CLZ = 0x67
I32_CTZ = 0x68
I32_POPCNT = 0x69
I32_ADD = 0x6A
I32_SUB = 0x6B
I32_MUL = 0x6C
I32_DIV_S = 0x6D
I32_DIV_U = 0x6E
I32_REM_S = 0x6F
I32_REM_U = 0x70
I32_AND = 0x71
I32_OR = 0x72
I32_XOR = 0x73
I32_SHL = 0x74
I32_SHR_S = 0x75
I32_SHR_U = 0x76
I32_ROTL = 0x77
I32_ROTR = 0x78

# i64 arithmetic
I64_CLZ = 0x79
I64_CTZ = 0x7A
I64_POPCNT = 0x7B
I64_ADD = 0x7C
I64_SUB = 0x7D
I64_MUL = 0x7E
I64_DIV_S = 0x7F
I64_DIV_U = 0x80
I64_REM_S = 0x81
I64_REM_U = 0x82
I64_AND = 0x83
I64_OR = 0x84
I64_XOR = 0x85
I64_SHL = 0x86
I64_SHR_S = 0x87
I64_SHR_U = 0x88
I64_ROTL = 0x89
I64_ROTR = 0x8A

# Conversions (integer subset)
I32_WRAP_I64 = 0xA7
I64_EXTEND_I32_S = 0xAC
I64_EXTEND_I32_U = 0xAD

# Sign extension
I32_EXTEND8_S = 0xC0
I32_EXTEND16_S = 0xC1
I64_EXTEND8_S = 0xC2
I64_EXTEND16_S = 0xC3
I64_EXTEND32_S = 0xC4

# Bulk memory (0xFC prefix)
MEMORY_INIT = 0xFC08
DATA_DROP = 0xFC09
MEMORY_COPY = 0xFC0A
MEMORY_FILL = 0xFC0B


def _build_opcode_table() -> dict[int, tuple[str, int]]:
    t: dict[int, tuple[str, int]] = {
        UNREACHABLE: ("unreachable", IMM_NONE),
        NOP: ("nop", IMM_NONE),
        BLOCK: ("block", IMM_BLOCK),
        LOOP: ("loop", IMM_BLOCK),
        IF: ("if", IMM_BLOCK),
        ELSE: ("else", IMM_NONE),
        END: ("end", IMM_NONE),
        BR: ("br", IMM_IDX),
        BR_IF: ("br_if", IMM_IDX),
        BR_TABLE: ("br_table", IMM_BRTABLE),
        RETURN: ("return", IMM_NONE),
        CALL: ("call", IMM_IDX),
        CALL_INDIRECT: ("call_indirect", IMM_CALLIND),
        DROP: ("drop", IMM_NONE),
        SELECT: ("select", IMM_NONE),
        SELECT_T: ("select_t", IMM_SELECT_T),
        LOCAL_GET: ("local.get", IMM_IDX),
        LOCAL_SET: ("local.set", IMM_IDX),
        LOCAL_TEE: ("local.tee", IMM_IDX),
        GLOBAL_GET: ("global.get", IMM_IDX),
        GLOBAL_SET: ("global.set", IMM_IDX),
        TABLE_GET: ("table.get", IMM_IDX),
        TABLE_SET: ("table.set", IMM_IDX),
        MEMORY_SIZE: ("memory.size", IMM_MEM0),
        MEMORY_GROW: ("memory.grow", IMM_MEM0),
        I32_CONST: ("i32.const", IMM_I32),
        I64_CONST: ("i64.const", IMM_I64),
        F32_CONST: ("f32.const", IMM_F32),
        F64_CONST: ("f64.const", IMM_F64),
        MEMORY_INIT: ("memory.init", IMM_IDX_MEM),
        DATA_DROP: ("data.drop", IMM_IDX),
        MEMORY_COPY: ("memory.copy", IMM_MEM00),
        MEMORY_FILL: ("memory.fill", IMM_MEM0),
    }
    loads_stores = {
        I32_LOAD: "i32.load",
        I64_LOAD: "i64.load",
        F32_LOAD: "f32.load",
        F64_LOAD: "f64.load",
        I32_LOAD8_S: "i32.load8_s",
        I32_LOAD8_U: "i32.load8_u",
        I32_LOAD16_S: "i32.load16_s",
        I32_LOAD16_U: "i32.load16_u",
        I64_LOAD8_S: "i64.load8_s",
        I64_LOAD8_U: "i64.load8_u",
        I64_LOAD16_S: "i64.load16_s",
        I64_LOAD16_U: "i64.load16_u",
        I64_LOAD32_S: "i64.load32_s",
        I64_LOAD32_U: "i64.load32_u",
        I32_STORE: "i32.store",
        I64_STORE: "i64.store",
        F32_STORE: "f32.store",
        F64_STORE: "f64.store",
        I32_STORE8: "i32.store8",
        I32_STORE16: "i32.store16",
        I64_STORE8: "i64.store8",
        I64_STORE16: "i64.store16",
        I64_STORE32: "i64.store32",
    }
    for code, name in loads_stores.items():
        t[code] = (name, IMM_MEMARG)

    plain = {
        I32_EQZ: "i32.eqz",
        I32_EQ: "i32.eq",
        I32_NE: "i32.ne",
        I32_LT_S: "i32.lt_s",
        I32_LT_U: "i32.lt_u",
        I32_GT_S: "i32.gt_s",
        I32_GT_U: "i32.gt_u",
        I32_LE_S: "i32.le_s",
        I32_LE_U: "i32.le_u",
        I32_GE_S: "i32.ge_s",
        I32_GE_U: "i32.ge_u",
        I64_EQZ: "i64.eqz",
        I64_EQ: "i64.eq",
        I64_NE: "i64.ne",
        I64_LT_S: "i64.lt_s",
        I64_LT_U: "i64.lt_u",
        I64_GT_S: "i64.gt_s",
        I64_GT_U: "i64.gt_u",
        I64_LE_S: "i64.le_s",
        I64_LE_U: "i64.le_u",
        I64_GE_S: "i64.ge_s",
        I64_GE_U: "i64.ge_u",
        I32_CLZ: "i32.clz",
        I32_CTZ: "i32.ctz",
        I32_POPCNT: "i32.popcnt",
        I32_ADD: "i32.add",
        I32_SUB: "i32.sub",
        I32_MUL: "i32.mul",
        I32_DIV_S: "i32.div_s",
        I32_DIV_U: "i32.div_u",
        I32_REM_S: "i32.rem_s",
        I32_REM_U: "i32.rem_u",
        I32_AND: "i32.and",
        I32_OR: "i32.or",
        I32_XOR: "i32.xor",
        I32_SHL: "i32.shl",
        I32_SHR_S: "i32.shr_s",
        I32_SHR_U: "i32.shr_u",
        I32_ROTL: "i32.rotl",
        I32_ROTR: "i32.rotr",
        I64_CLZ: "i64.clz",
        I64_CTZ: "i64.ctz",
        I64_POPCNT: "i64.popcnt",
        I64_ADD: "i64.add",
        I64_SUB: "i64.sub",
        I64_MUL: "i64.mul",
        I64_DIV_S: "i64.div_s",
        I64_DIV_U: "i64.div_u",
        I64_REM_S: "i64.rem_s",
        I64_REM_U: "i64.rem_u",
        I64_AND: "i64.and",
        I64_OR: "i64.or",
        I64_XOR: "i64.xor",
        I64_SHL: "i64.shl",
        I64_SHR_S: "i64.shr_s",
        I64_SHR_U: "i64.shr_u",
        I64_ROTL: "i64.rotl",
        I64_ROTR: "i64.rotr",
        I32_WRAP_I64: "i32.wrap_i64",
        I64_EXTEND_I32_S: "i64.extend_i32_s",
        I64_EXTEND_I32_U: "i64.extend_i32_u",
        I32_EXTEND8_S: "i32.extend8_s",
        I32_EXTEND16_S: "i32.extend16_s",
        I64_EXTEND8_S: "i64.extend8_s",
        I64_EXTEND16_S: "i64.extend16_s",
        I64_EXTEND32_S: "i64.extend32_s",
    }
    for code, name in plain.items():
        t[code] = (name, IMM_NONE)

    # Float compares (0x5B-0x66), unary/binary float math and float
    # conversions (0x8B-0xBF): structurally plain, rejected during lowering.
    float_names = {
        0x5B: "f32.eq", 0x5C: "f32.ne", 0x5D: "f32.lt", 0x5E: "f32.gt",
        0x5F: "f32.le", 0x60: "f32.ge", 0x61: "f64.eq", 0x62: "f64.ne",
        0x63: "f64.lt", 0x64: "f64.gt", 0x65: "f64.le", 0x66: "f64.ge",
    }
    for code, name in float_names.items():
        t[code] = (name, IMM_NONE)
    for code in range(0x8B, 0xC0):
        if code not in t:
            t[code] = (f"float-op-0x{code:02x}", IMM_NONE)
    # Saturating truncations 0xFC00-0xFC07: plain immediates, rejected later.
    for sub in range(8):
        t[0xFC00 | sub] = (f"sat-trunc-0x{sub:x}", IMM_NONE)
    return t


OPCODES: dict[int, tuple[str, int]] = _build_opcode_table()
OPCODE_NAMES: dict[int, str] = {code: name for code, (name, _) in OPCODES.items()}
NAME_TO_OPCODE: dict[str, int] = {name: code for code, (name, _) in OPCODES.items()}
