"""LEB128 varint codec used by the wasm binary format."""

from __future__ import annotations


class LEBError(ValueError):
    pass


def write_u(value: int) -> bytes:
    if value < 0:
        raise LEBError(f"unsigned LEB from negative value {value}")
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def write_s(value: int) -> bytes:
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7  # arithmetic shift: preserves sign
        done = (value == 0 and not byte & 0x40) or (value == -1 and byte & 0x40)
        if done:
            out.append(byte)
            return bytes(out)
        out.append(byte | 0x80)


def read_u(buf: bytes, pos: int, bits: int = 32) -> tuple[int, int]:
    result = 0
    shift = 0
    max_bytes = (bits + 6) // 7
    for i in range(max_bytes):
        if pos + i >= len(buf):
            raise LEBError("truncated LEB128")
        byte = buf[pos + i]
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            if result >> bits:
                raise LEBError(f"LEB128 value exceeds {bits} bits")
            return result, pos + i + 1
        shift += 7
    raise LEBError(f"LEB128 longer than {max_bytes} bytes for u{bits}")


def read_s(buf: bytes, pos: int, bits: int = 32) -> tuple[int, int]:
    result = 0
    shift = 0
    max_bytes = (bits + 6) // 7
    for i in range(max_bytes):
        if pos + i >= len(buf):
            raise LEBError("truncated LEB128")
        byte = buf[pos + i]
        result |= (byte & 0x7F) << shift
        shift += 7
        if not byte & 0x80:
            if byte & 0x40:
                result |= -1 << shift
            lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
            if not lo <= result <= hi:
                raise LEBError(f"LEB128 value out of s{bits} range")
            return result, pos + i + 1
    raise LEBError(f"LEB128 longer than {max_bytes} bytes for s{bits}")
