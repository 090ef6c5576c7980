"""Host/guest boundary contract: the envelope wire format and the module ABI.

Every byte string that crosses the WebAssembly boundary in either direction is
an *envelope*, a little-endian binary frame:

    offset  size  field
    0       1     version   (currently 1)
    1       1     kind      (1=Request, 2=Response, 3=WatchEvent, 4=StreamClosed)
    2       1     method    (0=None, 1=GET, 2=POST, 3=PUT, 4=DELETE, 5=PATCH, 6=WATCH)
    3       2     status    (u16; HTTP-style code on completions, 0 elsewhere)
    5       4     path_len  (u32)
    9       P     path      (UTF-8)
    9+P     4     body_len  (u32)
    13+P    B     body      (opaque bytes, usually JSON)

A frame is exactly 13+P+B bytes. Two structural invariants hold on top of the
field ranges: a Request carries status 0, and a non-Request carries method
None. Decoding rejects any frame that violates them.

Completion conventions (host to guest): a finished request is a Response with
its HTTP status; a timer expiry is a Response with status 200 and empty body;
a watch delivery is a WatchEvent with status 200 whose body is one event
document; a terminated stream is a StreamClosed with status 0 and empty body.

The module ABI is listed here as data so the compiler can validate controller
modules by name: guests must export `start`, `allocate`, `wakeup`, and a
memory named "memory", may export `config`, and may import only the host
functions in HOST_IMPORTS plus the small WASI subset the engine provides.
Async operation ids are u64, assigned per instance starting at 1; 0 never
identifies a host operation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

ENVELOPE_VERSION = 1
HEADER_LEN = 13

DEFAULT_MAX_PATH_LEN = 1 << 20  # 1 MiB
DEFAULT_MAX_BODY_LEN = 16 << 20  # 16 MiB

NO_ASYNC_ID = 0

_HEADER = struct.Struct("<BBBHI")  # version, kind, method, status, path_len
_U32 = struct.Struct("<I")


class EnvelopeKind(IntEnum):
    REQUEST = 1
    RESPONSE = 2
    WATCH_EVENT = 3
    STREAM_CLOSED = 4


class Method(IntEnum):
    NONE = 0
    GET = 1
    POST = 2
    PUT = 3
    DELETE = 4
    PATCH = 5
    WATCH = 6


class EnvelopeError(Exception):
    """Base for envelope codec failures; `violation` names the broken rule."""

    def __init__(self, violation: str, detail: str = ""):
        self.violation = violation
        super().__init__(f"{violation}: {detail}" if detail else violation)


class EncodingError(EnvelopeError):
    pass


class DecodingError(EnvelopeError):
    pass


@dataclass(frozen=True, slots=True)
class Envelope:
    kind: EnvelopeKind
    method: Method = Method.NONE
    status: int = 0
    path: str = ""
    body: bytes = b""
    version: int = ENVELOPE_VERSION

    @staticmethod
    def request(method: Method, path: str, body: bytes = b"") -> "Envelope":
        return Envelope(EnvelopeKind.REQUEST, method=method, path=path, body=body)

    @staticmethod
    def response(status: int, body: bytes = b"") -> "Envelope":
        return Envelope(EnvelopeKind.RESPONSE, status=status, body=body)

    @staticmethod
    def watch_event(body: bytes) -> "Envelope":
        return Envelope(EnvelopeKind.WATCH_EVENT, status=200, body=body)

    @staticmethod
    def stream_closed() -> "Envelope":
        return Envelope(EnvelopeKind.STREAM_CLOSED)


def _check_shape(
    e: Envelope,
    err: type[EnvelopeError],
    path_bytes: bytes,
    body_len: int,
    max_path_len: int,
    max_body_len: int,
) -> None:
    if e.version != ENVELOPE_VERSION:
        raise err("bad_version", f"got {e.version}")
    if e.kind not in set(EnvelopeKind):
        raise err("bad_kind", f"got {int(e.kind)}")
    if e.method not in set(Method):
        raise err("bad_method", f"got {int(e.method)}")
    if not 0 <= e.status <= 0xFFFF:
        raise err("bad_status", f"got {e.status}")
    if e.kind == EnvelopeKind.REQUEST and e.status != 0:
        raise err("status_nonzero_for_request", f"status={e.status}")
    if e.kind != EnvelopeKind.REQUEST and e.method != Method.NONE:
        raise err("method_set_for_non_request", f"method={int(e.method)}")
    if len(path_bytes) > max_path_len:
        raise err("path_too_long", f"{len(path_bytes)} > {max_path_len}")
    if body_len > max_body_len:
        raise err("body_too_long", f"{body_len} > {max_body_len}")


def encode_envelope(
    e: Envelope,
    *,
    max_path_len: int = DEFAULT_MAX_PATH_LEN,
    max_body_len: int = DEFAULT_MAX_BODY_LEN,
) -> bytes:
    path_bytes = e.path.encode("utf-8")
    _check_shape(e, EncodingError, path_bytes, len(e.body), max_path_len, max_body_len)
    parts = [
        _HEADER.pack(e.version, int(e.kind), int(e.method), e.status, len(path_bytes)),
        path_bytes,
        _U32.pack(len(e.body)),
        e.body,
    ]
    return b"".join(parts)


def decode_envelope(
    buf: bytes,
    *,
    max_path_len: int = DEFAULT_MAX_PATH_LEN,
    max_body_len: int = DEFAULT_MAX_BODY_LEN,
) -> Envelope:
    if len(buf) < HEADER_LEN:
        raise DecodingError("too_short", f"{len(buf)} bytes")
    version, kind_raw, method_raw, status, path_len = _HEADER.unpack_from(buf, 0)
    if version != ENVELOPE_VERSION:
        raise DecodingError("bad_version", f"got {version}")
    try:
        kind = EnvelopeKind(kind_raw)
    except ValueError:
        raise DecodingError("bad_kind", f"got {kind_raw}") from None
    try:
        method = Method(method_raw)
    except ValueError:
        raise DecodingError("bad_method", f"got {method_raw}") from None
    if path_len > max_path_len:
        raise DecodingError("path_too_long", f"{path_len} > {max_path_len}")
    body_off = 9 + path_len
    if len(buf) < body_off + 4:
        raise DecodingError("length_mismatch", "frame shorter than declared path")
    (body_len,) = _U32.unpack_from(buf, body_off)
    if body_len > max_body_len:
        raise DecodingError("body_too_long", f"{body_len} > {max_body_len}")
    total = HEADER_LEN + path_len + body_len
    if len(buf) != total:
        raise DecodingError("length_mismatch", f"frame is {len(buf)} bytes, declared {total}")
    try:
        path = buf[9:body_off].decode("utf-8")
    except UnicodeDecodeError:
        raise DecodingError("path_not_utf8") from None
    e = Envelope(
        kind=kind,
        method=method,
        status=status,
        path=path,
        body=bytes(buf[body_off + 4 : total]),
        version=version,
    )
    # Re-run the structural rules so a mutated header byte cannot smuggle an
    # inconsistent frame through (e.g. a Request with a status).
    _check_shape(e, DecodingError, buf[9:body_off], body_len, max_path_len, max_body_len)
    return e


# --- module ABI tables (signatures use "i32"/"i64" value-type names) ---

HOST_IMPORT_MODULE = "env"

HOST_IMPORTS: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "kube_request": (("i32", "i32"), ("i64",)),
    "delay": (("i64",), ("i64",)),
    "log": (("i32", "i32"), ()),
}

GUEST_EXPORTS: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "start": ((), ()),
    "allocate": (("i32",), ("i32",)),
    "wakeup": (("i64", "i32", "i32"), ()),
    "config": (("i32", "i32"), ()),
}

REQUIRED_EXPORTS = ("start", "allocate", "wakeup")
MEMORY_EXPORT = "memory"
