"""Runtime fragments shared by every guest controller module.

A guest built from :class:`GuestProgram` owns a fixed linear-memory layout:

========================  =====================================================
``0x0040 .. 0x00FF``      fixed result cells for multi-value helpers
``0x0100 .. 0x3FFF``      static data (string literals, JSON needles)
``0x4000 .. 0x47FF``      pending-operation table, 64 entries x 32 bytes
``0x5000 .. 0x53FF``      scratch: request path assembly
``0x5400 .. 0x5FFF``      scratch: request body assembly
``0x6000 .. 0x87FF``      scratch: outgoing envelope assembly
``0x10000 .. 0x1FFFF``    inbox page — ``allocate`` hands out this region
``0x20000 ..``            persistent bump heap (config strings, ballast)
========================  =====================================================

Everything below the inbox is scratch that may be clobbered between turns;
everything at or above the heap base — plus the wasm globals — is state that
must survive an unload/reload cycle, because the snapshot captures all of
linear memory and the globals.

Pending-table entry layout (32 bytes)::

    +0   u64  operation id (host-issued, or high-bit-set for in-guest tasks)
    +8   u32  state: 0 free, 1 waiting, 2 ready
    +12  u32  handler tag
    +16  u32  payload ptr   (valid only while the entry is being dispatched)
    +20  u32  payload len
    +24  u32  user slot 0
    +28  u32  user slot 1

The executor (`drain`) repeatedly finds a READY entry, flips it back to
WAITING, and calls the handler registered for its tag.  A request/response
handler deletes its entry when done; a watch handler leaves it WAITING so the
next event for the same operation id finds it, and deletes it only on a
stream-closed payload.
"""

from __future__ import annotations

from wasmop import abi
from wasmop.guest.dsl import I32, I64, FnWriter, FuncRef, GlobalRef, GuestModule

# -- fixed addresses ----------------------------------------------------------

CELL_PARSE_END = 0x40  # u32: one-past-last position consumed by parse_u64
CELL_STR_PTR = 0x44  # u32: value start from json_find_str
CELL_STR_LEN = 0x48  # u32: value length from json_find_str
CELL_FOUND = 0x4C  # u32: found flag from json_find_u64

PENDING_TABLE = 0x4000
PENDING_SLOTS = 64
PENDING_ENTRY_SIZE = 32
PENDING_TABLE_END = PENDING_TABLE + PENDING_SLOTS * PENDING_ENTRY_SIZE

STATE_FREE = 0
STATE_WAITING = 1
STATE_READY = 2

SCRATCH_PATH = 0x5000
SCRATCH_BODY = 0x5400
SCRATCH_ENV = 0x6000
SCRATCH_ENV_CAP = 0x2800

INBOX_BASE = 0x10000
INBOX_CAP = 0x10000

HEAP_BASE = 0x20000

#: In-guest task ids live in a separate id space from host-issued operation
#: ids (which are monotonically assigned from 1), marked by the top bit.
TASK_ID_BASE_SIGNED = -(1 << 63)

# Entry field offsets.
OFF_ID = 0
OFF_STATE = 8
OFF_TAG = 12
OFF_PAYLOAD_PTR = 16
OFF_PAYLOAD_LEN = 20
OFF_USER0 = 24
OFF_USER1 = 28

# Wire constants, mirrored from the envelope codec.
KIND_REQUEST = int(abi.EnvelopeKind.REQUEST)
KIND_RESPONSE = int(abi.EnvelopeKind.RESPONSE)
KIND_WATCH_EVENT = int(abi.EnvelopeKind.WATCH_EVENT)
KIND_STREAM_CLOSED = int(abi.EnvelopeKind.STREAM_CLOSED)

METHOD_GET = int(abi.Method.GET)
METHOD_POST = int(abi.Method.POST)
METHOD_PUT = int(abi.Method.PUT)
METHOD_DELETE = int(abi.Method.DELETE)
METHOD_PATCH = int(abi.Method.PATCH)
METHOD_WATCH = int(abi.Method.WATCH)


class Lib:
    """Function references to the shared runtime fragments of one program."""

    __slots__ = (
        "kube_request",
        "delay",
        "log",
        "append",
        "fmt_u64",
        "parse_u64",
        "mem_find",
        "json_find_str",
        "json_find_u64",
        "pending_find",
        "pending_put",
        "pending_ready",
        "pending_del",
        "persist_alloc",
        "ballast_init",
        "env_submit",
        "op_submit",
        "op_delay",
        "task_post",
        "env_kind",
        "env_status",
        "env_body_ptr",
        "env_body_len",
        "drain",
        "dispatch",
    )


class GuestProgram:
    """Assembles one controller guest: imports, shared runtime fragments, the
    host-facing exports (`allocate`/`wakeup`/`start`, optionally `config`),
    and program-specific handlers dispatched by tag."""

    def __init__(self, *, min_pages: int = 2, max_pages: int | None = None) -> None:
        m = GuestModule(min_pages=min_pages, max_pages=max_pages)
        self.m = m
        lib = Lib()
        self.lib = lib

        lib.kube_request = m.import_func("kube_request", (I32, I32), (I64,))
        lib.delay = m.import_func("delay", (I64,), (I64,))
        lib.log = m.import_func("log", (I32, I32), ())

        self.g_heap = m.global_(HEAP_BASE, I32, export="heap_end")
        self.g_task_seq = m.global_(0, I64)

        self._handlers: list[tuple[int, FuncRef]] = []
        self._tags_seen: set[int] = set()
        self._main_ref = m.declare("main")
        self._main_defined = False
        lib.dispatch = m.declare("dispatch", (("tag", I32), ("entry", I32)))

        self._define_lib()
        self._define_exports()

        self._config_globals: tuple[GlobalRef, ...] | None = None
        self._built: bytes | None = None

    # -- program-facing surface ------------------------------------------------

    def handler(self, tag: int, name: str) -> FnWriter:
        """Declare the handler dispatched for `tag`; body receives the entry ptr."""
        if tag in self._tags_seen:
            raise ValueError(f"handler tag {tag} registered twice")
        self._tags_seen.add(tag)
        ref = self.m.declare(name, (("entry", I32),))
        self._handlers.append((tag, ref))
        return self.m.define(ref)

    def main(self) -> FnWriter:
        """Define the body run once at `start`, before the first drain."""
        if self._main_defined:
            raise ValueError("main defined twice")
        self._main_defined = True
        return self.m.define(self._main_ref)

    def config_writer(self) -> FnWriter:
        """Declare and define the optional `config(ptr, len)` export."""
        return self.m.func(
            "config", (("ptr", I32), ("len", I32)), export="config"
        )

    def standard_config(self) -> tuple[GlobalRef, GlobalRef, GlobalRef, GlobalRef]:
        """Install the stock config parser and return its globals.

        Parses ``{"source":"...","dest":"...","ballast_bytes":N}`` strictly
        (any missing key traps), copies both strings into the persistent heap,
        and initialises the ballast region.  Returns
        ``(g_src_ptr, g_src_len, g_dst_ptr, g_dst_len)``.
        """
        f = self.config_writer()
        globals_ = self.emit_standard_config(f)
        return globals_

    def emit_standard_config(
        self, f: FnWriter
    ) -> tuple[GlobalRef, GlobalRef, GlobalRef, GlobalRef]:
        """Emit the stock config-parsing sequence into a config body.

        Assumes the writer's params are ``(ptr, len)`` at indices 0 and 1.
        """
        if self._config_globals is not None:
            raise ValueError("standard config emitted twice")
        m, lib = self.m, self.lib
        g_src_ptr = m.global_(0, I32)
        g_src_len = m.global_(0, I32)
        g_dst_ptr = m.global_(0, I32)
        g_dst_len = m.global_(0, I32)
        self._config_globals = (g_src_ptr, g_src_len, g_dst_ptr, g_dst_len)

        ptr, ln = 0, 1
        sl = f.local("sl")
        sp = f.local("sp")
        val = f.local("val", I64)

        for needle, g_ptr, g_len in (
            ('"source":"', g_src_ptr, g_src_len),
            ('"dest":"', g_dst_ptr, g_dst_len),
        ):
            np_, nl_ = m.data(needle)
            f.get(ptr)
            f.get(ln)
            f.i32(np_)
            f.i32(nl_)
            f.call(lib.json_find_str)
            f.eqz()
            with f.if_():
                f.unreachable()
            f.i32(CELL_STR_LEN)
            f.load32(0)
            f.set(sl)
            f.get(sl)
            f.call(lib.persist_alloc)
            f.set(sp)
            f.get(sp)
            f.i32(CELL_STR_PTR)
            f.load32(0)
            f.get(sl)
            f.memory_copy()
            f.get(sp)
            f.gset(g_ptr)
            f.get(sl)
            f.gset(g_len)

        np_, nl_ = m.data('"ballast_bytes":')
        f.get(ptr)
        f.get(ln)
        f.i32(np_)
        f.i32(nl_)
        f.call(lib.json_find_u64)
        f.set(val)
        f.i32(CELL_FOUND)
        f.load32(0)
        f.eqz()
        with f.if_():
            f.unreachable()
        f.get(val)
        f.call(lib.ballast_init)
        return self._config_globals

    def append_data(self, f: FnWriter, cursor: int, text: str | bytes) -> None:
        """Emit: cursor = append(cursor, <static data for text>)."""
        dp, dl = self.m.data(text)
        f.get(cursor)
        f.i32(dp)
        f.i32(dl)
        f.call(self.lib.append)
        f.set(cursor)

    def build(self) -> bytes:
        if self._built is not None:
            return self._built
        if not self._main_defined:
            self.m.define(self._main_ref)  # empty body: start registers nothing
            self._main_defined = True
        f = self.m.define(self.lib.dispatch)
        tag, entry = 0, 1
        for value, ref in self._handlers:
            f.get(tag)
            f.i32(value)
            f.eq()
            with f.if_():
                f.get(entry)
                f.call(ref)
                f.ret()
        f.unreachable()  # unknown tag: a wiring bug, fail loudly
        self._built = self.m.build()
        return self._built

    # -- shared fragments --------------------------------------------------------

    def _define_lib(self) -> None:
        m, lib = self.m, self.lib

        # append(dst, src, n) -> dst + n
        f = m.func("append", (("dst", I32), ("src", I32), ("n", I32)), (I32,))
        lib.append = f.ref
        f.get(0)
        f.get(1)
        f.get(2)
        f.memory_copy()
        f.get(0)
        f.get(2)
        f.add()

        # fmt_u64(v, dst) -> digit count; writes decimal digits at dst
        f = m.func("fmt_u64", (("v", I64), ("dst", I32)), (I32,))
        lib.fmt_u64 = f.ref
        n = f.local("n")
        t = f.local("t", I64)
        i = f.local("i")
        f.i32(0)
        f.set(n)
        f.get(0)
        f.set(t)
        with f.loop() as top:
            f.get(n)
            f.i32(1)
            f.add()
            f.set(n)
            f.get(t)
            f.i64(10)
            f.op("i64.div_u")
            f.tee(t)
            f.i64(0)
            f.op("i64.ne")
            f.br_if(top)
        f.get(n)
        f.set(i)
        f.get(0)
        f.set(t)
        with f.loop() as top:
            f.get(i)
            f.i32(1)
            f.sub()
            f.set(i)
            f.get(1)
            f.get(i)
            f.add()
            f.get(t)
            f.i64(10)
            f.op("i64.rem_u")
            f.op("i32.wrap_i64")
            f.i32(0x30)
            f.add()
            f.store8(0)
            f.get(t)
            f.i64(10)
            f.op("i64.div_u")
            f.set(t)
            f.get(i)
            f.br_if(top)
        f.get(n)

        # parse_u64(ptr, end) -> value; records stop position in CELL_PARSE_END;
        # traps unless at least one digit is present at ptr.
        f = m.func("parse_u64", (("ptr", I32), ("end", I32)), (I64,))
        lib.parse_u64 = f.ref
        v = f.local("v", I64)
        p = f.local("p")
        c = f.local("c")
        f.get(0)
        f.set(p)
        f.get(p)
        f.get(1)
        f.ge_u()
        with f.if_():
            f.unreachable()
        f.get(p)
        f.load_u8(0)
        f.set(c)
        f.get(c)
        f.i32(0x30)
        f.lt_u()
        with f.if_():
            f.unreachable()
        f.get(c)
        f.i32(0x39)
        f.gt_u()
        with f.if_():
            f.unreachable()
        f.i64(0)
        f.set(v)
        with f.block() as done:
            with f.loop() as top:
                f.get(v)
                f.i64(10)
                f.op("i64.mul")
                f.get(c)
                f.i32(0x30)
                f.sub()
                f.op("i64.extend_i32_u")
                f.op("i64.add")
                f.set(v)
                f.get(p)
                f.i32(1)
                f.add()
                f.set(p)
                f.get(p)
                f.get(1)
                f.ge_u()
                f.br_if(done)
                f.get(p)
                f.load_u8(0)
                f.set(c)
                f.get(c)
                f.i32(0x30)
                f.lt_u()
                f.br_if(done)
                f.get(c)
                f.i32(0x39)
                f.gt_u()
                f.br_if(done)
                f.br(top)
        f.i32(CELL_PARSE_END)
        f.get(p)
        f.store32(0)
        f.get(v)

        # mem_find(hay, hay_len, needle, needle_len) -> first index or -1
        f = m.func(
            "mem_find",
            (("hay", I32), ("hay_len", I32), ("np", I32), ("nl", I32)),
            (I32,),
        )
        lib.mem_find = f.ref
        i = f.local("i")
        j = f.local("j")
        limit = f.local("limit")
        f.get(3)
        f.eqz()
        with f.if_():
            f.i32(0)
            f.ret()
        f.get(3)
        f.get(1)
        f.gt_u()
        with f.if_():
            f.i32(-1)
            f.ret()
        f.get(1)
        f.get(3)
        f.sub()
        f.set(limit)
        f.i32(0)
        f.set(i)
        with f.block() as fail:
            with f.loop() as outer:
                f.get(i)
                f.get(limit)
                f.gt_u()
                f.br_if(fail)
                f.i32(0)
                f.set(j)
                with f.block() as mismatch:
                    with f.loop() as inner:
                        f.get(j)
                        f.get(3)
                        f.ge_u()
                        with f.if_():
                            f.get(i)
                            f.ret()
                        f.get(0)
                        f.get(i)
                        f.add()
                        f.get(j)
                        f.add()
                        f.load_u8(0)
                        f.get(2)
                        f.get(j)
                        f.add()
                        f.load_u8(0)
                        f.ne()
                        f.br_if(mismatch)
                        f.get(j)
                        f.i32(1)
                        f.add()
                        f.set(j)
                        f.br(inner)
                f.get(i)
                f.i32(1)
                f.add()
                f.set(i)
                f.br(outer)
        f.i32(-1)

        # json_find_str(body, blen, np, nl) -> found; value via CELL_STR_PTR/LEN.
        # Scans for the needle (which includes the opening quote) and takes the
        # run up to the next double quote; bodies here never contain escapes.
        f = m.func(
            "json_find_str",
            (("body", I32), ("blen", I32), ("np", I32), ("nl", I32)),
            (I32,),
        )
        lib.json_find_str = f.ref
        idx = f.local("idx")
        s = f.local("s")
        e2 = f.local("e2")
        f.get(0)
        f.get(1)
        f.get(2)
        f.get(3)
        f.call(lib.mem_find)
        f.tee(idx)
        f.i32(-1)
        f.eq()
        with f.if_():
            f.i32(0)
            f.ret()
        f.get(0)
        f.get(idx)
        f.add()
        f.get(3)
        f.add()
        f.set(s)
        f.get(s)
        f.set(e2)
        with f.block() as done:
            with f.loop() as top:
                f.get(e2)
                f.get(0)
                f.get(1)
                f.add()
                f.ge_u()
                with f.if_():
                    f.i32(0)
                    f.ret()
                f.get(e2)
                f.load_u8(0)
                f.i32(0x22)
                f.eq()
                f.br_if(done)
                f.get(e2)
                f.i32(1)
                f.add()
                f.set(e2)
                f.br(top)
        f.i32(CELL_STR_PTR)
        f.get(s)
        f.store32(0)
        f.i32(CELL_STR_LEN)
        f.get(e2)
        f.get(s)
        f.sub()
        f.store32(0)
        f.i32(1)

        # json_find_u64(body, blen, np, nl) -> value; CELL_FOUND reports success.
        f = m.func(
            "json_find_u64",
            (("body", I32), ("blen", I32), ("np", I32), ("nl", I32)),
            (I64,),
        )
        lib.json_find_u64 = f.ref
        idx = f.local("idx")
        f.get(0)
        f.get(1)
        f.get(2)
        f.get(3)
        f.call(lib.mem_find)
        f.tee(idx)
        f.i32(-1)
        f.eq()
        with f.if_():
            f.i32(CELL_FOUND)
            f.i32(0)
            f.store32(0)
            f.i64(0)
            f.ret()
        f.i32(CELL_FOUND)
        f.i32(1)
        f.store32(0)
        f.get(0)
        f.get(idx)
        f.add()
        f.get(3)
        f.add()
        f.get(0)
        f.get(1)
        f.add()
        f.call(lib.parse_u64)

        # pending_find(id) -> entry ptr or 0
        f = m.func("pending_find", (("id", I64),), (I32,))
        lib.pending_find = f.ref
        p = f.local("p")
        f.i32(PENDING_TABLE)
        f.set(p)
        with f.loop() as top:
            f.get(p)
            f.load32(OFF_STATE)
            with f.if_():
                f.get(p)
                f.load64(OFF_ID)
                f.get(0)
                f.op("i64.eq")
                with f.if_():
                    f.get(p)
                    f.ret()
            f.get(p)
            f.i32(PENDING_ENTRY_SIZE)
            f.add()
            f.tee(p)
            f.i32(PENDING_TABLE_END)
            f.lt_u()
            f.br_if(top)
        f.i32(0)

        # pending_put(id, tag) -> entry ptr; traps when the table is full
        f = m.func("pending_put", (("id", I64), ("tag", I32)), (I32,))
        lib.pending_put = f.ref
        p = f.local("p")
        f.i32(PENDING_TABLE)
        f.set(p)
        with f.loop() as top:
            f.get(p)
            f.load32(OFF_STATE)
            f.eqz()
            with f.if_():
                f.get(p)
                f.get(0)
                f.store64(OFF_ID)
                f.get(p)
                f.i32(STATE_WAITING)
                f.store32(OFF_STATE)
                f.get(p)
                f.get(1)
                f.store32(OFF_TAG)
                f.get(p)
                f.i32(0)
                f.store32(OFF_PAYLOAD_PTR)
                f.get(p)
                f.i32(0)
                f.store32(OFF_PAYLOAD_LEN)
                f.get(p)
                f.i32(0)
                f.store32(OFF_USER0)
                f.get(p)
                f.i32(0)
                f.store32(OFF_USER1)
                f.get(p)
                f.ret()
            f.get(p)
            f.i32(PENDING_ENTRY_SIZE)
            f.add()
            f.tee(p)
            f.i32(PENDING_TABLE_END)
            f.lt_u()
            f.br_if(top)
        f.unreachable()

        # pending_ready() -> first READY entry or 0
        f = m.func("pending_ready", (), (I32,))
        lib.pending_ready = f.ref
        p = f.local("p")
        f.i32(PENDING_TABLE)
        f.set(p)
        with f.loop() as top:
            f.get(p)
            f.load32(OFF_STATE)
            f.i32(STATE_READY)
            f.eq()
            with f.if_():
                f.get(p)
                f.ret()
            f.get(p)
            f.i32(PENDING_ENTRY_SIZE)
            f.add()
            f.tee(p)
            f.i32(PENDING_TABLE_END)
            f.lt_u()
            f.br_if(top)
        f.i32(0)

        # pending_del(entry)
        f = m.func("pending_del", (("entry", I32),))
        lib.pending_del = f.ref
        f.get(0)
        f.i64(0)
        f.store64(OFF_ID)
        f.get(0)
        f.i32(STATE_FREE)
        f.store32(OFF_STATE)

        # persist_alloc(n) -> ptr; bump allocation, growing memory on demand
        f = m.func("persist_alloc", (("n", I32),), (I32,))
        lib.persist_alloc = f.ref
        p = f.local("p")
        new = f.local("new")
        need = f.local("need")
        cur = f.local("cur")
        f.get(0)
        f.i32(0x4000_0000)
        f.ge_u()
        with f.if_():
            f.unreachable()
        f.gget(self.g_heap)
        f.set(p)
        f.get(p)
        f.get(0)
        f.add()
        f.i32(7)
        f.add()
        f.i32(-8)
        f.and_()
        f.set(new)
        f.get(new)
        f.i32(0xFFFF)
        f.add()
        f.i32(16)
        f.shr_u()
        f.set(need)
        f.memory_size()
        f.set(cur)
        f.get(need)
        f.get(cur)
        f.gt_u()
        with f.if_():
            f.get(need)
            f.get(cur)
            f.sub()
            f.memory_grow()
            f.i32(-1)
            f.eq()
            with f.if_():
                f.unreachable()
        f.get(new)
        f.gset(self.g_heap)
        f.get(p)

        # ballast_init(v): allocate v bytes and touch one byte per 4 KiB page
        f = m.func("ballast_init", (("v", I64),))
        lib.ballast_init = f.ref
        n = f.local("n")
        p = f.local("p")
        i = f.local("i")
        f.get(0)
        f.op("i64.eqz")
        with f.if_():
            f.ret()
        f.get(0)
        f.i64(0x4000_0000)
        f.op("i64.ge_u")
        with f.if_():
            f.unreachable()
        f.get(0)
        f.op("i32.wrap_i64")
        f.set(n)
        f.get(n)
        f.call(lib.persist_alloc)
        f.set(p)
        f.i32(0)
        f.set(i)
        with f.block() as done:
            with f.loop() as top:
                f.get(i)
                f.get(n)
                f.ge_u()
                f.br_if(done)
                f.get(p)
                f.get(i)
                f.add()
                f.i32(0xA5)
                f.store8(0)
                f.get(i)
                f.i32(4096)
                f.add()
                f.set(i)
                f.br(top)
        f.get(p)
        f.get(n)
        f.add()
        f.i32(1)
        f.sub()
        f.i32(0xA5)
        f.store8(0)

        # env_submit(method, path, path_len, body, body_len) -> operation id
        f = m.func(
            "env_submit",
            (
                ("method", I32),
                ("path", I32),
                ("path_len", I32),
                ("body", I32),
                ("body_len", I32),
            ),
            (I64,),
        )
        lib.env_submit = f.ref
        total = f.local("total")
        f.i32(13)
        f.get(2)
        f.add()
        f.get(4)
        f.add()
        f.set(total)
        f.get(total)
        f.i32(SCRATCH_ENV_CAP)
        f.gt_u()
        with f.if_():
            f.unreachable()
        f.i32(SCRATCH_ENV)
        f.i32(1)
        f.store8(0)  # version
        f.i32(SCRATCH_ENV)
        f.i32(KIND_REQUEST)
        f.store8(1)
        f.i32(SCRATCH_ENV)
        f.get(0)
        f.store8(2)
        f.i32(SCRATCH_ENV)
        f.i32(0)
        f.store16(3)  # status
        f.i32(SCRATCH_ENV)
        f.get(2)
        f.store32(5)  # path_len
        f.i32(SCRATCH_ENV + 9)
        f.get(1)
        f.get(2)
        f.memory_copy()
        f.i32(SCRATCH_ENV + 9)
        f.get(2)
        f.add()
        f.get(4)
        f.store32(0)  # body_len
        f.i32(SCRATCH_ENV + 13)
        f.get(2)
        f.add()
        f.get(3)
        f.get(4)
        f.memory_copy()
        f.i32(SCRATCH_ENV)
        f.get(total)
        f.call(lib.kube_request)

        # op_submit(...) -> pending entry for the submitted request
        f = m.func(
            "op_submit",
            (
                ("method", I32),
                ("path", I32),
                ("path_len", I32),
                ("body", I32),
                ("body_len", I32),
                ("tag", I32),
            ),
            (I32,),
        )
        lib.op_submit = f.ref
        f.get(0)
        f.get(1)
        f.get(2)
        f.get(3)
        f.get(4)
        f.call(lib.env_submit)
        f.get(5)
        f.call(lib.pending_put)

        # op_delay(ms, tag) -> pending entry for the timer
        f = m.func("op_delay", (("ms", I64), ("tag", I32)), (I32,))
        lib.op_delay = f.ref
        f.get(0)
        f.call(lib.delay)
        f.get(1)
        f.call(lib.pending_put)

        # task_post(tag, a, b) -> entry: an in-guest task, immediately READY
        f = m.func("task_post", (("tag", I32), ("a", I32), ("b", I32)), (I32,))
        lib.task_post = f.ref
        e = f.local("e")
        f.gget(self.g_task_seq)
        f.i64(1)
        f.op("i64.add")
        f.gset(self.g_task_seq)
        f.gget(self.g_task_seq)
        f.i64(TASK_ID_BASE_SIGNED)
        f.op("i64.or")
        f.get(0)
        f.call(lib.pending_put)
        f.set(e)
        f.get(e)
        f.get(1)
        f.store32(OFF_USER0)
        f.get(e)
        f.get(2)
        f.store32(OFF_USER1)
        f.get(e)
        f.i32(STATE_READY)
        f.store32(OFF_STATE)
        f.get(e)

        # envelope accessors over a delivered payload pointer
        f = m.func("env_kind", (("p", I32),), (I32,))
        lib.env_kind = f.ref
        f.get(0)
        f.load_u8(0)
        f.i32(1)
        f.ne()
        with f.if_():
            f.unreachable()  # unsupported envelope version
        f.get(0)
        f.load_u8(1)

        f = m.func("env_status", (("p", I32),), (I32,))
        lib.env_status = f.ref
        f.get(0)
        f.load_u16(3)

        f = m.func("env_body_len", (("p", I32),), (I32,))
        lib.env_body_len = f.ref
        f.get(0)
        f.load32(5)
        f.get(0)
        f.add()
        f.i32(9)
        f.add()
        f.load32(0)

        f = m.func("env_body_ptr", (("p", I32),), (I32,))
        lib.env_body_ptr = f.ref
        f.get(0)
        f.load32(5)
        f.get(0)
        f.add()
        f.i32(13)
        f.add()

        # drain(): dispatch READY entries until none remain
        f = m.func("drain")
        lib.drain = f.ref
        e = f.local("e")
        with f.block() as done:
            with f.loop() as top:
                f.call(lib.pending_ready)
                f.tee(e)
                f.eqz()
                f.br_if(done)
                f.get(e)
                f.i32(STATE_WAITING)
                f.store32(OFF_STATE)
                f.get(e)
                f.load32(OFF_TAG)
                f.get(e)
                f.call(lib.dispatch)
                f.br(top)

    def _define_exports(self) -> None:
        m, lib = self.m, self.lib

        f = m.func("allocate", (("n", I32),), (I32,), export="allocate")
        f.get(0)
        f.i32(INBOX_CAP)
        f.gt_u()
        with f.if_():
            f.unreachable()
        f.i32(INBOX_BASE)

        f = m.func(
            "wakeup",
            (("id", I64), ("ptr", I32), ("len", I32)),
            export="wakeup",
        )
        e = f.local("e")
        f.get(0)
        f.call(lib.pending_find)
        f.tee(e)
        f.eqz()
        with f.if_():
            f.unreachable()  # completion for an operation never registered
        f.get(e)
        f.get(1)
        f.store32(OFF_PAYLOAD_PTR)
        f.get(e)
        f.get(2)
        f.store32(OFF_PAYLOAD_LEN)
        f.get(e)
        f.i32(STATE_READY)
        f.store32(OFF_STATE)
        f.call(lib.drain)

        f = m.func("start", export="start")
        f.call(self._main_ref)
        f.call(lib.drain)
