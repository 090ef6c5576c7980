"""Concrete guest controller modules, assembled with the guest toolchain.

Each factory returns a complete wasm32 binary.  The flagship program is
`synthetic_operator`, the relay reconciler used by the benchmark chain: it
watches one namespace and mirrors each resource's `spec.nonce` into the
namespace it owns.  The remaining programs are small, targeted probes used by
the test suite: lifecycle completion, in-guest task chaining, state carried
across snapshot/restore, timers, and deliberate faults.
"""

from __future__ import annotations

import functools

from wasmop.guest import guestlib as gl
from wasmop.guest.dsl import I32, I64, GuestModule
from wasmop.guest.guestlib import GuestProgram

TAG_WATCH = 1
TAG_APPLY = 2
TAG_TIMER = 3
TAG_TASK_A = 4
TAG_TASK_B = 5

PATH_ROOT = "/apis/test.dev/v1/namespaces/"
COLLECTION = "/testresources"
WATCH_SUFFIX = "/testresources?resourceVersion=0"


def _emit_watch_source(p: GuestProgram, g_src_ptr, g_src_len) -> None:
    """main body: submit a watch on the configured source namespace."""
    f = p.main()
    cur = f.local("cur")
    f.i32(gl.SCRATCH_PATH)
    f.set(cur)
    p.append_data(f, cur, PATH_ROOT)
    f.get(cur)
    f.gget(g_src_ptr)
    f.gget(g_src_len)
    f.call(p.lib.append)
    f.set(cur)
    p.append_data(f, cur, WATCH_SUFFIX)
    f.i32(gl.METHOD_WATCH)
    f.i32(gl.SCRATCH_PATH)
    f.get(cur)
    f.i32(gl.SCRATCH_PATH)
    f.sub()
    f.i32(0)
    f.i32(0)
    f.i32(TAG_WATCH)
    f.call(p.lib.op_submit)
    f.drop()


def _emit_event_prologue(p: GuestProgram, f, plp: int):
    """Shared watch-handler entry: payload ptr into `plp`; deletes the entry
    and returns on stream-closed; traps on any kind other than a watch event.
    Returns locals (bp, bl) holding the event body."""
    k = f.local("k")
    bp = f.local("bp")
    bl = f.local("bl")
    f.get(0)
    f.load32(gl.OFF_PAYLOAD_PTR)
    f.set(plp)
    f.get(plp)
    f.call(p.lib.env_kind)
    f.tee(k)
    f.i32(gl.KIND_STREAM_CLOSED)
    f.eq()
    with f.if_():
        f.get(0)
        f.call(p.lib.pending_del)
        f.ret()
    f.get(k)
    f.i32(gl.KIND_WATCH_EVENT)
    f.ne()
    with f.if_():
        f.unreachable()
    f.get(plp)
    f.call(p.lib.env_body_ptr)
    f.set(bp)
    f.get(plp)
    f.call(p.lib.env_body_len)
    f.set(bl)
    return bp, bl


def _emit_find_nonce(p: GuestProgram, f, bp: int, bl: int, nonce: int) -> None:
    np_, nl_ = p.m.data('"nonce":')
    f.get(bp)
    f.get(bl)
    f.i32(np_)
    f.i32(nl_)
    f.call(p.lib.json_find_u64)
    f.set(nonce)
    f.i32(gl.CELL_FOUND)
    f.load32(0)
    f.eqz()
    with f.if_():
        f.unreachable()


@functools.lru_cache(maxsize=None)
def synthetic_operator() -> bytes:
    """Relay reconciler: on each event in the source namespace, PUT the same
    resource name into the dest namespace with the event's nonce."""
    p = GuestProgram()
    g_src_ptr, g_src_len, g_dst_ptr, g_dst_len = p.standard_config()
    g_applied = p.m.global_(0, I64, export="applied")

    _emit_watch_source(p, g_src_ptr, g_src_len)

    f = p.handler(TAG_WATCH, "on_event")
    plp = f.local("plp")
    bp, bl = _emit_event_prologue(p, f, plp)
    nonce = f.local("nonce", I64)
    _emit_find_nonce(p, f, bp, bl, nonce)
    name_ptr = f.local("name_ptr")
    name_len = f.local("name_len")
    np_, nl_ = p.m.data('"name":"')
    f.get(bp)
    f.get(bl)
    f.i32(np_)
    f.i32(nl_)
    f.call(p.lib.json_find_str)
    f.eqz()
    with f.if_():
        f.unreachable()
    f.i32(gl.CELL_STR_PTR)
    f.load32(0)
    f.set(name_ptr)
    f.i32(gl.CELL_STR_LEN)
    f.load32(0)
    f.set(name_len)
    # Path: <root><dest>/testresources/<name>
    cur = f.local("cur")
    f.i32(gl.SCRATCH_PATH)
    f.set(cur)
    p.append_data(f, cur, PATH_ROOT)
    f.get(cur)
    f.gget(g_dst_ptr)
    f.gget(g_dst_len)
    f.call(p.lib.append)
    f.set(cur)
    p.append_data(f, cur, COLLECTION + "/")
    f.get(cur)
    f.get(name_ptr)
    f.get(name_len)
    f.call(p.lib.append)
    f.set(cur)
    # Body: {"spec":{"nonce":N}}
    bcur = f.local("bcur")
    f.i32(gl.SCRATCH_BODY)
    f.set(bcur)
    p.append_data(f, bcur, '{"spec":{"nonce":')
    f.get(nonce)
    f.get(bcur)
    f.call(p.lib.fmt_u64)
    f.get(bcur)
    f.add()
    f.set(bcur)
    p.append_data(f, bcur, "}}")
    f.i32(gl.METHOD_PUT)
    f.i32(gl.SCRATCH_PATH)
    f.get(cur)
    f.i32(gl.SCRATCH_PATH)
    f.sub()
    f.i32(gl.SCRATCH_BODY)
    f.get(bcur)
    f.i32(gl.SCRATCH_BODY)
    f.sub()
    f.i32(TAG_APPLY)
    f.call(p.lib.op_submit)
    f.drop()
    # Entry stays WAITING: the watch stream remains armed.

    f = p.handler(TAG_APPLY, "on_applied")
    plp = f.local("plp")
    st = f.local("st")
    f.get(0)
    f.load32(gl.OFF_PAYLOAD_PTR)
    f.set(plp)
    f.get(plp)
    f.call(p.lib.env_kind)
    f.i32(gl.KIND_RESPONSE)
    f.ne()
    with f.if_():
        f.unreachable()
    f.get(plp)
    f.call(p.lib.env_status)
    f.tee(st)
    f.i32(200)
    f.eq()
    f.get(st)
    f.i32(201)
    f.eq()
    f.or_()
    f.eqz()
    with f.if_():
        f.unreachable()
    f.gget(g_applied)
    f.i64(1)
    f.op("i64.add")
    f.gset(g_applied)
    f.get(0)
    f.call(p.lib.pending_del)

    return p.build()


@functools.lru_cache(maxsize=None)
def reference_counter() -> bytes:
    """Watches the source namespace and accumulates state in both a wasm
    global (event count) and the persistent heap (sum of nonces) — the probe
    used to verify that snapshots carry all mutable guest state."""
    p = GuestProgram()
    g_events = p.m.global_(0, I64, export="events")
    g_cell = p.m.global_(0, I32, export="cell")

    f = p.config_writer()
    g_src_ptr, g_src_len, _g_dst_ptr, _g_dst_len = p.emit_standard_config(f)
    f.i32(8)
    f.call(p.lib.persist_alloc)
    f.gset(g_cell)
    f.gget(g_cell)
    f.i64(0)
    f.store64(0)

    _emit_watch_source(p, g_src_ptr, g_src_len)

    f = p.handler(TAG_WATCH, "on_event")
    plp = f.local("plp")
    bp, bl = _emit_event_prologue(p, f, plp)
    nonce = f.local("nonce", I64)
    _emit_find_nonce(p, f, bp, bl, nonce)
    f.gget(g_events)
    f.i64(1)
    f.op("i64.add")
    f.gset(g_events)
    f.gget(g_cell)
    f.gget(g_cell)
    f.load64(0)
    f.get(nonce)
    f.op("i64.add")
    f.store64(0)

    return p.build()


@functools.lru_cache(maxsize=None)
def two_task_probe() -> bytes:
    """Chains two in-guest tasks at start and finishes with result 7*6."""
    p = GuestProgram()
    g_result = p.m.global_(0, I32, export="result")

    f = p.main()
    f.i32(TAG_TASK_A)
    f.i32(7)
    f.i32(0)
    f.call(p.lib.task_post)
    f.drop()

    f = p.handler(TAG_TASK_A, "task_a")
    f.i32(TAG_TASK_B)
    f.get(0)
    f.load32(gl.OFF_USER0)
    f.i32(6)
    f.mul()
    f.i32(0)
    f.call(p.lib.task_post)
    f.drop()
    f.get(0)
    f.call(p.lib.pending_del)

    f = p.handler(TAG_TASK_B, "task_b")
    f.get(0)
    f.load32(gl.OFF_USER0)
    f.gset(g_result)
    f.get(0)
    f.call(p.lib.pending_del)

    return p.build()


@functools.lru_cache(maxsize=None)
def trivial_finisher() -> bytes:
    """Registers nothing; the start turn completes the instance."""
    return GuestProgram().build()


@functools.lru_cache(maxsize=None)
def delay_once(ms: int = 50) -> bytes:
    """Arms a single timer at start and finishes when it fires."""
    p = GuestProgram()
    f = p.main()
    f.i64(ms)
    f.i32(TAG_TIMER)
    f.call(p.lib.op_delay)
    f.drop()

    f = p.handler(TAG_TIMER, "on_timer")
    plp = f.local("plp")
    f.get(0)
    f.load32(gl.OFF_PAYLOAD_PTR)
    f.set(plp)
    f.get(plp)
    f.call(p.lib.env_kind)
    f.i32(gl.KIND_RESPONSE)
    f.ne()
    with f.if_():
        f.unreachable()
    f.get(plp)
    f.call(p.lib.env_status)
    f.i32(200)
    f.ne()
    with f.if_():
        f.unreachable()
    f.get(0)
    f.call(p.lib.pending_del)

    return p.build()


@functools.lru_cache(maxsize=None)
def trap_unreachable() -> bytes:
    """Executes `unreachable` during start."""
    p = GuestProgram()
    f = p.main()
    f.unreachable()
    return p.build()


@functools.lru_cache(maxsize=None)
def trap_out_of_bounds() -> bytes:
    """Loads far past the end of linear memory during start."""
    p = GuestProgram()
    f = p.main()
    f.i32(0x7FFF_FFF0)
    f.load32(0)
    f.drop()
    return p.build()


@functools.lru_cache(maxsize=None)
def spin_forever() -> bytes:
    """Loops without yielding; only the host watchdog can stop it."""
    p = GuestProgram()
    f = p.main()
    with f.loop() as top:
        f.br(top)
    return p.build()


@functools.lru_cache(maxsize=None)
def helper_probe() -> bytes:
    """Exports raw wrappers over the shared fragments for direct testing."""
    p = GuestProgram()
    m: GuestModule = p.m

    f = m.func("fmt", (("v", I64),), (I32,), export="fmt")
    f.get(0)
    f.i32(gl.SCRATCH_PATH)
    f.call(p.lib.fmt_u64)

    f = m.func("parse", (("ptr", I32), ("end", I32)), (I64,), export="parse")
    f.get(0)
    f.get(1)
    f.call(p.lib.parse_u64)

    f = m.func(
        "find",
        (("h", I32), ("hl", I32), ("n", I32), ("nl", I32)),
        (I32,),
        export="find",
    )
    for i in range(4):
        f.get(i)
    f.call(p.lib.mem_find)

    f = m.func(
        "jstr",
        (("b", I32), ("bl", I32), ("n", I32), ("nl", I32)),
        (I32,),
        export="jstr",
    )
    for i in range(4):
        f.get(i)
    f.call(p.lib.json_find_str)

    f = m.func(
        "jnum",
        (("b", I32), ("bl", I32), ("n", I32), ("nl", I32)),
        (I64,),
        export="jnum",
    )
    for i in range(4):
        f.get(i)
    f.call(p.lib.json_find_u64)

    f = m.func("palloc", (("n", I32),), (I32,), export="palloc")
    f.get(0)
    f.call(p.lib.persist_alloc)

    f = m.func("ballast", (("v", I64),), export="ballast")
    f.get(0)
    f.call(p.lib.ballast_init)

    return p.build()


#: Programs exposed to the CLI and test suite by name.
CATALOG = {
    "synthetic-operator": synthetic_operator,
    "reference-counter": reference_counter,
    "two-task-probe": two_task_probe,
    "trivial-finisher": trivial_finisher,
    "delay-once": delay_once,
    "trap-unreachable": trap_unreachable,
    "trap-out-of-bounds": trap_out_of_bounds,
    "spin-forever": spin_forever,
}
