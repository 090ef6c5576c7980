"""The controller host: drives guest instances turn by turn.

An instance's life is a sequence of *turns*.  The first turn instantiates the
module, feeds it its configuration (when the module exports `config` and a
blob was supplied), and calls `start`; every later turn delivers exactly one
completed operation via `allocate` + `wakeup`.  Between turns the guest holds
no stack — all of its continuation state lives in linear memory and globals,
which is what makes unloading possible: a quiet instance is snapshotted to
disk, its memory is unmapped, and the next completion transparently restores
it before delivery.

Operations pending against the host keep an instance alive while unloaded:
watch streams stay connected (their events coalesce per resource in the
delivery queue) and timers keep ticking.  A pending operation is retired when
its terminal completion is *delivered* — a Response or StreamClosed — so the
host's registry always mirrors the guest's own pending table; snapshots
record the pending ids and reloads verify they still agree.

Trapped guests are quarantined: the instance is released, its streams are
cancelled, and any in-flight completions for it are dropped on arrival.  The
host never restarts a quarantined instance implicitly — whoever spawned it
decides what a crash means.
"""

from __future__ import annotations

import asyncio
import json
import logging
import time
import uuid
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from wasmop.abi import (
    Envelope,
    EnvelopeKind,
    HOST_IMPORT_MODULE,
    decode_envelope,
    encode_envelope,
)
from wasmop.bridge import KubeBridge, OperationKind, Transport
from wasmop.mockapi import bodies
from wasmop.runtime.cache import ModuleCache
from wasmop.runtime.policy import NeverUnload
from wasmop.runtime.snapshot import (
    Snapshot,
    SnapshotError,
    read_snapshot,
    write_snapshot,
)
from wasmop.runtime.workqueue import DEFAULT_COALESCE_CAP, DeliveryQueue
from wasmop.wasm import Instance, LinkError, ProcExit, Trap
from wasmop.wasm.wasi import make_wasi_imports

_log = logging.getLogger(__name__)

_TIMER_PAYLOAD = encode_envelope(Envelope.response(200))
_RESTART_503 = encode_envelope(
    Envelope.response(
        503, bodies.status_body(503, "Unavailable", "operation did not survive restart")
    )
)


class InstanceState(str, Enum):
    NEW = "new"
    LOADED = "loaded"
    UNLOADED = "unloaded"
    FINISHED = "finished"
    QUARANTINED = "quarantined"
    FAILED = "failed"


LIVE_STATES = (InstanceState.NEW, InstanceState.LOADED, InstanceState.UNLOADED)


class Turn:
    """Outcome status names for one turn."""

    YIELDED = "yielded"
    FINISHED = "finished"
    TRAPPED = "trapped"
    FAILED = "failed"
    IDLE = "idle"


@dataclass(frozen=True, slots=True)
class TurnOutcome:
    status: str
    instance_id: str
    detail: str = ""


class HostError(Exception):
    pass


class UnknownInstance(HostError):
    pass


class UnknownModule(HostError):
    pass


@dataclass(slots=True)
class OpRecord:
    kind: str
    created: float


@dataclass(slots=True)
class InstanceRecord:
    iid: str
    name: str
    module_hash: str
    lowered: object
    config: bytes
    queue: DeliveryQueue
    state: InstanceState = InstanceState.NEW
    instance: Instance | None = None
    ops: dict[int, OpRecord] = field(default_factory=dict)
    next_op: int = 1
    timers: dict[int, object] = field(default_factory=dict)
    last_activity: float = field(default_factory=time.monotonic)
    turns: int = 0
    trap_reason: str = ""
    snapshot_path: Path | None = None
    logs: deque = field(default_factory=lambda: deque(maxlen=256))


class ControllerHost:
    """Owns instances, their pending operations, and the unload policy."""

    def __init__(
        self,
        transport: Transport,
        *,
        cache: ModuleCache,
        snapshot_dir: str | Path,
        policy=None,
        turn_timeout: float = 10.0,
        cap_pages: int = 4096,
        coalesce_cap: int = DEFAULT_COALESCE_CAP,
        compress_snapshots: bool = True,
        bridge_retry_delay: float = 0.05,
    ) -> None:
        self.cache = cache
        self.snapshot_dir = Path(snapshot_dir)
        self.snapshot_dir.mkdir(parents=True, exist_ok=True)
        self.policy = policy if policy is not None else NeverUnload()
        self.turn_timeout = turn_timeout
        self.cap_pages = cap_pages
        self.coalesce_cap = coalesce_cap
        self.compress_snapshots = compress_snapshots
        self.bridge = KubeBridge(transport, self, retry_delay=bridge_retry_delay)
        self.counters: Counter = Counter()
        #: Optional callback (host, iid, TurnOutcome) observed after every turn.
        self.turn_hook = None
        self._records: dict[str, InstanceRecord] = {}
        self._work_event = asyncio.Event()

    # -- lifecycle ---------------------------------------------------------------

    def load_module(self, wasm_bytes: bytes) -> str:
        digest, _ = self.cache.compile(wasm_bytes)
        return digest

    def spawn(self, module_hash: str, config: bytes = b"", *, name: str = "") -> str:
        lowered = self.cache.get(module_hash)
        if lowered is None:
            raise UnknownModule(module_hash)
        iid = str(uuid.uuid4())
        self._records[iid] = InstanceRecord(
            iid=iid,
            name=name or iid[:8],
            module_hash=module_hash,
            lowered=lowered,
            config=config,
            queue=DeliveryQueue(self.coalesce_cap),
        )
        self.counters["spawns"] += 1
        self._work_event.set()
        return iid

    def adopt_instance(
        self,
        iid: str,
        module_hash: str,
        config: bytes,
        ops: dict[int, dict],
        snapshot_path: str | Path,
        *,
        name: str = "",
    ) -> None:
        """Re-register an instance from a previous process.

        The snapshot file holds its memory; `ops` describes the operations it
        was waiting on (`{"kind": ...}` plus, for watches, `"namespace"` and
        `"resource_version"`).  Watches are re-armed and resume from their
        recorded position; timers fire immediately; plain requests cannot be
        replayed safely, so they complete with a 503 the guest can react to.
        """
        if iid in self._records:
            raise HostError(f"instance {iid} already present")
        lowered = self.cache.get(module_hash)
        if lowered is None:
            raise UnknownModule(module_hash)
        rec = InstanceRecord(
            iid=iid,
            name=name or iid[:8],
            module_hash=module_hash,
            lowered=lowered,
            config=config,
            queue=DeliveryQueue(self.coalesce_cap),
            state=InstanceState.UNLOADED,
            snapshot_path=Path(snapshot_path),
        )
        for op_id, meta in sorted(ops.items()):
            rec.ops[int(op_id)] = OpRecord(meta["kind"], time.monotonic())
        rec.next_op = max((int(i) for i in ops), default=0) + 1
        self._records[iid] = rec
        self.counters["adoptions"] += 1
        for op_id, meta in sorted(ops.items()):
            op_id = int(op_id)
            if meta["kind"] == OperationKind.WATCH:
                self.bridge.reopen_stream(
                    iid, op_id, meta["namespace"], int(meta["resource_version"])
                )
            elif meta["kind"] == OperationKind.TIMER:
                self.post_completion(iid, op_id, _TIMER_PAYLOAD)
            else:
                self.post_completion(iid, op_id, _RESTART_503)
        self._work_event.set()

    def export_state(self, iid: str) -> dict:
        """Everything needed to adopt this instance after a restart."""
        rec = self._need(iid)
        streams = self.bridge.stream_state(iid)
        ops = {}
        for op_id, op in rec.ops.items():
            meta = {"kind": op.kind}
            if op.kind == OperationKind.WATCH and op_id in streams:
                namespace, version = streams[op_id]
                meta["namespace"] = namespace
                meta["resource_version"] = version
            ops[op_id] = meta
        return {
            "instance_id": iid,
            "name": rec.name,
            "module_hash": rec.module_hash,
            "state": rec.state.value,
            "ops": ops,
        }

    def destroy(self, iid: str) -> None:
        rec = self._need(iid)
        self._release_guest(rec)
        self.bridge.cancel_streams(iid)
        self._cancel_timers(rec)
        rec.ops.clear()
        rec.queue.clear()
        if rec.snapshot_path is not None:
            rec.snapshot_path.unlink(missing_ok=True)
        del self._records[iid]
        self.counters["destroys"] += 1

    async def shutdown(self, *, unload_loaded: bool = False) -> None:
        """Stop driving: optionally snapshot every loaded instance, cancel
        timers, and tear down the bridge's streams."""
        await self._sweep()
        if unload_loaded:
            for rec in list(self._records.values()):
                if rec.state is InstanceState.LOADED:
                    self.unload(rec.iid)
        for rec in self._records.values():
            self._cancel_timers(rec)
        await self.bridge.drain()

    # -- the completion sink (bridge + timers post here) ----------------------------

    def register_operation(self, instance_id: str, kind: str) -> int:
        rec = self._need(instance_id)
        op_id = rec.next_op
        rec.next_op += 1
        rec.ops[op_id] = OpRecord(kind, time.monotonic())
        return op_id

    def post_completion(self, instance_id: str, op_id: int, payload: bytes) -> None:
        rec = self._records.get(instance_id)
        if rec is None or op_id not in rec.ops:
            self.counters["spurious_completions"] += 1
            return
        coalesce_key = None
        if (
            rec.state is InstanceState.UNLOADED
            and len(payload) > 1
            and payload[1] == int(EnvelopeKind.WATCH_EVENT)
        ):
            coalesce_key = _resource_key(payload)
        before_dropped = rec.queue.dropped
        rec.queue.push(op_id, payload, coalesce_key)
        self.counters["completions"] += 1
        self.counters["coalesce_dropped"] += rec.queue.dropped - before_dropped
        self._work_event.set()

    # -- turns -------------------------------------------------------------------

    async def run_turn(self, iid: str) -> TurnOutcome:
        rec = self._need(iid)
        if rec.state is InstanceState.NEW:
            return self._boot(rec)
        if rec.state is InstanceState.UNLOADED:
            if not rec.queue:
                return TurnOutcome(Turn.IDLE, iid)
            failure = self._reload(rec)
            if failure is not None:
                return failure
        if rec.state is not InstanceState.LOADED:
            return TurnOutcome(Turn.IDLE, iid, f"state {rec.state.value}")
        return self._deliver_next(rec)

    def _boot(self, rec: InstanceRecord) -> TurnOutcome:
        try:
            inst = Instance(rec.lowered, self._make_imports(rec), cap_pages=self.cap_pages)
        except (LinkError, Trap) as e:
            return self._fail(rec, f"instantiation failed: {e}")
        rec.instance = inst
        rec.state = InstanceState.LOADED
        if rec.config:
            if not inst.has_export("config"):
                return self._fail(rec, "config not supported by module")
            results, abort = self._call_guest(rec, "allocate", len(rec.config))
            if abort is not None:
                return abort
            ptr = results[0]
            try:
                inst.write_mem(ptr, rec.config)
            except Trap as e:
                return self._quarantine(rec, f"config copy failed: {e.reason}")
            _, abort = self._call_guest(rec, "config", ptr, len(rec.config))
            if abort is not None:
                return abort
        _, abort = self._call_guest(rec, "start")
        if abort is not None:
            return abort
        return self._after_turn(rec)

    def _deliver_next(self, rec: InstanceRecord) -> TurnOutcome:
        while True:
            item = rec.queue.pop()
            if item is None:
                return TurnOutcome(Turn.IDLE, rec.iid)
            op_id, payload = item
            if op_id in rec.ops:
                break
            self.counters["spurious_completions"] += 1
        kind_byte = payload[1] if len(payload) > 1 else 0
        if kind_byte != int(EnvelopeKind.WATCH_EVENT):
            del rec.ops[op_id]
            handle = rec.timers.pop(op_id, None)
            if handle is not None:
                handle.cancel()
        results, abort = self._call_guest(rec, "allocate", len(payload))
        if abort is not None:
            return abort
        ptr = results[0]
        try:
            rec.instance.write_mem(ptr, payload)
        except Trap as e:
            return self._quarantine(rec, f"delivery copy failed: {e.reason}")
        _, abort = self._call_guest(rec, "wakeup", op_id, ptr, len(payload))
        if abort is not None:
            return abort
        self.counters["deliveries"] += 1
        return self._after_turn(rec)

    def _call_guest(self, rec: InstanceRecord, fn: str, *args: int):
        """Run one exported function; returns (results, None) or (None, outcome)."""
        deadline = time.monotonic() + self.turn_timeout
        try:
            return rec.instance.call(fn, *args, deadline=deadline), None
        except ProcExit as e:
            if e.code == 0:
                return None, self._finish(rec)
            return None, self._quarantine(rec, f"guest exited with code {e.code}")
        except Trap as e:
            return None, self._quarantine(rec, f"{fn}: {e.reason}")
        except LinkError as e:
            return None, self._fail(rec, f"{fn}: {e}")

    def _after_turn(self, rec: InstanceRecord) -> TurnOutcome:
        rec.turns += 1
        rec.last_activity = time.monotonic()
        self.counters["turns"] += 1
        if not rec.ops and not rec.queue:
            return self._finish(rec)
        return TurnOutcome(Turn.YIELDED, rec.iid)

    # -- unload / reload ------------------------------------------------------------

    def unloadable(self, iid: str) -> bool:
        rec = self._records.get(iid)
        return (
            rec is not None
            and rec.state is InstanceState.LOADED
            and not rec.queue
            and all(
                op.kind in (OperationKind.WATCH, OperationKind.TIMER)
                for op in rec.ops.values()
            )
        )

    def unload(self, iid: str) -> Path:
        rec = self._need(iid)
        if rec.state is not InstanceState.LOADED or rec.instance is None:
            raise HostError(f"instance {iid} is {rec.state.value}, not loaded")
        inst = rec.instance
        snap = Snapshot(
            instance_id=uuid.UUID(rec.iid),
            module_hash=rec.module_hash,
            pages=inst.mem.pages,
            globals=tuple(inst.global_values()),
            pending_ids=tuple(sorted(rec.ops)),
            memory=inst.mem.snapshot(),
        )
        path = self.snapshot_dir / f"{rec.iid}.wops"
        written = write_snapshot(path, snap, compress=self.compress_snapshots)
        inst.release()
        rec.instance = None
        rec.state = InstanceState.UNLOADED
        rec.snapshot_path = path
        self.counters["unloads"] += 1
        self.counters["bytes_swapped"] += written
        return path

    def _reload(self, rec: InstanceRecord) -> TurnOutcome | None:
        path = rec.snapshot_path
        if path is None:
            return self._fail(rec, "unloaded instance has no snapshot")
        try:
            snap = read_snapshot(path)
        except SnapshotError as e:
            # The file is kept for post-mortem inspection.
            return self._fail(rec, f"snapshot unreadable: {e}")
        if snap.module_hash != rec.module_hash:
            return self._fail(rec, "snapshot belongs to a different module")
        if set(snap.pending_ids) != set(rec.ops):
            return self._fail(rec, "snapshot pending operations disagree with host records")
        try:
            inst = Instance(rec.lowered, self._make_imports(rec), cap_pages=self.cap_pages)
            inst.mem.restore(snap.pages, snap.memory)
            inst.restore_globals(list(snap.globals))
        except (LinkError, Trap) as e:
            return self._fail(rec, f"restore failed: {e}")
        rec.instance = inst
        rec.state = InstanceState.LOADED
        rec.snapshot_path = None
        path.unlink(missing_ok=True)
        self.counters["reloads"] += 1
        return None

    # -- terminal transitions ---------------------------------------------------------

    def _finish(self, rec: InstanceRecord) -> TurnOutcome:
        self._release_guest(rec)
        self._cancel_timers(rec)
        self.bridge.cancel_streams(rec.iid)
        rec.ops.clear()
        rec.queue.clear()
        rec.state = InstanceState.FINISHED
        self.counters["finished"] += 1
        return TurnOutcome(Turn.FINISHED, rec.iid)

    def _quarantine(self, rec: InstanceRecord, reason: str) -> TurnOutcome:
        self._release_guest(rec)
        self._cancel_timers(rec)
        self.bridge.cancel_streams(rec.iid)
        rec.ops.clear()
        rec.queue.clear()
        rec.state = InstanceState.QUARANTINED
        rec.trap_reason = reason
        self.counters["traps"] += 1
        _log.warning("instance %s quarantined: %s", rec.iid[:8], reason)
        return TurnOutcome(Turn.TRAPPED, rec.iid, reason)

    def _fail(self, rec: InstanceRecord, reason: str) -> TurnOutcome:
        self._release_guest(rec)
        self._cancel_timers(rec)
        self.bridge.cancel_streams(rec.iid)
        rec.ops.clear()
        rec.queue.clear()
        rec.state = InstanceState.FAILED
        rec.trap_reason = reason
        self.counters["failures"] += 1
        _log.warning("instance %s failed: %s", rec.iid[:8], reason)
        return TurnOutcome(Turn.FAILED, rec.iid, reason)

    def _release_guest(self, rec: InstanceRecord) -> None:
        if rec.instance is not None:
            rec.instance.release()
            rec.instance = None

    def _cancel_timers(self, rec: InstanceRecord) -> None:
        for handle in rec.timers.values():
            handle.cancel()
        rec.timers.clear()

    # -- pumping -------------------------------------------------------------------

    def _has_ready_work(self, rec: InstanceRecord) -> bool:
        if rec.state is InstanceState.NEW:
            return True
        return rec.state in (InstanceState.LOADED, InstanceState.UNLOADED) and bool(rec.queue)

    async def _sweep(self, turn_hook=None) -> int:
        """Run every ready turn until nothing is ready; returns turns run."""
        hook = turn_hook if turn_hook is not None else self.turn_hook
        total = 0
        while True:
            ran = 0
            for iid in list(self._records):
                rec = self._records.get(iid)
                if rec is None or not self._has_ready_work(rec):
                    continue
                outcome = await self.run_turn(iid)
                ran += 1
                if hook is not None:
                    hook(self, iid, outcome)
            if ran == 0:
                return total
            total += ran
            await asyncio.sleep(0)  # let bridge tasks land fresh completions

    def _apply_policy(self) -> None:
        now = time.monotonic()
        for iid in list(self._records):
            rec = self._records.get(iid)
            if rec is None or not self.unloadable(iid):
                continue
            if self.policy.should_unload(now - rec.last_activity):
                self.unload(iid)

    def _policy_horizon(self, now: float) -> float | None:
        horizon = None
        for iid, rec in self._records.items():
            if not self.unloadable(iid):
                continue
            wait = self.policy.seconds_until_unload(now - rec.last_activity)
            if wait is not None and (horizon is None or wait < horizon):
                horizon = wait
        return horizon

    def _any_live(self) -> bool:
        return any(rec.state in LIVE_STATES for rec in self._records.values())

    def _any_ready(self) -> bool:
        return any(self._has_ready_work(rec) for rec in self._records.values())

    async def pump(self, *, deadline: float | None = None, turn_hook=None) -> None:
        """Drive turns until every instance is terminal or `deadline` seconds
        elapse.  With no deadline this waits indefinitely for future
        completions (armed watches can always produce more work)."""
        end = None if deadline is None else time.monotonic() + deadline
        while True:
            await self._sweep(turn_hook)
            self._apply_policy()
            if not self._any_live():
                return
            now = time.monotonic()
            if end is not None and now >= end:
                return
            waits = []
            if end is not None:
                waits.append(end - now)
            horizon = self._policy_horizon(now)
            if horizon is not None:
                waits.append(max(horizon, 0.001))
            self._work_event.clear()
            if self._any_ready():
                continue
            try:
                await asyncio.wait_for(
                    self._work_event.wait(), min(waits) if waits else None
                )
            except asyncio.TimeoutError:
                pass

    def _quiescent(self) -> bool:
        for rec in self._records.values():
            if rec.state is InstanceState.NEW or rec.queue:
                return False
            if any(op.kind != OperationKind.WATCH for op in rec.ops.values()):
                return False
        return True

    async def settle(self, timeout: float = 5.0) -> bool:
        """Pump until nothing is queued and no request or timer is pending
        (armed watches don't count); False if that doesn't happen in time."""
        end = time.monotonic() + timeout
        while True:
            await self._sweep()
            self._apply_policy()
            if self._quiescent():
                # Completions travel store -> watch queue -> bridge task ->
                # host over a few event-loop iterations and are invisible to
                # the op registry while in flight, so quiescence only counts
                # once it survives those iterations.
                for _ in range(4):
                    await asyncio.sleep(0)
                await self._sweep()
                self._apply_policy()
                if self._quiescent() and not self._any_ready():
                    return True
            remaining = end - time.monotonic()
            if remaining <= 0:
                return False
            self._work_event.clear()
            if self._any_ready() or self._quiescent():
                continue
            try:
                await asyncio.wait_for(self._work_event.wait(), min(remaining, 0.25))
            except asyncio.TimeoutError:
                pass

    # -- host imports the guest sees ---------------------------------------------------

    def _make_imports(self, rec: InstanceRecord) -> dict:
        def kube_request(inst: Instance, ptr: int, length: int) -> int:
            payload = inst.read_mem(ptr, length)
            return self.bridge.submit(rec.iid, payload)

        def delay(inst: Instance, millis: int) -> int:
            if millis >= 1 << 63:  # u64 view of a negative i64
                raise Trap("negative delay")
            op_id = self.register_operation(rec.iid, OperationKind.TIMER)
            handle = asyncio.get_running_loop().call_later(
                millis / 1000.0, self._fire_timer, rec.iid, op_id
            )
            rec.timers[op_id] = handle
            return op_id

        def log(inst: Instance, ptr: int, length: int) -> None:
            text = inst.read_mem(ptr, length).decode("utf-8", "replace")
            rec.logs.append(text)
            _log.debug("guest %s: %s", rec.name, text)

        imports = {
            (HOST_IMPORT_MODULE, "kube_request"): kube_request,
            (HOST_IMPORT_MODULE, "delay"): delay,
            (HOST_IMPORT_MODULE, "log"): log,
        }
        imports.update(
            make_wasi_imports(
                write_sink=lambda fd, data: rec.logs.append(
                    data.decode("utf-8", "replace")
                ),
                random_seed=rec.iid.encode(),
            )
        )
        return imports

    def _fire_timer(self, iid: str, op_id: int) -> None:
        rec = self._records.get(iid)
        if rec is None:
            return
        rec.timers.pop(op_id, None)
        self.post_completion(iid, op_id, _TIMER_PAYLOAD)

    # -- introspection -------------------------------------------------------------

    def _need(self, iid: str) -> InstanceRecord:
        rec = self._records.get(iid)
        if rec is None:
            raise UnknownInstance(iid)
        return rec

    def instances(self) -> list[str]:
        return list(self._records)

    def state_of(self, iid: str) -> InstanceState:
        return self._need(iid).state

    def status(self, iid: str) -> dict:
        rec = self._need(iid)
        ops = Counter(op.kind for op in rec.ops.values())
        return {
            "instance_id": rec.iid,
            "name": rec.name,
            "module_hash": rec.module_hash,
            "state": rec.state.value,
            "turns": rec.turns,
            "pages": rec.instance.mem.pages if rec.instance is not None else 0,
            "ops": {kind: ops.get(kind, 0) for kind in ("request", "watch", "timer")},
            "queue_depth": len(rec.queue),
            "trap_reason": rec.trap_reason,
            "snapshot": str(rec.snapshot_path) if rec.snapshot_path else "",
        }

    def guest_logs(self, iid: str) -> list[str]:
        return list(self._need(iid).logs)

    def guest_global(self, iid: str, name: str) -> int:
        """Read one exported global of a loaded instance (diagnostics)."""
        rec = self._need(iid)
        if rec.instance is None:
            raise HostError(f"instance {iid} is not loaded")
        exports = rec.lowered.export_map()
        kind, index = exports.get(name, (None, None))
        if kind != "global":
            raise HostError(f"module exports no global named {name!r}")
        return rec.instance.globals[index]

    def metrics(self) -> dict:
        states = Counter(rec.state.value for rec in self._records.values())
        return {
            "instances": dict(states),
            "counters": dict(self.counters),
            "bridge": {
                "submitted": self.bridge.submitted,
                "rejected": self.bridge.rejected,
            },
            "cache": self.cache.stats(),
        }


def _resource_key(payload: bytes) -> tuple | None:
    """(namespace, name) of a watch-event payload, or None if unparseable."""
    try:
        envelope = decode_envelope(payload)
        meta = json.loads(envelope.body)["object"]["metadata"]
        return (meta["namespace"], meta["name"])
    except Exception:
        return None
