"""Benchmark orchestration: build the relay chain, drive update rounds,
observe the idle window, and write per-run artifacts.

The chain is ``operator_count`` relay reconcilers where operator *i*
watches ``ns-i`` and writes ``ns-(i+1)``.  A round applies the round
number as the nonce of one resource in ``ns-1`` and waits until that
nonce surfaces in ``ns-(operator_count+1)``; rounds are strictly
sequential, so end-to-end latency is the accumulated per-hop latency.
The nonce doubling as the round number makes stale propagation
detectable on sight.
"""

from __future__ import annotations

import asyncio
import csv
import json
import platform
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from wasmop.bench.config import CellSpec
from wasmop.bench.native import NativeOperator
from wasmop.bench.sampler import MemorySampler
from wasmop.bridge import InProcessTransport, Transport
from wasmop.guest import programs
from wasmop.mockapi.store import AsyncWatch, Gateway, ResourceStore
from wasmop.runtime import ControllerHost, InstanceState, ModuleCache, NeverUnload, UnloadEveryTurn
from wasmop.wasm import ENGINE_VERSION

__all__ = [
    "ChainError",
    "LatencySample",
    "NativeChain",
    "RoundTimeout",
    "WasmChain",
    "build_chain",
    "execute_run",
    "namespace",
    "run_active_phase",
    "write_latency_csv",
    "write_memory_csv",
]

RESOURCE_NAME = "probe"
RUN_SCHEMA = "wasmop-bench-run/1"


def namespace(i: int) -> str:
    return f"ns-{i}"


class ChainError(RuntimeError):
    """An operator failed or the chain never became ready."""


class RoundTimeout(RuntimeError):
    """A propagation round did not complete within its budget."""


@dataclass(frozen=True)
class LatencySample:
    round: int
    start_ns: int
    end_ns: int

    @property
    def elapsed_us(self) -> int:
        return (self.end_ns - self.start_ns) // 1000


# -- chain variants ------------------------------------------------------------------


class WasmChain:
    """Operators as wasm guest instances under a controller host."""

    def __init__(self, host: ControllerHost, operator_count: int, ballast_bytes: int) -> None:
        self.host = host
        self.operator_count = operator_count
        self.ballast_bytes = ballast_bytes
        self.instance_ids: list[str] = []
        self._pump_stop = asyncio.Event()
        self._pump_task: asyncio.Task | None = None

    async def start(self, timeout: float = 60.0) -> None:
        digest = self.host.load_module(programs.synthetic_operator())
        for i in range(1, self.operator_count + 1):
            config = json.dumps(
                {
                    "source": namespace(i),
                    "dest": namespace(i + 1),
                    "ballast_bytes": self.ballast_bytes,
                },
                separators=(",", ":"),
            ).encode()
            self.instance_ids.append(self.host.spawn(digest, config, name=f"op-{i}"))
        self._pump_task = asyncio.get_running_loop().create_task(self._pump())
        deadline = time.monotonic() + timeout
        while True:
            self.health_check()
            if all(
                self.host.status(iid)["ops"]["watch"] >= 1 for iid in self.instance_ids
            ):
                return
            if time.monotonic() > deadline:
                raise ChainError("timed out waiting for every operator to issue its watch")
            await asyncio.sleep(0.01)

    async def _pump(self) -> None:
        while not self._pump_stop.is_set():
            await self.host.pump(deadline=0.2)

    def health_check(self) -> None:
        for iid in self.instance_ids:
            state = self.host.state_of(iid)
            if state in (InstanceState.QUARANTINED, InstanceState.FAILED, InstanceState.FINISHED):
                status = self.host.status(iid)
                raise ChainError(
                    f"operator {status['name']} left the chain: {state.value}"
                    + (f" ({status['trap_reason']})" if status["trap_reason"] else "")
                )

    def states(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for iid in self.instance_ids:
            state = self.host.state_of(iid).value
            counts[state] = counts.get(state, 0) + 1
        return counts

    def swap_counters(self) -> dict[str, int]:
        counters = self.host.metrics()["counters"]
        return {
            "unloads": counters.get("unloads", 0),
            "reloads": counters.get("reloads", 0),
            "bytes_swapped": counters.get("bytes_swapped", 0),
        }

    async def shutdown(self) -> None:
        self._pump_stop.set()
        if self._pump_task is not None:
            await self._pump_task
        await self.host.shutdown()


class NativeChain:
    """Operators as plain async tasks (the no-isolation baseline)."""

    def __init__(self, transport: Transport, operator_count: int, ballast_bytes: int) -> None:
        self.operators = [
            NativeOperator(transport, namespace(i), namespace(i + 1), ballast_bytes)
            for i in range(1, operator_count + 1)
        ]

    async def start(self, timeout: float = 60.0) -> None:
        for operator in self.operators:
            operator.start()
        waits = [operator.ready.wait() for operator in self.operators]
        try:
            await asyncio.wait_for(asyncio.gather(*waits), timeout)
        except asyncio.TimeoutError:
            raise ChainError("timed out waiting for every operator to open its watch") from None

    def health_check(self) -> None:
        for operator in self.operators:
            exception = operator.failure()
            if exception is not None:
                raise ChainError(f"operator task died: {exception}") from exception

    def states(self) -> dict[str, int]:
        return {"native": len(self.operators)}

    def swap_counters(self) -> dict[str, int]:
        return {"unloads": 0, "reloads": 0, "bytes_swapped": 0}

    async def shutdown(self) -> None:
        for operator in self.operators:
            await operator.stop()


def build_chain(
    spec: CellSpec,
    transport: Transport,
    *,
    cache_dir: Path,
    snapshot_dir: Path,
) -> WasmChain | NativeChain:
    if spec.variant == "no_isolation":
        return NativeChain(transport, spec.operator_count, spec.ballast_bytes)
    policy = NeverUnload() if spec.variant == "wasm" else UnloadEveryTurn()
    host = ControllerHost(
        transport,
        cache=ModuleCache(cache_dir),
        snapshot_dir=snapshot_dir,
        policy=policy,
    )
    return WasmChain(host, spec.operator_count, spec.ballast_bytes)


# -- phases --------------------------------------------------------------------------


async def run_active_phase(
    store: ResourceStore,
    chain: WasmChain | NativeChain,
    operator_count: int,
    rounds: int,
    *,
    round_timeout: float,
    samples_out: list[LatencySample],
) -> None:
    """Sequential update rounds; appends one sample per completed round."""
    destination = namespace(operator_count + 1)
    watch = AsyncWatch(store, destination, store.resource_version)
    try:
        for round_number in range(1, rounds + 1):
            start_ns = time.monotonic_ns()
            store.apply(namespace(1), RESOURCE_NAME, round_number)
            deadline = time.monotonic() + round_timeout
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    chain.health_check()
                    raise RoundTimeout(
                        f"round {round_number} exceeded {round_timeout:.1f}s"
                    )
                try:
                    event = await asyncio.wait_for(watch.get(), remaining)
                except asyncio.TimeoutError:
                    chain.health_check()
                    raise RoundTimeout(
                        f"round {round_number} exceeded {round_timeout:.1f}s"
                    ) from None
                if event is None:
                    raise ChainError("driver watch overflowed")
                if event.resource.name != RESOURCE_NAME:
                    continue
                nonce = event.resource.nonce
                if nonce == round_number:
                    break
                if nonce > round_number:
                    raise ChainError(
                        f"nonce {nonce} arrived while waiting for round {round_number}"
                    )
                # nonce < round_number: a redelivered earlier state; skip it.
            samples_out.append(LatencySample(round_number, start_ns, time.monotonic_ns()))
    finally:
        watch.close()


# -- artifacts -----------------------------------------------------------------------


def write_latency_csv(path: Path, samples: list[LatencySample]) -> None:
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["round", "start_ns", "end_ns", "elapsed_us"])
        for sample in samples:
            writer.writerow([sample.round, sample.start_ns, sample.end_ns, sample.elapsed_us])


def write_memory_csv(path: Path, rows: list[tuple[int, str, int]]) -> None:
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["t_ns", "phase", "rss_bytes"])
        for t_ns, phase, rss_bytes in rows:
            if phase in ("active", "idle"):
                writer.writerow([t_ns, phase, rss_bytes])


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


async def execute_run(
    spec: CellSpec,
    out_dir: Path,
    *,
    cache_dir: Path | None = None,
    sampling_interval: float = 1.0,
) -> dict:
    """One full benchmark run: setup, active rounds, idle window, artifacts.

    Always writes latency.csv, memory.csv, and run.json (partial data on
    failure) and returns the run.json document.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started_at = _utc_now()

    store = ResourceStore()
    transport = InProcessTransport(Gateway(store), request_delay=spec.hop_delay_ms / 1000.0)
    chain = build_chain(
        spec,
        transport,
        cache_dir=Path(cache_dir) if cache_dir else out_dir / "cache",
        snapshot_dir=out_dir / "snapshots",
    )

    sampler = MemorySampler(interval=sampling_interval).start()
    samples: list[LatencySample] = []
    phase_ns: dict[str, int] = {}
    idle_states: dict[str, int] = {}
    ok = False
    error = None
    try:
        await chain.start()
        phase_ns["active_start"] = time.monotonic_ns()
        sampler.mark("active")
        await run_active_phase(
            store,
            chain,
            spec.operator_count,
            spec.rounds,
            round_timeout=spec.round_timeout_seconds,
            samples_out=samples,
        )
        phase_ns["active_end"] = time.monotonic_ns()

        phase_ns["idle_start"] = time.monotonic_ns()
        sampler.mark("idle")
        await asyncio.sleep(spec.idle_seconds)
        phase_ns["idle_end"] = time.monotonic_ns()
        idle_states = chain.states()
        ok = True
    except (ChainError, RoundTimeout) as e:
        error = f"{type(e).__name__}: {e}"
    finally:
        sampler.mark("done")
        try:
            await chain.shutdown()
        finally:
            rows = sampler.stop()

    write_latency_csv(out_dir / "latency.csv", samples)
    write_memory_csv(out_dir / "memory.csv", rows)

    document = {
        "schema": RUN_SCHEMA,
        "cell": spec.to_doc(),
        "environment": {
            "python": sys.version.split()[0],
            "platform": platform.platform(),
            "engine": ENGINE_VERSION,
            "sampling_interval_seconds": sampling_interval,
            "started_at": started_at,
            "finished_at": _utc_now(),
        },
        "result": {
            "ok": ok,
            "error": error,
            "rounds_completed": len(samples),
            "phase_ns": phase_ns,
            "idle_states": idle_states,
            "swap": chain.swap_counters(),
        },
    }
    (out_dir / "run.json").write_text(json.dumps(document, indent=2) + "\n")
    return document
