"""Command-line entry point.

Three commands tie the pieces together:

* ``wasmop run --config runtime.json`` — compile every ``.wasm`` in a
  directory, spawn instances, and pump them against a resource store until
  interrupted; SIGINT/SIGTERM quiesce the runtime, snapshot every loaded
  instance, and exit 0.
* ``wasmop bench --config bench.json --out results/`` — execute the
  benchmark matrix into a timestamped results directory.
* ``wasmop report results/bench-.../`` — turn raw benchmark artifacts into
  summary and plot CSVs.

``serve`` (run the control API standalone) and ``status`` (query a running
server) round out the surface.

Exit codes: 0 success, 1 runtime fault or benchmark failure budget
exceeded, 2 usage or configuration error.

Run configs are JSON; relative paths resolve against the config file's
directory so a config directory is relocatable.  ``WASM_OPERATOR_CACHE``
overrides the module cache directory; command-line flags override both.
"""

from __future__ import annotations

import asyncio
import base64
import contextlib
import json
import os
import signal
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import click

from .bench.config import BenchConfig, ConfigError
from .bench.runner import exceeds_failure_budget, run_bench
from .bridge import InProcessTransport, RemoteHttpTransport
from .mockapi.store import Gateway, ResourceStore
from .report import ReportError, generate_report
from .runtime.cache import AbiError, ModuleCache
from .runtime.host import ControllerHost, InstanceState
from .runtime.policy import IdleTimeout, NeverUnload, UnloadEveryTurn
from .service import ServiceState, create_app

TRANSPORT_KINDS = ("inprocess", "http")
UNLOAD_MODES = ("never", "every_turn", "idle_timeout")
STATE_SUFFIX = ".state.json"


class RunConfigError(ValueError):
    """The run configuration document is unusable."""


@dataclass(frozen=True)
class RunConfig:
    """Validated runtime configuration (all paths absolute)."""

    modules_dir: Path
    cache_dir: Path
    snapshot_dir: Path
    transport: dict
    unload: dict
    listen: str | None
    metrics_path: Path
    instances_per_module: int
    resume: bool

    _KEYS = {
        "modules_dir",
        "cache_dir",
        "snapshot_dir",
        "transport",
        "unload",
        "listen",
        "metrics_path",
        "instances_per_module",
        "resume",
    }

    @classmethod
    def from_doc(cls, doc: dict, *, base_dir: Path | None = None) -> "RunConfig":
        if not isinstance(doc, dict):
            raise RunConfigError("config must be a JSON object")
        unknown = set(doc) - cls._KEYS
        if unknown:
            raise RunConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        base = Path(base_dir) if base_dir is not None else Path.cwd()

        def path_of(key: str, default: str | None) -> Path:
            raw = doc.get(key, default)
            if not isinstance(raw, str) or not raw:
                raise RunConfigError(f"{key} must be a non-empty path string")
            path = Path(raw)
            return path if path.is_absolute() else (base / path).resolve()

        transport = doc.get("transport", {"kind": "inprocess"})
        if isinstance(transport, str):
            transport = {"kind": transport}
        if not isinstance(transport, dict):
            raise RunConfigError("transport must be an object or a kind string")
        kind = transport.get("kind")
        if kind not in TRANSPORT_KINDS:
            raise RunConfigError(
                f"transport.kind must be one of {', '.join(TRANSPORT_KINDS)}, got {kind!r}"
            )
        if kind == "http":
            base_url = transport.get("base_url")
            if not isinstance(base_url, str) or not base_url.startswith("http"):
                raise RunConfigError("transport.base_url must be an http(s) URL")
            transport = {"kind": "http", "base_url": base_url}
        else:
            if set(transport) - {"kind"}:
                raise RunConfigError("inprocess transport takes no further keys")
            transport = {"kind": "inprocess"}

        unload = doc.get("unload", {"mode": "never"})
        if isinstance(unload, str):
            unload = {"mode": unload}
        if not isinstance(unload, dict):
            raise RunConfigError("unload must be an object or a mode string")
        mode = unload.get("mode")
        if mode not in UNLOAD_MODES:
            raise RunConfigError(
                f"unload.mode must be one of {', '.join(UNLOAD_MODES)}, got {mode!r}"
            )
        if mode == "idle_timeout":
            seconds = unload.get("seconds")
            if not isinstance(seconds, (int, float)) or isinstance(seconds, bool) or seconds <= 0:
                raise RunConfigError("unload.seconds must be > 0 when mode is idle_timeout")
            unload = {"mode": mode, "seconds": float(seconds)}
        else:
            if set(unload) - {"mode"}:
                raise RunConfigError(f"unload mode {mode!r} takes no further keys")
            unload = {"mode": mode}

        listen = doc.get("listen")
        if listen is not None and (not isinstance(listen, str) or ":" not in listen):
            raise RunConfigError("listen must be a 'host:port' string")

        per_module = doc.get("instances_per_module", 1)
        if not isinstance(per_module, int) or isinstance(per_module, bool) or per_module < 1:
            raise RunConfigError("instances_per_module must be an integer >= 1")

        resume = doc.get("resume", False)
        if not isinstance(resume, bool):
            raise RunConfigError("resume must be a boolean")

        return cls(
            modules_dir=path_of("modules_dir", "modules"),
            cache_dir=path_of("cache_dir", "cache"),
            snapshot_dir=path_of("snapshot_dir", "snapshots"),
            transport=transport,
            unload=unload,
            listen=listen,
            metrics_path=path_of("metrics_path", "metrics.json"),
            instances_per_module=per_module,
            resume=resume,
        )

    @classmethod
    def from_path(cls, path: Path, overrides: dict | None = None) -> "RunConfig":
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise RunConfigError(f"{path}: {e}") from None
        if overrides:
            if not isinstance(doc, dict):
                raise RunConfigError("config must be a JSON object")
            doc = {**doc, **overrides}
        return cls.from_doc(doc, base_dir=path.parent)

    def to_doc(self) -> dict:
        return {
            "modules_dir": str(self.modules_dir),
            "cache_dir": str(self.cache_dir),
            "snapshot_dir": str(self.snapshot_dir),
            "transport": dict(self.transport),
            "unload": dict(self.unload),
            "listen": self.listen,
            "metrics_path": str(self.metrics_path),
            "instances_per_module": self.instances_per_module,
            "resume": self.resume,
        }

    def policy(self):
        mode = self.unload["mode"]
        if mode == "never":
            return NeverUnload()
        if mode == "every_turn":
            return UnloadEveryTurn()
        return IdleTimeout(self.unload["seconds"])


def _echo(message: str) -> None:
    click.echo(message)
    sys.stdout.flush()


def _fail(message: str) -> None:
    click.echo(message, err=True)


# -- run -------------------------------------------------------------------------


def _compile_modules(host: ControllerHost, modules_dir: Path):
    """Compile every module file; returns (loaded, failures).

    ``loaded`` is a list of (stem, digest, guest config bytes) — the guest
    config comes from an optional JSON sidecar next to the module file.
    ``failures`` lists (file name, "symbol: detail") for the symbol report.
    """
    loaded: list[tuple[str, str, bytes]] = []
    failures: list[tuple[str, str]] = []
    for wasm_path in sorted(modules_dir.glob("*.wasm")):
        blob = wasm_path.read_bytes()
        try:
            digest = host.load_module(blob)
        except AbiError as e:  # str(e) is "symbol: detail"
            failures.append((wasm_path.name, str(e)))
            continue
        except ValueError as e:
            failures.append((wasm_path.name, f"<module>: invalid module: {e}"))
            continue
        sidecar = wasm_path.with_suffix(".json")
        config = b""
        if sidecar.exists():
            try:
                doc = json.loads(sidecar.read_bytes())
            except json.JSONDecodeError as e:
                failures.append((sidecar.name, f"<config>: sidecar is not JSON: {e}"))
                continue
            # Canonical compact form, independent of the author's formatting.
            config = json.dumps(doc, separators=(",", ":")).encode()
        loaded.append((wasm_path.stem, digest, config))
    return loaded, failures


def _adopt_previous_session(host: ControllerHost, snapshot_dir: Path) -> int:
    """Re-register instances recorded by a previous clean shutdown."""
    adopted = 0
    for sidecar in sorted(snapshot_dir.glob(f"*{STATE_SUFFIX}")):
        doc = json.loads(sidecar.read_text())
        snapshot_path = snapshot_dir / doc["snapshot"]
        host.adopt_instance(
            doc["instance_id"],
            doc["module_hash"],
            base64.b64decode(doc["config_b64"]),
            doc["ops"],
            snapshot_path,
            name=doc["name"],
        )
        adopted += 1
    return adopted


def _write_session_state(
    host: ControllerHost, snapshot_dir: Path, configs: dict, export_docs: dict
) -> int:
    """Persist adoption sidecars for every snapshotted instance.

    ``export_docs`` must be captured while the bridge's streams were still
    armed (they carry the watch resume positions); it maps iid -> export
    document.  Stale sidecars from earlier shutdowns are removed so the
    directory always describes exactly the last session.
    """
    for stale in snapshot_dir.glob(f"*{STATE_SUFFIX}"):
        stale.unlink()
    written = 0
    for iid in host.instances():
        if host.state_of(iid) is not InstanceState.UNLOADED:
            continue
        doc = export_docs[iid]
        snapshot = host.status(iid)["snapshot"]
        sidecar = {
            "instance_id": doc["instance_id"],
            "name": doc["name"],
            "module_hash": doc["module_hash"],
            "config_b64": base64.b64encode(configs.get(iid, b"")).decode(),
            "ops": doc["ops"],
            "snapshot": Path(snapshot).name,
        }
        path = snapshot_dir / f"{iid}{STATE_SUFFIX}"
        path.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        written += 1
    return written


async def _serve_control_api(config: RunConfig, state: ServiceState):
    """Start the HTTP exposure next to the run loop; returns (server, task)."""
    import uvicorn

    host_part, _, port_part = config.listen.rpartition(":")
    server = uvicorn.Server(
        uvicorn.Config(
            app=create_app(state),
            host=host_part or "127.0.0.1",
            port=int(port_part),
            log_level="warning",
            lifespan="on",
        )
    )
    task = asyncio.create_task(server.serve())
    while not server.started:
        if task.done():
            task.result()
            raise RuntimeError("server stopped before startup finished")
        await asyncio.sleep(0.01)
    sock = server.servers[0].sockets[0]
    bound = sock.getsockname()
    _echo(f"control api listening on http://{bound[0]}:{bound[1]}")
    return server, task


async def _run_main(config: RunConfig) -> int:
    config.modules_dir.mkdir(parents=True, exist_ok=True)
    config.snapshot_dir.mkdir(parents=True, exist_ok=True)

    store = None
    if config.transport["kind"] == "inprocess":
        store = ResourceStore()
        transport = InProcessTransport(Gateway(store))
    else:
        transport = RemoteHttpTransport(config.transport["base_url"])

    host = ControllerHost(
        transport,
        cache=ModuleCache(config.cache_dir),
        snapshot_dir=config.snapshot_dir,
        policy=config.policy(),
    )

    loaded, failures = _compile_modules(host, config.modules_dir)
    if failures:
        _fail("module validation failed:")
        for file_name, detail in failures:
            _fail(f"  {file_name}: {detail}")
        return 2

    guest_configs: dict[str, bytes] = {}
    adopted = 0
    if config.resume:
        adopted = _adopt_previous_session(host, config.snapshot_dir)
        for iid in host.instances():
            sidecar = config.snapshot_dir / f"{iid}{STATE_SUFFIX}"
            if sidecar.exists():
                doc = json.loads(sidecar.read_text())
                guest_configs[iid] = base64.b64decode(doc["config_b64"])
    if adopted:
        _echo(f"resumed {adopted} instances from {config.snapshot_dir}")
    else:
        for stem, digest, guest_config in loaded:
            for i in range(config.instances_per_module):
                name = stem if config.instances_per_module == 1 else f"{stem}-{i}"
                iid = host.spawn(digest, guest_config, name=name)
                guest_configs[iid] = guest_config

    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for signum in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(signum, stop.set)

    server = server_task = None
    state = ServiceState(host, store=store, owns_pump=False)
    if config.listen is not None:
        server, server_task = await _serve_control_api(config, state)

    _echo(f"runtime ready: {len(host.instances())} instances")
    exit_code = 0
    try:
        while not stop.is_set():
            await host.pump(deadline=0.25)
            if not stop.is_set():
                # pump returns immediately with no live instances; idle gently.
                await asyncio.sleep(0.02)
    except Exception as e:  # runtime fault
        _fail(f"runtime fault: {e}")
        exit_code = 1
    finally:
        for signum in (signal.SIGINT, signal.SIGTERM):
            loop.remove_signal_handler(signum)
        if server is not None:
            server.should_exit = True
            with contextlib.suppress(Exception):
                await asyncio.wait_for(server_task, timeout=5.0)
        if exit_code == 0:
            await host.settle(timeout=5.0)
            # Watch resume positions live in the bridge's streams: capture
            # them, then stop the streams so no completion can reload an
            # instance between its snapshot and process exit.  Anything a
            # watch would have delivered after this point is replayed from
            # the store when the snapshot is adopted.
            export_docs = {iid: host.export_state(iid) for iid in host.instances()}
            await host.bridge.drain()
            for iid in host.instances():
                if host.state_of(iid) is InstanceState.LOADED:
                    host.unload(iid)
            snapshots = _write_session_state(
                host, config.snapshot_dir, guest_configs, export_docs
            )
            config.metrics_path.parent.mkdir(parents=True, exist_ok=True)
            config.metrics_path.write_text(json.dumps(host.metrics(), indent=2, sort_keys=True))
            _echo(f"shutdown complete: {snapshots} snapshots in {config.snapshot_dir}")
        else:
            # Fault path: no snapshots to protect, so the host's own
            # teardown (sweep, cancel timers, drain streams) is safe.
            await host.shutdown()
        if isinstance(transport, RemoteHttpTransport):
            await transport.aclose()
    return exit_code


# -- click wiring -----------------------------------------------------------------


@click.group()
def main() -> None:
    """Run WebAssembly reconciliation controllers and their benchmarks."""


@main.command("run")
@click.option(
    "--config",
    "config_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Runtime config JSON. Keys: modules_dir (scanned for *.wasm with"
    " optional <name>.json guest-config sidecars), cache_dir, snapshot_dir,"
    " metrics_path, transport ({kind: inprocess} or {kind: http, base_url}),"
    " unload ({mode: never|every_turn|idle_timeout, seconds}), listen"
    " (host:port to expose the control API and mock resource API),"
    " instances_per_module, resume (adopt snapshots from the last clean"
    " shutdown). Relative paths resolve against the config file's directory.",
)
@click.option("--modules-dir", type=click.Path(path_type=Path), help="Override modules_dir.")
@click.option(
    "--cache-dir",
    type=click.Path(path_type=Path),
    help="Override cache_dir (also set by WASM_OPERATOR_CACHE).",
)
@click.option("--snapshot-dir", type=click.Path(path_type=Path), help="Override snapshot_dir.")
@click.option("--metrics-path", type=click.Path(path_type=Path), help="Override metrics_path.")
@click.option("--listen", help="Override listen address (host:port).")
@click.option("--resume/--no-resume", default=None, help="Override the resume flag.")
def run_command(config_path, modules_dir, cache_dir, snapshot_dir, metrics_path, listen, resume):
    """Run every module in a directory until interrupted."""
    overrides: dict = {}
    env_cache = os.environ.get("WASM_OPERATOR_CACHE")
    if env_cache:
        overrides["cache_dir"] = str(Path(env_cache).absolute())
    flag_paths = {
        "modules_dir": modules_dir,
        "cache_dir": cache_dir,
        "snapshot_dir": snapshot_dir,
        "metrics_path": metrics_path,
    }
    for key, value in flag_paths.items():
        if value is not None:
            overrides[key] = str(Path(value).absolute())
    if listen is not None:
        overrides["listen"] = listen
    if resume is not None:
        overrides["resume"] = resume
    try:
        config = RunConfig.from_path(config_path, overrides)
    except RunConfigError as e:
        _fail(f"config error: {e}")
        sys.exit(2)
    sys.exit(asyncio.run(_run_main(config)))


@main.command("bench")
@click.option(
    "--config",
    "config_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Benchmark config JSON. Keys: variants (subset of no_isolation,"
    " wasm, wasm_unload_every_turn), operator_counts, ballast_bytes, rounds,"
    " runs_per_config, idle_observation_seconds, round_timeout_seconds,"
    " hop_delay_ms, seed.",
)
@click.option(
    "--out",
    "out_dir",
    required=True,
    type=click.Path(file_okay=False, path_type=Path),
    help="Parent directory; results land in a timestamped subdirectory.",
)
@click.option(
    "--sampling-interval",
    default=1.0,
    show_default=True,
    help="Memory sampling period in seconds.",
)
def bench_command(config_path, out_dir, sampling_interval):
    """Execute the benchmark matrix and write per-run artifacts."""
    try:
        doc = json.loads(config_path.read_text())
        config = BenchConfig.from_doc(doc)
    except (OSError, json.JSONDecodeError, ConfigError) as e:
        _fail(f"config error: {e}")
        sys.exit(2)
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    results_dir = Path(out_dir) / f"bench-{stamp}"
    cache_env = os.environ.get("WASM_OPERATOR_CACHE")
    manifest = run_bench(
        config,
        results_dir,
        sampling_interval=sampling_interval,
        cache_dir=Path(cache_env).absolute() if cache_env else None,
        progress=_echo,
    )
    _echo(f"results written to {results_dir}")
    _echo(f"cells: {manifest['total']}, failed: {manifest['failed']}")
    if exceeds_failure_budget(manifest):
        _fail("more than 20% of runs failed")
        sys.exit(1)
    sys.exit(0)


@main.command("report")
@click.argument("results_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option(
    "--format",
    "fmt",
    type=click.Choice(["csv"]),
    default="csv",
    show_default=True,
    help="Output format.",
)
def report_command(results_dir, fmt):
    """Summarize benchmark results into CSV tables."""
    try:
        result = generate_report(results_dir)
    except ReportError as e:
        _fail(f"report error: {e}")
        sys.exit(2)
    for key in ("summary", "memory_points", "latency_quantiles", "slopes"):
        path = result.get(key)
        if path is not None:
            _echo(f"{key}: {path}")
    if result["incomplete"]:
        _echo(f"incomplete runs excluded ({len(result['incomplete'])}):")
        for entry in result["incomplete"]:
            _echo(f"  {entry}")
    sys.exit(0)


@main.command("serve")
@click.option(
    "--config",
    "config_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Runtime config JSON (same schema as `run`); `listen` is required.",
)
def serve_command(config_path):
    """Serve the control API standalone (modules are uploaded over HTTP)."""
    import uvicorn

    try:
        config = RunConfig.from_path(config_path)
    except RunConfigError as e:
        _fail(f"config error: {e}")
        sys.exit(2)
    if config.listen is None:
        _fail("config error: serve requires a listen address")
        sys.exit(2)
    if config.transport["kind"] == "inprocess":
        store = ResourceStore()
        transport = InProcessTransport(Gateway(store))
    else:
        store = None
        transport = RemoteHttpTransport(config.transport["base_url"])
    host = ControllerHost(
        transport,
        cache=ModuleCache(config.cache_dir),
        snapshot_dir=config.snapshot_dir,
        policy=config.policy(),
    )
    state = ServiceState(host, store=store)
    host_part, _, port_part = config.listen.rpartition(":")
    uvicorn.run(
        create_app(state),
        host=host_part or "127.0.0.1",
        port=int(port_part),
        log_level="info",
    )


@main.command("status")
@click.option("--url", required=True, help="Base URL of a running control API.")
def status_command(url):
    """Print health and metrics of a running server."""
    import httpx

    try:
        health = httpx.get(f"{url.rstrip('/')}/healthz", timeout=10.0)
        metrics = httpx.get(f"{url.rstrip('/')}/v1/metrics", timeout=10.0)
        health.raise_for_status()
        metrics.raise_for_status()
    except httpx.HTTPError as e:
        _fail(f"status error: {e}")
        sys.exit(1)
    _echo(json.dumps({"health": health.json(), "metrics": metrics.json()}, indent=2))
    sys.exit(0)


if __name__ == "__main__":
    main()
