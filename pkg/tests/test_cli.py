"""Command-line surface: config validation, the run loop's clean-shutdown
contract (exercised through real subprocesses and signals), benchmark and
report delegation, and the standalone server."""

import base64
import json
import os
import queue
import shutil
import signal
import subprocess
import sys
import threading
import time
from pathlib import Path

import httpx
import pytest
from click.testing import CliRunner

from wasmop.cli import RunConfig, RunConfigError, main
from wasmop.guest.programs import synthetic_operator
from wasmop.runtime.snapshot import read_snapshot

SAMPLE_RESULTS = Path(__file__).parent / "data" / "sample_results"
EMPTY_MODULE = b"\x00asm\x01\x00\x00\x00"


# -- RunConfig ---------------------------------------------------------------------


def test_run_config_defaults_resolve_against_base_dir(tmp_path):
    config = RunConfig.from_doc({}, base_dir=tmp_path)
    assert config.modules_dir == tmp_path / "modules"
    assert config.cache_dir == tmp_path / "cache"
    assert config.snapshot_dir == tmp_path / "snapshots"
    assert config.metrics_path == tmp_path / "metrics.json"
    assert config.transport == {"kind": "inprocess"}
    assert config.unload == {"mode": "never"}
    assert config.listen is None
    assert config.instances_per_module == 1
    assert config.resume is False


def test_run_config_round_trip_is_idempotent(tmp_path):
    docs = [
        {},
        {"modules_dir": "m", "unload": "every_turn", "instances_per_module": 3},
        {
            "transport": {"kind": "http", "base_url": "http://localhost:9000"},
            "unload": {"mode": "idle_timeout", "seconds": 2.5},
            "listen": "127.0.0.1:8080",
            "resume": True,
        },
    ]
    for doc in docs:
        once = RunConfig.from_doc(doc, base_dir=tmp_path)
        again = RunConfig.from_doc(once.to_doc(), base_dir=tmp_path)
        assert once == again
        assert once.to_doc() == again.to_doc()


@pytest.mark.parametrize(
    "doc, fragment",
    [
        ({"bogus": 1}, "unknown config keys"),
        ({"transport": {"kind": "smoke"}}, "transport.kind"),
        ({"transport": {"kind": "http"}}, "base_url"),
        ({"transport": {"kind": "inprocess", "base_url": "x"}}, "no further keys"),
        ({"unload": {"mode": "sometimes"}}, "unload.mode"),
        ({"unload": {"mode": "idle_timeout"}}, "unload.seconds"),
        ({"unload": {"mode": "idle_timeout", "seconds": 0}}, "unload.seconds"),
        ({"unload": {"mode": "never", "seconds": 5}}, "no further keys"),
        ({"listen": "no-port"}, "host:port"),
        ({"instances_per_module": 0}, "instances_per_module"),
        ({"instances_per_module": True}, "instances_per_module"),
        ({"resume": "yes"}, "resume must be a boolean"),
        ({"modules_dir": 7}, "modules_dir"),
    ],
)
def test_run_config_rejects_bad_documents(tmp_path, doc, fragment):
    with pytest.raises(RunConfigError, match=fragment):
        RunConfig.from_doc(doc, base_dir=tmp_path)


def test_run_config_policies(tmp_path):
    assert type(RunConfig.from_doc({}, base_dir=tmp_path).policy()).__name__ == "NeverUnload"
    assert (
        type(RunConfig.from_doc({"unload": "every_turn"}, base_dir=tmp_path).policy()).__name__
        == "UnloadEveryTurn"
    )
    policy = RunConfig.from_doc(
        {"unload": {"mode": "idle_timeout", "seconds": 4}}, base_dir=tmp_path
    ).policy()
    assert type(policy).__name__ == "IdleTimeout" and policy.seconds == 4.0


def test_run_help_documents_every_config_key():
    result = CliRunner().invoke(main, ["run", "--help"])
    assert result.exit_code == 0
    for key in RunConfig._KEYS:
        assert key in result.output, key


# -- subprocess scaffolding -----------------------------------------------------------


class CliProcess:
    """A `wasmop` subprocess with line-buffered, timeout-aware stdout reads."""

    def __init__(self, args, env=None):
        full_env = dict(os.environ)
        if env:
            full_env.update(env)
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "wasmop.cli", *args],
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            env=full_env,
        )
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._read, daemon=True)
        self._reader.start()

    def _read(self):
        for line in self.proc.stdout:
            self._lines.put(line.rstrip("\n"))
        self._lines.put(None)

    def expect(self, prefix: str, timeout: float = 30.0) -> str:
        deadline = time.monotonic() + timeout
        seen = []
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise AssertionError(f"timed out waiting for {prefix!r}, saw {seen}")
            try:
                line = self._lines.get(timeout=remaining)
            except queue.Empty:
                continue
            if line is None:
                raise AssertionError(
                    f"process exited while waiting for {prefix!r}; saw {seen};"
                    f" stderr: {self.proc.stderr.read()}"
                )
            seen.append(line)
            if line.startswith(prefix):
                return line

    def interrupt_and_wait(self, signum=signal.SIGINT, timeout: float = 30.0):
        self.proc.send_signal(signum)
        try:
            self.proc.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            raise
        return self.proc.returncode, self.proc.stderr.read()


def write_run_setup(base: Path, *, listen=None, extra=None) -> Path:
    """Module dir with the relay guest + a config file; returns config path."""
    modules = base / "modules"
    modules.mkdir(parents=True, exist_ok=True)
    (modules / "relay.wasm").write_bytes(synthetic_operator())
    (modules / "relay.json").write_text(
        json.dumps({"source": "ns-1", "dest": "ns-2", "ballast_bytes": 0}, indent=2)
    )
    doc = {"modules_dir": "modules"}
    if listen is not None:
        doc["listen"] = listen
    if extra:
        doc.update(extra)
    config_path = base / "runtime.json"
    config_path.write_text(json.dumps(doc))
    return config_path


def post_and_await_mirror(url: str, name: str, nonce: int, timeout: float = 15.0):
    created = httpx.post(
        f"{url}/apis/test.dev/v1/namespaces/ns-1/testresources",
        json={"metadata": {"name": name}, "spec": {"nonce": nonce}},
    )
    assert created.status_code == 201
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        response = httpx.get(
            f"{url}/apis/test.dev/v1/namespaces/ns-2/testresources/{name}"
        )
        if response.status_code == 200 and response.json()["spec"]["nonce"] == nonce:
            return
        time.sleep(0.05)
    raise AssertionError(f"{name} never mirrored to ns-2")


# -- run ------------------------------------------------------------------------------


def test_run_empty_modules_dir_interrupt_exits_zero(tmp_path):
    config_path = tmp_path / "runtime.json"
    config_path.write_text("{}")
    cli = CliProcess(["run", "--config", str(config_path)])
    ready = cli.expect("runtime ready")
    assert ready == "runtime ready: 0 instances"
    rc, _ = cli.interrupt_and_wait(signal.SIGTERM)
    assert rc == 0
    assert json.loads((tmp_path / "metrics.json").read_text())["instances"] == {}


def test_run_malformed_config_exits_two(tmp_path):
    config_path = tmp_path / "broken.json"
    config_path.write_text("{not json")
    proc = subprocess.run(
        [sys.executable, "-m", "wasmop.cli", "run", "--config", str(config_path)],
        capture_output=True,
        text=True,
        timeout=60,
    )
    assert proc.returncode == 2
    assert "config error" in proc.stderr

    config_path.write_text(json.dumps({"no_such_key": 1}))
    proc = subprocess.run(
        [sys.executable, "-m", "wasmop.cli", "run", "--config", str(config_path)],
        capture_output=True,
        text=True,
        timeout=60,
    )
    assert proc.returncode == 2
    assert "unknown config keys" in proc.stderr


def test_run_invalid_module_exits_two_with_symbol_report(tmp_path):
    modules = tmp_path / "modules"
    modules.mkdir()
    (modules / "empty.wasm").write_bytes(EMPTY_MODULE)
    (modules / "garbage.wasm").write_bytes(b"\x7fELF not wasm")
    config_path = tmp_path / "runtime.json"
    config_path.write_text("{}")
    proc = subprocess.run(
        [sys.executable, "-m", "wasmop.cli", "run", "--config", str(config_path)],
        capture_output=True,
        text=True,
        timeout=60,
    )
    assert proc.returncode == 2
    assert "module validation failed" in proc.stderr
    assert "empty.wasm: start: required export missing" in proc.stderr
    assert "garbage.wasm" in proc.stderr


def test_run_mirrors_shuts_down_cleanly_and_resumes(tmp_path):
    cache_override = tmp_path / "cache-from-env"
    config_path = write_run_setup(tmp_path, listen="127.0.0.1:0")

    cli = CliProcess(
        ["run", "--config", str(config_path)],
        env={"WASM_OPERATOR_CACHE": str(cache_override)},
    )
    url = cli.expect("control api listening on ").split()[-1]
    assert cli.expect("runtime ready") == "runtime ready: 1 instances"

    post_and_await_mirror(url, "probe", 7)

    status = CliRunner().invoke(main, ["status", "--url", url])
    assert status.exit_code == 0
    assert '"status": "ok"' in status.output

    rc, stderr = cli.interrupt_and_wait()
    assert rc == 0, stderr

    # Exactly one snapshot + one adoption sidecar for the one loaded instance.
    snapshot_dir = tmp_path / "snapshots"
    snapshots = sorted(snapshot_dir.glob("*.wops"))
    sidecars = sorted(snapshot_dir.glob("*.state.json"))
    assert len(snapshots) == 1 and len(sidecars) == 1
    snap = read_snapshot(snapshots[0])
    sidecar = json.loads(sidecars[0].read_text())
    assert sidecar["module_hash"] == snap.module_hash
    assert sidecar["snapshot"] == snapshots[0].name
    watches = [op for op in sidecar["ops"].values() if op["kind"] == "watch"]
    assert watches and watches[0]["namespace"] == "ns-1"
    guest_config = json.loads(base64.b64decode(sidecar["config_b64"]))
    assert guest_config["source"] == "ns-1"
    # The env var redirected the module cache.
    assert list(cache_override.glob("*.cwasm")), "WASM_OPERATOR_CACHE not honoured"
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["counters"]["unloads"] == 1

    # Second leg: a fresh process adopts the snapshot and keeps reconciling.
    config_path = write_run_setup(
        tmp_path, listen="127.0.0.1:0", extra={"resume": True}
    )
    resumed = CliProcess(["run", "--config", str(config_path)])
    assert resumed.expect("resumed ") == f"resumed 1 instances from {snapshot_dir}"
    url2 = resumed.expect("control api listening on ").split()[-1]
    resumed.expect("runtime ready")
    post_and_await_mirror(url2, "probe-after-resume", 9)
    rc2, stderr2 = resumed.interrupt_and_wait()
    assert rc2 == 0, stderr2


# -- serve -----------------------------------------------------------------------------


def test_serve_standalone_accepts_uploads(tmp_path):
    config_path = tmp_path / "runtime.json"
    config_path.write_text(json.dumps({"listen": "127.0.0.1:0"}))
    proc = subprocess.Popen(
        [sys.executable, "-m", "wasmop.cli", "serve", "--config", str(config_path)],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
    )
    try:
        url = None
        deadline = time.monotonic() + 30
        while time.monotonic() < deadline:
            line = proc.stderr.readline()
            if not line:
                raise AssertionError("serve exited before startup")
            if "Uvicorn running on " in line:
                url = line.split("Uvicorn running on ")[1].split()[0]
                break
        assert url, "no startup line"

        assert httpx.get(f"{url}/healthz").json()["status"] == "ok"
        digest = httpx.post(f"{url}/v1/modules", content=synthetic_operator()).json()[
            "module_hash"
        ]
        spawned = httpx.post(
            f"{url}/v1/instances",
            json={
                "module_hash": digest,
                "config": {"source": "ns-1", "dest": "ns-2", "ballast_bytes": 0},
                "name": "relay",
            },
        )
        (iid,) = spawned.json()["instance_ids"]
        deadline = time.monotonic() + 15
        while time.monotonic() < deadline:
            doc = httpx.get(f"{url}/v1/instances/{iid}").json()
            if doc["ops"]["watch"] >= 1:
                break
            time.sleep(0.05)
        post_and_await_mirror(url, "served", 3)
    finally:
        proc.send_signal(signal.SIGINT)
        try:
            proc.wait(timeout=15)
        except subprocess.TimeoutExpired:
            proc.kill()
            raise
    assert proc.returncode == 0


# -- bench ----------------------------------------------------------------------------


def test_bench_invalid_configs_exit_two(tmp_path):
    runner = CliRunner()
    bad_variant = tmp_path / "bad-variant.json"
    bad_variant.write_text(json.dumps({"variant": "balloon"}))
    result = runner.invoke(main, ["bench", "--config", str(bad_variant), "--out", str(tmp_path)])
    assert result.exit_code == 2
    assert "unknown variant" in result.output + result.stderr

    zero_rounds = tmp_path / "zero-rounds.json"
    zero_rounds.write_text(json.dumps({"rounds": 0}))
    result = runner.invoke(main, ["bench", "--config", str(zero_rounds), "--out", str(tmp_path)])
    assert result.exit_code == 2
    assert "rounds" in result.output + result.stderr


def test_bench_smoke_writes_timestamped_results(tmp_path):
    config_path = tmp_path / "bench.json"
    config_path.write_text(
        json.dumps(
            {
                "variant": "wasm",
                "operator_counts": [2],
                "ballast_bytes": [0],
                "rounds": 2,
                "runs_per_config": 1,
                "idle_observation_seconds": 0.2,
                "round_timeout_seconds": 20,
            }
        )
    )
    out = tmp_path / "out"
    result = CliRunner().invoke(
        main,
        ["bench", "--config", str(config_path), "--out", str(out), "--sampling-interval", "0.1"],
    )
    assert result.exit_code == 0, result.output + result.stderr
    (results_dir,) = [p for p in out.iterdir() if p.name.startswith("bench-")]
    manifest = json.loads((results_dir / "manifest.json").read_text())
    assert manifest["total"] == 1 and manifest["failed"] == 0
    run_dir = results_dir / "wasm" / "n002-b0" / "run-0"
    assert (run_dir / "latency.csv").exists()
    assert str(results_dir) in result.output

    # The report command consumes what bench produced.
    report = CliRunner().invoke(main, ["report", str(results_dir)])
    assert report.exit_code == 0, report.output + report.stderr
    assert (results_dir / "report" / "summary.csv").exists()


# -- report ---------------------------------------------------------------------------


def test_report_command_on_sample_results(tmp_path):
    results = tmp_path / "results"
    shutil.copytree(SAMPLE_RESULTS, results)
    result = CliRunner().invoke(main, ["report", str(results)])
    assert result.exit_code == 0
    assert (results / "report" / "summary.csv").exists()
    assert "summary:" in result.output


def test_report_flags_incomplete_runs(tmp_path):
    results = tmp_path / "results"
    shutil.copytree(SAMPLE_RESULTS, results)
    (results / "wasm" / "n010-b0" / "run-0" / "memory.csv").unlink()
    result = CliRunner().invoke(main, ["report", str(results)])
    assert result.exit_code == 0
    assert "incomplete runs excluded (1):" in result.output
    assert "wasm operators=10 ballast=0 run=0" in result.output


def test_report_empty_directory_exits_two(tmp_path):
    result = CliRunner().invoke(main, ["report", str(tmp_path)])
    assert result.exit_code == 2
    assert "report error" in result.output + result.stderr


def test_report_rejects_unknown_format(tmp_path):
    result = CliRunner().invoke(main, ["report", str(tmp_path), "--format", "xml"])
    assert result.exit_code == 2
