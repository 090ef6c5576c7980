"""Parent benchmark driver.

Expands a config into cells (variant x operator count x ballast x run),
executes each in a fresh subprocess, and writes a manifest.json naming
every run directory and its outcome.  Individual failures are recorded,
not fatal; a benchmark is judged failed only when more than 20% of its
runs fail.
"""

from __future__ import annotations

import json
import subprocess
import sys
from collections.abc import Callable
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from wasmop.bench.config import BenchConfig, CellSpec

__all__ = [
    "CellResult",
    "FAILURE_BUDGET",
    "MANIFEST_SCHEMA",
    "cell_run_dir",
    "exceeds_failure_budget",
    "run_bench",
    "run_cell_subprocess",
]

MANIFEST_SCHEMA = "wasmop-bench-manifest/1"
FAILURE_BUDGET = 0.20


@dataclass(frozen=True)
class CellResult:
    spec: CellSpec
    run_dir: Path
    ok: bool
    error: str | None


def cell_run_dir(out_dir: Path, spec: CellSpec) -> Path:
    return Path(out_dir) / spec.variant / spec.cell_dir_name() / spec.run_dir_name()


def _time_budget(spec: CellSpec) -> float:
    """Hard ceiling for one cell: every round at its full timeout, the idle
    window, plus startup/compile/teardown slack scaled by chain size."""
    return (
        spec.rounds * spec.round_timeout_seconds
        + spec.idle_seconds
        + 120.0
        + 2.0 * spec.operator_count
    )


def run_cell_subprocess(
    spec: CellSpec,
    run_dir: Path,
    *,
    cache_dir: Path,
    python: str = sys.executable,
    sampling_interval: float = 1.0,
) -> CellResult:
    run_dir.mkdir(parents=True, exist_ok=True)
    spec_path = run_dir / "cell.json"
    spec_path.write_text(json.dumps(spec.to_doc(), indent=2) + "\n")
    command = [
        python,
        "-m",
        "wasmop.bench.cell_main",
        "--spec",
        str(spec_path),
        "--out",
        str(run_dir),
        "--cache-dir",
        str(cache_dir),
        "--sampling-interval",
        str(sampling_interval),
    ]
    try:
        completed = subprocess.run(
            command, capture_output=True, text=True, timeout=_time_budget(spec)
        )
    except subprocess.TimeoutExpired:
        return CellResult(spec, run_dir, False, "cell subprocess exceeded its time budget")

    if completed.returncode == 0:
        return CellResult(spec, run_dir, True, None)

    detail = f"exit code {completed.returncode}"
    stderr_lines = (completed.stderr or "").strip().splitlines()
    if stderr_lines:
        detail = stderr_lines[-1]
    run_json = run_dir / "run.json"
    if run_json.exists():
        try:
            recorded = json.loads(run_json.read_text())["result"]["error"]
            if recorded:
                detail = recorded
        except (json.JSONDecodeError, KeyError, TypeError):
            pass
    return CellResult(spec, run_dir, False, detail)


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_bench(
    config: BenchConfig,
    out_dir: Path,
    *,
    python: str = sys.executable,
    sampling_interval: float = 1.0,
    cache_dir: Path | None = None,
    progress: Callable[[str], None] | None = None,
) -> dict:
    """Execute every cell and write manifest.json; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cache_dir is None:
        cache_dir = out_dir / ".module-cache"
    started_at = _utc_now()

    cells = config.cells()
    results: list[CellResult] = []
    for index, spec in enumerate(cells):
        if progress is not None:
            progress(
                f"[{index + 1}/{len(cells)}] {spec.variant}"
                f" operators={spec.operator_count} ballast={spec.ballast_bytes}"
                f" run={spec.run_index}"
            )
        run_dir = cell_run_dir(out_dir, spec)
        result = run_cell_subprocess(
            spec,
            run_dir,
            cache_dir=cache_dir,
            python=python,
            sampling_interval=sampling_interval,
        )
        if progress is not None and not result.ok:
            progress(f"  failed: {result.error}")
        results.append(result)

    failed = sum(1 for result in results if not result.ok)
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "config": config.to_doc(),
        "started_at": started_at,
        "finished_at": _utc_now(),
        "total": len(results),
        "failed": failed,
        "cells": [
            {
                "variant": result.spec.variant,
                "operator_count": result.spec.operator_count,
                "ballast_bytes": result.spec.ballast_bytes,
                "run_index": result.spec.run_index,
                "dir": str(result.run_dir.relative_to(out_dir)),
                "ok": result.ok,
                "error": result.error,
            }
            for result in results
        ],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def exceeds_failure_budget(manifest: dict) -> bool:
    return manifest["failed"] > FAILURE_BUDGET * manifest["total"]
