"""Report generation over benchmark artifacts.

Walks a results directory for run.json manifests (plus their latency.csv
and memory.csv), computes per-phase 95% memory upper bounds, pools runs
per configuration for regression against operator count, and emits:

* ``summary.csv`` — one row per (variant, phase, operators, ballast):
  median bound across runs and the pooled 95% prediction interval at
  that operator count.  Cells that cannot be computed (no usable runs,
  or too little data to fit) are left blank — a visible flag, never a
  silent zero.
* ``plot_memory_bounds.csv`` — the raw per-run bound points behind the
  memory-versus-operator-count figures.
* ``plot_latency_quantiles.csv`` — per-configuration end-to-end latency
  distribution summaries.
* ``slopes.csv`` — per-operator memory growth per ballast level with a
  95% confidence interval, when two or more ballast levels exist.

Malformed artifacts fail loudly with the file and field named; missing
files degrade the affected configuration instead of aborting the report.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass
from pathlib import Path

from wasmop.stats import (
    RegressionModel,
    StatsError,
    fit_linear,
    prediction_interval,
    slope_with_ci,
    upper_bound_95,
)

__all__ = ["ReportError", "generate_report", "load_runs"]

SUMMARY_HEADER = "variant,phase,operators,ballast_bytes,bound_bytes,fit_low,fit_high"
PHASES = ("active", "idle")


class ReportError(RuntimeError):
    """Missing or malformed benchmark artifacts."""


@dataclass(frozen=True)
class RunData:
    path: Path
    variant: str
    operator_count: int
    ballast_bytes: int
    run_index: int
    ok: bool
    phase_ns: dict[str, int]
    latency_us: list[int]
    memory_rows: list[tuple[int, str, int]]


def _field(doc: dict, path: Path, *keys: str):
    node = doc
    for key in keys:
        if not isinstance(node, dict) or key not in node:
            raise ReportError(f"{path}: missing field {'.'.join(keys)}")
        node = node[key]
    return node


def _read_csv(path: Path, expected_header: list[str]) -> list[list[str]]:
    with path.open(newline="") as handle:
        rows = list(csv.reader(handle))
    if not rows or rows[0] != expected_header:
        raise ReportError(f"{path}: expected header {','.join(expected_header)}")
    return rows[1:]


def _load_one(manifest_path: Path) -> RunData:
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ReportError(f"{manifest_path}: not valid JSON: {e}") from e

    cell = _field(doc, manifest_path, "cell")
    variant = _field(doc, manifest_path, "cell", "variant")
    operator_count = _field(doc, manifest_path, "cell", "operator_count")
    ballast = _field(doc, manifest_path, "cell", "ballast_bytes")
    run_index = cell.get("run_index", 0)
    result = _field(doc, manifest_path, "result")
    ok = bool(result.get("ok"))
    phase_ns = {
        key: int(value)
        for key, value in (result.get("phase_ns") or {}).items()
        if isinstance(value, (int, float))
    }

    run_dir = manifest_path.parent
    latency_us: list[int] = []
    memory_rows: list[tuple[int, str, int]] = []
    usable = ok

    latency_path = run_dir / "latency.csv"
    if latency_path.exists():
        for row in _read_csv(latency_path, ["round", "start_ns", "end_ns", "elapsed_us"]):
            try:
                latency_us.append(int(row[3]))
            except (IndexError, ValueError) as e:
                raise ReportError(f"{latency_path}: bad elapsed_us row {row!r}") from e
    else:
        usable = False

    memory_path = run_dir / "memory.csv"
    if memory_path.exists():
        for row in _read_csv(memory_path, ["t_ns", "phase", "rss_bytes"]):
            try:
                memory_rows.append((int(row[0]), row[1], int(row[2])))
            except (IndexError, ValueError) as e:
                raise ReportError(f"{memory_path}: bad sample row {row!r}") from e
    else:
        usable = False

    return RunData(
        path=run_dir,
        variant=str(variant),
        operator_count=int(operator_count),
        ballast_bytes=int(ballast),
        run_index=int(run_index),
        ok=usable,
        phase_ns=phase_ns,
        latency_us=latency_us,
        memory_rows=memory_rows,
    )


def load_runs(results_dir: Path) -> list[RunData]:
    results_dir = Path(results_dir)
    manifests = sorted(results_dir.rglob("run.json"))
    if not manifests:
        raise ReportError(f"no run.json manifests found under {results_dir}")
    return [_load_one(path) for path in manifests]


# -- analysis ------------------------------------------------------------------------


def phase_bound(run: RunData, phase: str) -> float | None:
    """Time-weighted 95% bound of this run's RSS during one phase."""
    rows = [(t, rss) for t, tagged, rss in run.memory_rows if tagged == phase]
    if not rows:
        return None
    recorded_end = run.phase_ns.get(f"{phase}_end")
    window_end = max(recorded_end, rows[-1][0]) if recorded_end is not None else None
    return upper_bound_95(rows, window_end)


def _fit_key(run: RunData) -> tuple[str, int]:
    return (run.variant, run.ballast_bytes)


def _pooled_fits(
    usable: list[RunData], bounds: dict[tuple, float]
) -> dict[tuple[str, int, str], RegressionModel]:
    """Per (variant, ballast, phase): bound vs operator count over all runs."""
    points: dict[tuple[str, int, str], list[tuple[float, float]]] = {}
    for run in usable:
        for phase in PHASES:
            bound = bounds.get((id(run), phase))
            if bound is None:
                continue
            points.setdefault((*_fit_key(run), phase), []).append(
                (float(run.operator_count), bound)
            )
    fits = {}
    for key, pts in points.items():
        try:
            fits[key] = fit_linear(pts)
        except StatsError:
            continue  # too few points or a single operator count: no interval
    return fits


def _quantile(sorted_values: list[int], q: float) -> int:
    index = max(0, math.ceil(q * len(sorted_values)) - 1)
    return sorted_values[index]


def _format_bound(value: float | None) -> str:
    return "" if value is None else str(int(round(value)))


def _format_fit(value: float | None) -> str:
    return "" if value is None else f"{value:.1f}"


def generate_report(results_dir: Path, out_dir: Path | None = None) -> dict:
    """Build the report bundle; returns paths, rows, and incomplete cells."""
    results_dir = Path(results_dir)
    runs = load_runs(results_dir)
    out_dir = Path(out_dir) if out_dir is not None else results_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)

    usable = [run for run in runs if run.ok]
    incomplete = [
        f"{run.variant} operators={run.operator_count}"
        f" ballast={run.ballast_bytes} run={run.run_index}"
        for run in runs
        if not run.ok
    ]

    bounds: dict[tuple, float] = {}
    for run in usable:
        for phase in PHASES:
            bound = phase_bound(run, phase)
            if bound is not None:
                bounds[(id(run), phase)] = bound

    fits = _pooled_fits(usable, bounds)

    # One summary row per configuration/phase over the union of all runs,
    # so configurations whose every run failed still appear (blank cells).
    configs = sorted({(run.variant, run.operator_count, run.ballast_bytes) for run in runs})
    summary_rows: list[list[str]] = []
    for variant, operators, ballast in configs:
        for phase in PHASES:
            cell_bounds = [
                bounds[(id(run), phase)]
                for run in usable
                if (run.variant, run.operator_count, run.ballast_bytes)
                == (variant, operators, ballast)
                and (id(run), phase) in bounds
            ]
            median_bound = statistics.median(cell_bounds) if cell_bounds else None
            fit = fits.get((variant, ballast, phase))
            low = high = None
            if fit is not None:
                low, high = prediction_interval(fit, float(operators))
            summary_rows.append(
                [
                    variant,
                    phase,
                    str(operators),
                    str(ballast),
                    _format_bound(median_bound),
                    _format_fit(low),
                    _format_fit(high),
                ]
            )

    summary_path = out_dir / "summary.csv"
    with summary_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(SUMMARY_HEADER.split(","))
        writer.writerows(summary_rows)

    # Raw per-run bound points (scatter data behind the memory figures).
    points_path = out_dir / "plot_memory_bounds.csv"
    with points_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["variant", "phase", "operators", "ballast_bytes", "run_index", "bound_bytes"])
        for run in sorted(
            usable,
            key=lambda r: (r.variant, r.operator_count, r.ballast_bytes, r.run_index),
        ):
            for phase in PHASES:
                bound = bounds.get((id(run), phase))
                if bound is not None:
                    writer.writerow(
                        [
                            run.variant,
                            phase,
                            run.operator_count,
                            run.ballast_bytes,
                            run.run_index,
                            int(round(bound)),
                        ]
                    )

    # Latency distribution per configuration, pooled across runs.
    latency_path = out_dir / "plot_latency_quantiles.csv"
    with latency_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["variant", "operators", "ballast_bytes", "rounds", "min_us", "p50_us", "p90_us", "p99_us", "max_us"]
        )
        for variant, operators, ballast in configs:
            pooled = sorted(
                value
                for run in usable
                if (run.variant, run.operator_count, run.ballast_bytes)
                == (variant, operators, ballast)
                for value in run.latency_us
            )
            if not pooled:
                continue
            writer.writerow(
                [
                    variant,
                    operators,
                    ballast,
                    len(pooled),
                    pooled[0],
                    _quantile(pooled, 0.50),
                    _quantile(pooled, 0.90),
                    _quantile(pooled, 0.99),
                    pooled[-1],
                ]
            )

    # Per-operator growth per ballast byte, when several ballast levels exist.
    slope_rows: list[list[str]] = []
    for variant in sorted({run.variant for run in usable}):
        for phase in PHASES:
            levels = [
                (ballast, fits[(fit_variant, ballast, fit_phase)])
                for (fit_variant, ballast, fit_phase) in sorted(fits)
                if fit_variant == variant and fit_phase == phase
            ]
            if len({level for level, _ in levels}) < 2:
                continue
            estimate = slope_with_ci(levels)
            slope_rows.append(
                [
                    variant,
                    phase,
                    str(estimate.levels),
                    f"{estimate.slope:.6f}",
                    f"{estimate.low:.6f}" if math.isfinite(estimate.low) else "",
                    f"{estimate.high:.6f}" if math.isfinite(estimate.high) else "",
                ]
            )
    slopes_path = out_dir / "slopes.csv"
    with slopes_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["variant", "phase", "ballast_levels", "slope_bytes_per_op_per_ballast_byte", "ci_low", "ci_high"]
        )
        writer.writerows(slope_rows)

    return {
        "summary": summary_path,
        "memory_points": points_path,
        "latency_quantiles": latency_path,
        "slopes": slopes_path,
        "rows": summary_rows,
        "runs": len(runs),
        "usable_runs": len(usable),
        "incomplete": incomplete,
    }
