"""Report pipeline: golden byte-stability over the checked-in sample
dataset, hand-verified bounds and intervals, degraded-data flagging, and
loud schema errors."""

import csv
import json
import shutil
from pathlib import Path

import pytest

from wasmop.report import ReportError, generate_report, load_runs

SAMPLE = Path(__file__).parent / "data" / "sample_results"
GOLDEN = Path(__file__).parent / "data" / "golden_summary.csv"
SEC = 1_000_000_000


def test_golden_summary_is_byte_stable(tmp_path):
    """The checked-in dataset uses constant memory plateaus, so every bound
    is hand-checkable (the plateau value; medians 1100/700/2100/1200) and
    the pooled fit is the 4-point regression with slope 100, s = sqrt(20000),
    giving half-width t(0.975;2)*s*sqrt(1.5) = 745.24 around the center."""
    result = generate_report(SAMPLE, tmp_path / "report")
    assert (tmp_path / "report" / "summary.csv").read_bytes() == GOLDEN.read_bytes()
    assert result["runs"] == 4 and result["usable_runs"] == 4
    assert result["incomplete"] == []


def test_report_defaults_to_results_subdirectory(tmp_path):
    results = tmp_path / "results"
    shutil.copytree(SAMPLE, results)
    result = generate_report(results)
    assert result["summary"] == results / "report" / "summary.csv"
    assert result["summary"].exists()


def test_latency_quantiles_pool_runs(tmp_path):
    generate_report(SAMPLE, tmp_path / "report")
    rows = list(csv.reader((tmp_path / "report" / "plot_latency_quantiles.csv").open()))
    assert rows[0] == [
        "variant", "operators", "ballast_bytes", "rounds",
        "min_us", "p50_us", "p90_us", "p99_us", "max_us",
    ]
    by_count = {row[1]: row for row in rows[1:]}
    # n=10 pools both runs: 1000..1700 step 100; nearest-rank p50 is 1300.
    assert by_count["10"][3:] == ["8", "1000", "1300", "1700", "1700", "1700"]
    assert by_count["20"][3:] == ["8", "2000", "2300", "2700", "2700", "2700"]


def test_memory_points_list_each_run(tmp_path):
    generate_report(SAMPLE, tmp_path / "report")
    rows = list(csv.reader((tmp_path / "report" / "plot_memory_bounds.csv").open()))
    assert len(rows) == 1 + 4 * 2  # four runs, two phases each
    active = [row for row in rows[1:] if row[1] == "active"]
    assert [row[5] for row in active] == ["1000", "1200", "2000", "2200"]


def test_empty_directory_is_an_error(tmp_path):
    with pytest.raises(ReportError, match="no run.json"):
        generate_report(tmp_path)


def test_missing_field_names_file_and_field(tmp_path):
    run_dir = tmp_path / "wasm" / "n001-b0" / "run-0"
    run_dir.mkdir(parents=True)
    (run_dir / "run.json").write_text(json.dumps({"result": {"ok": True}}))
    with pytest.raises(ReportError, match=r"run\.json: missing field cell"):
        generate_report(tmp_path)


def test_bad_csv_header_names_file(tmp_path):
    results = tmp_path / "results"
    shutil.copytree(SAMPLE, results)
    victim = results / "wasm" / "n010-b0" / "run-0" / "latency.csv"
    victim.write_text("round,elapsed\n1,5\n")
    with pytest.raises(ReportError, match="latency.csv: expected header"):
        generate_report(results)


def test_deleted_csv_flags_cell_instead_of_aborting(tmp_path):
    results = tmp_path / "results"
    shutil.copytree(SAMPLE, results)
    (results / "wasm" / "n010-b0" / "run-0" / "memory.csv").unlink()
    result = generate_report(results, tmp_path / "report")
    assert result["usable_runs"] == 3
    assert result["incomplete"] == ["wasm operators=10 ballast=0 run=0"]
    rows = {(r[0], r[1], r[2]): r for r in result["rows"]}
    # The surviving n=10 run still yields a bound; the pooled fit now has
    # only 3 points but remains computable.
    assert rows[("wasm", "active", "10")][4] == "1200"


def test_failed_run_is_excluded_and_all_failed_cell_goes_blank(tmp_path):
    results = tmp_path / "results"
    shutil.copytree(SAMPLE, results)
    for run in ("run-0", "run-1"):
        manifest_path = results / "wasm" / "n020-b0" / run / "run.json"
        doc = json.loads(manifest_path.read_text())
        doc["result"]["ok"] = False
        doc["result"]["error"] = "RoundTimeout: round 3 exceeded 30.0s"
        manifest_path.write_text(json.dumps(doc))
    result = generate_report(results, tmp_path / "report")
    assert result["usable_runs"] == 2
    assert len(result["incomplete"]) == 2
    rows = {(r[0], r[1], r[2]): r for r in result["rows"]}
    blank = rows[("wasm", "active", "20")]
    assert blank[4] == "" and blank[5] == "" and blank[6] == ""  # flagged, not faked
    survivor = rows[("wasm", "active", "10")]
    assert survivor[4] == "1100"
    # A single operator count cannot support a fit: intervals go blank too.
    assert survivor[5] == "" and survivor[6] == ""


def test_single_run_yields_no_intervals(tmp_path):
    results = tmp_path / "results"
    source = SAMPLE / "wasm" / "n010-b0" / "run-0"
    shutil.copytree(source, results / "wasm" / "n010-b0" / "run-0")
    result = generate_report(results, tmp_path / "report")
    rows = {(r[0], r[1], r[2]): r for r in result["rows"]}
    row = rows[("wasm", "active", "10")]
    assert row[4] == "1000"
    assert row[5] == "" and row[6] == ""


def write_synthetic_run(base, variant, n, ballast, run_index, active_rss, idle_rss):
    run_dir = base / variant / f"n{n:03d}-b{ballast}" / f"run-{run_index}"
    run_dir.mkdir(parents=True, exist_ok=True)
    phase_ns = {
        "active_start": 0,
        "active_end": 3 * SEC,
        "idle_start": 10 * SEC,
        "idle_end": 13 * SEC,
    }
    (run_dir / "run.json").write_text(
        json.dumps(
            {
                "schema": "wasmop-bench-run/1",
                "cell": {
                    "variant": variant,
                    "operator_count": n,
                    "ballast_bytes": ballast,
                    "rounds": 1,
                    "run_index": run_index,
                },
                "result": {"ok": True, "error": None, "phase_ns": phase_ns},
            }
        )
    )
    with (run_dir / "latency.csv").open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["round", "start_ns", "end_ns", "elapsed_us"])
        writer.writerow([1, 0, 1000, 1])
    with (run_dir / "memory.csv").open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["t_ns", "phase", "rss_bytes"])
        for i in range(3):
            writer.writerow([i * SEC, "active", active_rss])
            writer.writerow([(10 + i) * SEC, "idle", idle_rss])


def test_slopes_report_per_operator_growth_per_ballast(tmp_path):
    """Bounds built as n*(base + ballast) give per-count slopes equal to
    base+ballast exactly, so the per-ballast-byte slope is exactly 1."""
    results = tmp_path / "results"
    for ballast in (0, 1000, 2000):
        for n in (10, 20, 30):
            write_synthetic_run(
                results, "wasm", n, ballast, 0,
                active_rss=n * (500 + ballast),
                idle_rss=n * (100 + ballast),
            )
    generate_report(results, tmp_path / "report")
    rows = list(csv.reader((tmp_path / "report" / "slopes.csv").open()))
    assert rows[0][0:3] == ["variant", "phase", "ballast_levels"]
    by_phase = {row[1]: row for row in rows[1:] if row[0] == "wasm"}
    for phase in ("active", "idle"):
        slope = float(by_phase[phase][3])
        assert slope == pytest.approx(1.0, abs=1e-9)
        assert float(by_phase[phase][4]) == pytest.approx(1.0, abs=1e-6)
        assert float(by_phase[phase][5]) == pytest.approx(1.0, abs=1e-6)


def test_loader_round_trips_sample_runs():
    runs = load_runs(SAMPLE)
    assert len(runs) == 4
    assert all(run.ok for run in runs)
    assert {run.operator_count for run in runs} == {10, 20}
    assert all(len(run.latency_us) == 4 for run in runs)
