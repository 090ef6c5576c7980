"""Subprocess entry point for a single benchmark run.

Each run executes in its own process so resident-memory samples measure
exactly one chain: the process reads a cell spec, runs the active and
idle phases, writes latency.csv / memory.csv / run.json into the output
directory, and exits 0 only if the run completed cleanly.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from pathlib import Path

from wasmop.bench.config import CellSpec, ConfigError
from wasmop.bench.workload import execute_run


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="wasmop-bench-cell",
        description="Execute one benchmark run and write its artifacts.",
    )
    parser.add_argument("--spec", required=True, help="path to the cell spec JSON")
    parser.add_argument("--out", required=True, help="directory for run artifacts")
    parser.add_argument("--cache-dir", default=None, help="shared compiled-module cache")
    parser.add_argument(
        "--sampling-interval", type=float, default=1.0, help="memory sampling period in seconds"
    )
    args = parser.parse_args(argv)

    try:
        spec = CellSpec.from_doc(json.loads(Path(args.spec).read_text()))
    except (OSError, json.JSONDecodeError, ConfigError) as e:
        print(f"bad cell spec: {e}", file=sys.stderr)
        return 2

    try:
        document = asyncio.run(
            execute_run(
                spec,
                Path(args.out),
                cache_dir=Path(args.cache_dir) if args.cache_dir else None,
                sampling_interval=args.sampling_interval,
            )
        )
    except Exception as e:  # pragma: no cover - defensive last resort
        print(f"run crashed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1

    if not document["result"]["ok"]:
        print(f"run failed: {document['result']['error']}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
