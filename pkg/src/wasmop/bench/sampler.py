"""Resident-memory sampling.

``resident_bytes`` reads the resident set size of a process from the
platform's process-statistics source (psutil when importable, /proc
otherwise) and fails loudly when neither exists — a silent zero would
poison every downstream bound.  ``MemorySampler`` runs on its own timer
thread tagging each sample with the benchmark phase, handing rows over
through append-only list operations so it never perturbs round timing.
"""

from __future__ import annotations

import os
import threading
import time

try:
    import psutil
except ImportError:  # pragma: no cover - psutil is a declared dependency
    psutil = None

__all__ = ["MemorySampler", "UnsupportedPlatform", "resident_bytes"]

_PAGE_SIZE = os.sysconf("SC_PAGE_SIZE") if hasattr(os, "sysconf") else 4096


class UnsupportedPlatform(RuntimeError):
    """No process-statistics source is available on this platform."""


def _statm_rss(pid: int) -> int:
    try:
        with open(f"/proc/{pid}/statm", "rb") as statm:
            fields = statm.read().split()
    except FileNotFoundError as e:
        raise ProcessLookupError(f"no such process: {pid}") from e
    return int(fields[1]) * _PAGE_SIZE


def resident_bytes(pid: int | None = None) -> int:
    """Current resident-set bytes of ``pid`` (default: this process)."""
    target = os.getpid() if pid is None else pid
    if psutil is not None:
        try:
            return psutil.Process(target).memory_info().rss
        except psutil.NoSuchProcess as e:
            raise ProcessLookupError(f"no such process: {target}") from e
    if os.path.isdir("/proc"):
        return _statm_rss(target)
    raise UnsupportedPlatform(
        "no resident-memory source: psutil is unavailable and /proc does not exist"
    )


class MemorySampler:
    """Samples this process's RSS at a fixed interval on a daemon thread.

    Rows are ``(t_ns, phase, rss_bytes)`` with ``t_ns`` from the monotonic
    clock.  ``mark(phase)`` switches the tag and takes an immediate sample
    so phase boundaries are crisp.  The sampling thread only appends to the
    row list and the driver only reads it after ``stop()``, so no lock
    guards the handoff.
    """

    def __init__(self, interval: float = 1.0, pid: int | None = None) -> None:
        if interval <= 0:
            raise ValueError("sampling interval must be positive")
        self.interval = interval
        self.pid = pid
        self.phase = "setup"
        self._rows: list[tuple[int, str, int]] = []
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True, name="rss-sampler")

    def _sample(self) -> None:
        self._rows.append((time.monotonic_ns(), self.phase, resident_bytes(self.pid)))

    def _run(self) -> None:
        while not self._stop.wait(self.interval):
            self._sample()

    def start(self) -> "MemorySampler":
        resident_bytes(self.pid)  # fail before the thread starts if unsupported
        self._sample()
        self._thread.start()
        return self

    def mark(self, phase: str) -> None:
        self.phase = phase
        self._sample()

    def stop(self) -> list[tuple[int, str, int]]:
        self._stop.set()
        self._thread.join(timeout=10)
        self._sample()
        return self._rows

    def rows(self) -> list[tuple[int, str, int]]:
        return list(self._rows)
