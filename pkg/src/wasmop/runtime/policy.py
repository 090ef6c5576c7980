"""Unload policies: when does a loaded instance get snapshotted to disk?

A policy only ever sees instances that are *unloadable*: loaded, no queued
deliveries, and nothing pending except watches and timers (an in-flight
request means the guest is mid-reconcile and about to be woken, so swapping
it out would be pure churn).  The host asks two questions — should this
instance be unloaded right now, and how long until that answer could change —
the second drives the pump's idle sleep so an idle-timeout policy fires
without polling.
"""

from __future__ import annotations


class NeverUnload:
    """Keep every instance resident; the baseline for memory comparisons."""

    def should_unload(self, idle_seconds: float) -> bool:
        return False

    def seconds_until_unload(self, idle_seconds: float) -> float | None:
        return None


class UnloadEveryTurn:
    """Snapshot the moment an instance goes quiet — maximal memory release,
    maximal snapshot churn; the worst-case overhead variant."""

    def should_unload(self, idle_seconds: float) -> bool:
        return True

    def seconds_until_unload(self, idle_seconds: float) -> float | None:
        return 0.0


class IdleTimeout:
    """Unload after a quiet period, amortizing snapshot cost for busy
    instances while still releasing long-idle ones."""

    def __init__(self, seconds: float = 60.0) -> None:
        if seconds <= 0:
            raise ValueError("idle timeout must be positive")
        self.seconds = seconds

    def should_unload(self, idle_seconds: float) -> bool:
        return idle_seconds >= self.seconds

    def seconds_until_unload(self, idle_seconds: float) -> float | None:
        return max(0.0, self.seconds - idle_seconds)

    def __repr__(self) -> str:
        return f"IdleTimeout({self.seconds})"
