"""Synthetic benchmark: an N-operator relay chain propagating a counter
through namespaces, with latency and resident-memory measurement across
isolation variants (native tasks, wasm guests, wasm guests unloaded after
every turn)."""

from .config import BenchConfig, CellSpec, ConfigError, VARIANTS

__all__ = ["BenchConfig", "CellSpec", "ConfigError", "VARIANTS"]
