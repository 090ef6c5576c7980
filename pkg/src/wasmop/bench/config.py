"""Benchmark configuration: JSON in, validated and normalized plan out.

A config names one or more variants, operator counts, and ballast sizes;
the cross product (times ``runs_per_config`` repetitions) is the list of
cells a benchmark executes.  Scalars are accepted wherever a list makes
sense and normalize to one-element lists, so configs round-trip to a
canonical form.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

__all__ = ["BenchConfig", "CellSpec", "ConfigError", "VARIANTS"]

VARIANTS = ("no_isolation", "wasm", "wasm_unload_every_turn")

DEFAULT_OPERATOR_COUNTS = tuple(range(10, 101, 10))
DEFAULT_ROUNDS = 500
DEFAULT_RUNS = 5
DEFAULT_IDLE_SECONDS = 120.0
DEFAULT_ROUND_TIMEOUT = 30.0

_KEYS = {
    "variants",
    "variant",
    "operator_counts",
    "ballast_bytes",
    "rounds",
    "runs_per_config",
    "idle_observation_seconds",
    "round_timeout_seconds",
    "hop_delay_ms",
    "seed",
}


class ConfigError(ValueError):
    """Malformed or out-of-range benchmark configuration."""


def _int_list(doc: dict, key: str, default: tuple[int, ...], minimum: int) -> tuple[int, ...]:
    raw = doc.get(key, list(default))
    if isinstance(raw, (int, float, str)):
        raw = [raw]
    if not isinstance(raw, list) or not raw:
        raise ConfigError(f"{key} must be a non-empty integer or list of integers")
    values = []
    for item in raw:
        if isinstance(item, bool) or not isinstance(item, int):
            raise ConfigError(f"{key} entries must be integers, got {item!r}")
        if item < minimum:
            raise ConfigError(f"{key} entries must be >= {minimum}, got {item}")
        values.append(item)
    return tuple(values)


def _positive_int(doc: dict, key: str, default: int, minimum: int = 1) -> int:
    value = doc.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{key} must be an integer")
    if value < minimum:
        raise ConfigError(f"{key} must be >= {minimum}, got {value}")
    return value


def _nonnegative_number(doc: dict, key: str, default: float) -> float:
    value = doc.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key} must be a number")
    if value < 0:
        raise ConfigError(f"{key} must be >= 0, got {value}")
    return float(value)


@dataclass(frozen=True)
class BenchConfig:
    variants: tuple[str, ...]
    operator_counts: tuple[int, ...]
    ballast_bytes: tuple[int, ...]
    rounds: int
    runs_per_config: int
    idle_observation_seconds: float
    round_timeout_seconds: float
    hop_delay_ms: float
    seed: int

    @classmethod
    def from_doc(cls, doc: dict) -> "BenchConfig":
        if not isinstance(doc, dict):
            raise ConfigError("benchmark config must be a JSON object")
        unknown = set(doc) - _KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "variant" in doc and "variants" in doc:
            raise ConfigError("give either 'variant' or 'variants', not both")

        raw_variants = doc.get("variants", doc.get("variant", list(VARIANTS)))
        if isinstance(raw_variants, str):
            raw_variants = [raw_variants]
        if not isinstance(raw_variants, list) or not raw_variants:
            raise ConfigError("variants must be a non-empty string or list of strings")
        for name in raw_variants:
            if name not in VARIANTS:
                raise ConfigError(
                    f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}"
                )

        round_timeout = _nonnegative_number(doc, "round_timeout_seconds", DEFAULT_ROUND_TIMEOUT)
        if round_timeout <= 0:
            raise ConfigError("round_timeout_seconds must be > 0")

        return cls(
            variants=tuple(raw_variants),
            operator_counts=_int_list(doc, "operator_counts", DEFAULT_OPERATOR_COUNTS, 1),
            ballast_bytes=_int_list(doc, "ballast_bytes", (0,), 0),
            rounds=_positive_int(doc, "rounds", DEFAULT_ROUNDS),
            runs_per_config=_positive_int(doc, "runs_per_config", DEFAULT_RUNS),
            idle_observation_seconds=_nonnegative_number(
                doc, "idle_observation_seconds", DEFAULT_IDLE_SECONDS
            ),
            round_timeout_seconds=round_timeout,
            hop_delay_ms=_nonnegative_number(doc, "hop_delay_ms", 0.0),
            seed=_positive_int(doc, "seed", 0, minimum=0),
        )

    @classmethod
    def from_path(cls, path: str | Path) -> "BenchConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        return cls.from_doc(doc)

    def to_doc(self) -> dict:
        doc = asdict(self)
        doc["variants"] = list(self.variants)
        doc["operator_counts"] = list(self.operator_counts)
        doc["ballast_bytes"] = list(self.ballast_bytes)
        return doc

    def cells(self) -> list["CellSpec"]:
        """The full execution plan, one spec per (variant, count, ballast, run)."""
        plan = []
        for variant in self.variants:
            for count in self.operator_counts:
                for ballast in self.ballast_bytes:
                    for run_index in range(self.runs_per_config):
                        plan.append(
                            CellSpec(
                                variant=variant,
                                operator_count=count,
                                ballast_bytes=ballast,
                                rounds=self.rounds,
                                run_index=run_index,
                                idle_seconds=self.idle_observation_seconds,
                                round_timeout_seconds=self.round_timeout_seconds,
                                hop_delay_ms=self.hop_delay_ms,
                                seed=self.seed,
                            )
                        )
        return plan


@dataclass(frozen=True)
class CellSpec:
    """One benchmark execution: a single run of one configuration."""

    variant: str
    operator_count: int
    ballast_bytes: int
    rounds: int
    run_index: int
    idle_seconds: float
    round_timeout_seconds: float
    hop_delay_ms: float
    seed: int

    @classmethod
    def from_doc(cls, doc: dict) -> "CellSpec":
        try:
            return cls(**doc)
        except TypeError as e:
            raise ConfigError(f"malformed cell spec: {e}") from e

    def to_doc(self) -> dict:
        return asdict(self)

    def run_dir_name(self) -> str:
        return f"run-{self.run_index}"

    def cell_dir_name(self) -> str:
        return f"n{self.operator_count:03d}-b{self.ballast_bytes}"
