"""Controller host runtime: compiled-module cache, instance snapshots,
unload policies, and the async host that drives controller instances."""

from wasmop.runtime.cache import AbiError, ModuleCache, compile_module, module_hash
from wasmop.runtime.host import (
    ControllerHost,
    HostError,
    InstanceState,
    Turn,
    TurnOutcome,
    UnknownInstance,
    UnknownModule,
)
from wasmop.runtime.policy import IdleTimeout, NeverUnload, UnloadEveryTurn
from wasmop.runtime.snapshot import (
    CorruptSnapshot,
    Snapshot,
    SnapshotError,
    read_snapshot,
    write_snapshot,
)
from wasmop.runtime.workqueue import DeliveryQueue

__all__ = [
    "AbiError",
    "ModuleCache",
    "compile_module",
    "module_hash",
    "ControllerHost",
    "HostError",
    "InstanceState",
    "Turn",
    "TurnOutcome",
    "UnknownInstance",
    "UnknownModule",
    "IdleTimeout",
    "NeverUnload",
    "UnloadEveryTurn",
    "CorruptSnapshot",
    "Snapshot",
    "SnapshotError",
    "read_snapshot",
    "write_snapshot",
    "DeliveryQueue",
]
