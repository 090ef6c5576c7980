"""Wire types for the runtime control API."""

from __future__ import annotations

from typing import Any

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    engine: str
    instances: int


class ModuleResponse(BaseModel):
    module_hash: str
    cached: bool


class ModuleListResponse(BaseModel):
    modules: list[str]


class SpawnRequest(BaseModel):
    module_hash: str
    #: JSON value handed to the guest verbatim (it sees the serialized bytes).
    config: Any = None
    name: str = ""
    count: int = Field(default=1, ge=1, le=1024)


class SpawnResponse(BaseModel):
    instance_ids: list[str]


class OpCounts(BaseModel):
    request: int
    watch: int
    timer: int


class InstanceStatus(BaseModel):
    instance_id: str
    name: str
    module_hash: str
    state: str
    turns: int
    pages: int
    ops: OpCounts
    queue_depth: int
    trap_reason: str
    snapshot: str


class InstanceListResponse(BaseModel):
    instances: list[InstanceStatus]


class UnloadResponse(BaseModel):
    instance_id: str
    snapshot_path: str


class DestroyResponse(BaseModel):
    destroyed: str


class LogsResponse(BaseModel):
    instance_id: str
    lines: list[str]


class MetricsResponse(BaseModel):
    instances: dict[str, int]
    counters: dict[str, int]
    bridge: dict[str, int]
    cache: dict[str, int]
