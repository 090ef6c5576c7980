"""In-process mock of the resource API server the controllers reconcile
against: a linearizable versioned store, canonical JSON bodies, a
transport-agnostic gateway, and an HTTP facade."""

from .store import (
    ADDED,
    DELETED,
    MODIFIED,
    AsyncWatch,
    BadName,
    Conflict,
    Event,
    Gateway,
    Resource,
    ResourceStore,
    Subscription,
)

__all__ = [
    "ADDED",
    "DELETED",
    "MODIFIED",
    "AsyncWatch",
    "BadName",
    "Conflict",
    "Event",
    "Gateway",
    "Resource",
    "ResourceStore",
    "Subscription",
]
