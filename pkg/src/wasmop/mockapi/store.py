"""Versioned resource store with linearizable watches.

One mutex orders every mutation; a single monotonically increasing
resourceVersion is stamped across all namespaces (mutation k carries version
k).  The event log is append-only, so a watch opened at resourceVersion N
replays every event with version > N and then receives each later event
exactly once: subscribers are registered under the same lock that commits
mutations, leaving no window where an event could fall between replay and
live delivery.

Subscribers are plain callbacks invoked under the store lock (keep them
cheap); a callback returning False unsubscribes itself.  `AsyncWatch` adapts
a subscription onto an asyncio queue with a bounded buffer — a consumer that
lags more than `buffer_cap` events is disconnected (it reads a terminal None)
rather than growing the queue without limit, mirroring how real watch
connections are dropped when clients fall behind.

The gateway half maps request-level operations (get/list/put/post/delete)
onto the store with HTTP semantics, returning (status, canonical JSON body)
pairs; both the in-process transport and the HTTP facade delegate here so
the two surfaces cannot drift apart.
"""

from __future__ import annotations

import asyncio
import threading
from dataclasses import dataclass
from typing import Callable

from wasmop.mockapi import bodies

ADDED = "ADDED"
MODIFIED = "MODIFIED"
DELETED = "DELETED"

#: Events a lagging watch consumer may buffer before it is disconnected.
WATCH_BUFFER_CAP = 4096


@dataclass(frozen=True, slots=True)
class Resource:
    namespace: str
    name: str
    resource_version: int
    nonce: int

    def doc(self) -> dict:
        return bodies.resource_doc(
            self.namespace, self.name, self.resource_version, self.nonce
        )


@dataclass(frozen=True, slots=True)
class Event:
    type: str  # ADDED | MODIFIED | DELETED
    resource: Resource

    def body(self) -> bytes:
        return bodies.event_body(self.type, self.resource.doc())


class Subscription:
    """Handle for one registered watch callback."""

    __slots__ = ("_store", "_entry", "cancelled")

    def __init__(self, store: "ResourceStore", entry) -> None:
        self._store = store
        self._entry = entry
        self.cancelled = False

    def cancel(self) -> None:
        if not self.cancelled:
            self.cancelled = True
            self._store._remove_subscriber(self._entry)


class ResourceStore:
    """Thread-safe namespace/name -> Resource map with a global version."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._version = 0
        self._items: dict[tuple[str, str], Resource] = {}
        self._log: list[Event] = []
        self._subscribers: list[tuple[str, Callable[[Event], bool]]] = []

    # -- reads ------------------------------------------------------------------

    @property
    def resource_version(self) -> int:
        with self._lock:
            return self._version

    def get(self, namespace: str, name: str) -> Resource | None:
        with self._lock:
            return self._items.get((namespace, name))

    def list(self, namespace: str) -> tuple[list[Resource], int]:
        with self._lock:
            items = sorted(
                (r for (ns, _), r in self._items.items() if ns == namespace),
                key=lambda r: r.name,
            )
            return items, self._version

    def events(self) -> list[Event]:
        with self._lock:
            return list(self._log)

    # -- mutations -----------------------------------------------------------------

    def apply(self, namespace: str, name: str, nonce: int) -> tuple[Resource, bool]:
        """Create or replace; returns (resource, created)."""
        self._validate_names(namespace, name)
        with self._lock:
            created = (namespace, name) not in self._items
            return self._commit(namespace, name, nonce, created), created

    def create(self, namespace: str, name: str, nonce: int) -> Resource:
        """Create only; raises Conflict if the name exists."""
        self._validate_names(namespace, name)
        with self._lock:
            if (namespace, name) in self._items:
                raise Conflict(f"{namespace}/{name} already exists")
            return self._commit(namespace, name, nonce, True)

    def delete(self, namespace: str, name: str) -> Resource | None:
        with self._lock:
            existing = self._items.pop((namespace, name), None)
            if existing is None:
                return None
            self._version += 1
            tombstone = Resource(namespace, name, self._version, existing.nonce)
            self._publish(Event(DELETED, tombstone))
            return tombstone

    def _commit(self, namespace: str, name: str, nonce: int, created: bool) -> Resource:
        self._version += 1
        resource = Resource(namespace, name, self._version, nonce)
        self._items[(namespace, name)] = resource
        self._publish(Event(ADDED if created else MODIFIED, resource))
        return resource

    @staticmethod
    def _validate_names(namespace: str, name: str) -> None:
        if not bodies.NAME_RE.fullmatch(namespace):
            raise BadName(f"invalid namespace {namespace!r}")
        if not bodies.NAME_RE.fullmatch(name):
            raise BadName(f"invalid name {name!r}")

    # -- watches ----------------------------------------------------------------------

    def subscribe(
        self,
        namespace: str,
        since_version: int,
        sink: Callable[[Event], bool],
    ) -> Subscription:
        """Replay events after `since_version`, then deliver live ones.

        The sink runs under the store lock, for replay and live events alike;
        returning False unsubscribes (and aborts replay registration).
        """
        with self._lock:
            for event in self._log:
                if event.resource.namespace != namespace:
                    continue
                if event.resource.resource_version <= since_version:
                    continue
                if not sink(event):
                    return Subscription(self, None)
            entry = (namespace, sink)
            self._subscribers.append(entry)
            return Subscription(self, entry)

    def _publish(self, event: Event) -> None:
        self._log.append(event)
        if not self._subscribers:
            return
        keep = []
        for entry in self._subscribers:
            namespace, sink = entry
            if namespace != event.resource.namespace or sink(event):
                keep.append(entry)
        self._subscribers = keep

    def _remove_subscriber(self, entry) -> None:
        if entry is None:
            return
        with self._lock:
            try:
                self._subscribers.remove(entry)
            except ValueError:
                pass


class BadName(ValueError):
    pass


class Conflict(Exception):
    pass


class AsyncWatch:
    """Asyncio consumer for one namespace's watch stream.

    `get()` yields Events; None is terminal and means the stream is over —
    either `close()` was called or the consumer lagged past `buffer_cap`
    (visible as `overflowed`).
    """

    def __init__(
        self,
        store: ResourceStore,
        namespace: str,
        since_version: int,
        *,
        buffer_cap: int = WATCH_BUFFER_CAP,
    ) -> None:
        self._loop = asyncio.get_running_loop()
        self._queue: asyncio.Queue[Event | None] = asyncio.Queue()
        self._cap = buffer_cap
        # Backlog is counted at enqueue time rather than via queue size: when
        # the producer runs on the loop thread, call_soon_threadsafe callbacks
        # have not executed yet and qsize() would lag arbitrarily far behind.
        self._backlog_lock = threading.Lock()
        self._backlog = 0
        self.overflowed = False
        self.closed = False
        self.delivered = 0
        self._subscription = store.subscribe(namespace, since_version, self._sink)

    def _sink(self, event: Event) -> bool:
        # Runs under the store lock, possibly from another thread.
        if self.closed:
            return False
        with self._backlog_lock:
            if self._backlog >= self._cap:
                self.overflowed = True
                self.closed = True
                self._loop.call_soon_threadsafe(self._queue.put_nowait, None)
                return False
            self._backlog += 1
        self._loop.call_soon_threadsafe(self._queue.put_nowait, event)
        return True

    async def get(self) -> Event | None:
        item = await self._queue.get()
        if item is not None:
            with self._backlog_lock:
                self._backlog -= 1
            self.delivered += 1
        return item

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._subscription.cancel()
            self._queue.put_nowait(None)


class Gateway:
    """Request-level operations with HTTP semantics over one store."""

    def __init__(self, store: ResourceStore) -> None:
        self.store = store

    def get(self, namespace: str, name: str) -> tuple[int, bytes]:
        resource = self.store.get(namespace, name)
        if resource is None:
            return 404, bodies.status_body(404, "NotFound", f"{namespace}/{name}")
        return 200, bodies.resource_body(
            resource.namespace, resource.name, resource.resource_version, resource.nonce
        )

    def list(self, namespace: str) -> tuple[int, bytes]:
        items, version = self.store.list(namespace)
        return 200, bodies.list_body([r.doc() for r in items], version)

    def put(self, namespace: str, name: str, body: bytes) -> tuple[int, bytes]:
        try:
            nonce = bodies.parse_nonce(body)
        except ValueError as e:
            return 400, bodies.status_body(400, "BadRequest", str(e))
        try:
            resource, created = self.store.apply(namespace, name, nonce)
        except BadName as e:
            return 400, bodies.status_body(400, "BadRequest", str(e))
        status = 201 if created else 200
        return status, bodies.resource_body(
            resource.namespace, resource.name, resource.resource_version, resource.nonce
        )

    def post(self, namespace: str, body: bytes) -> tuple[int, bytes]:
        try:
            name = bodies.parse_metadata_name(body)
            nonce = bodies.parse_nonce(body)
        except ValueError as e:
            return 400, bodies.status_body(400, "BadRequest", str(e))
        try:
            resource = self.store.create(namespace, name, nonce)
        except BadName as e:
            return 400, bodies.status_body(400, "BadRequest", str(e))
        except Conflict as e:
            return 409, bodies.status_body(409, "AlreadyExists", str(e))
        return 201, bodies.resource_body(
            resource.namespace, resource.name, resource.resource_version, resource.nonce
        )

    def delete(self, namespace: str, name: str) -> tuple[int, bytes]:
        tombstone = self.store.delete(namespace, name)
        if tombstone is None:
            return 404, bodies.status_body(404, "NotFound", f"{namespace}/{name}")
        return 200, bodies.status_body(200, "Deleted", f"{namespace}/{name}")
