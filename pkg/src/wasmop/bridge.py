"""Bridge between guest request envelopes and the resource API.

`KubeBridge.submit` is the synchronous entry point the host's `kube_request`
import shim calls from inside a running guest turn.  It assigns the operation
id, validates and routes the envelope, schedules the actual I/O on the event
loop, and returns immediately — the guest never blocks on the network.  Every
submission eventually produces at least one completion for its id; malformed
envelopes produce a 400 Response rather than an exception, because a bad
request is the guest's bug to observe, not the host's crash.

Unary requests (GET/PUT/POST/DELETE) complete once with a Response.  A WATCH
request opens a stream: each store event for the namespace arrives as a
WatchEvent completion, and the stream survives transport hiccups by
reconnecting from the last delivered resourceVersion.  Only after
`max_stream_failures` consecutive connection attempts that deliver nothing
does the bridge give up and post a terminal StreamClosed.  `cancel_streams`
tears down an instance's streams without that terminal message (used when an
instance is destroyed or quarantined, where nobody is listening any more).

Transports carry the actual I/O and come in two flavours: `InProcessTransport`
calls the gateway directly (optionally with a simulated per-request latency),
`RemoteHttpTransport` speaks the same resource API over HTTP with retries.
"""

from __future__ import annotations

import asyncio
import json
from dataclasses import dataclass
from typing import Callable, Protocol
from urllib.parse import parse_qsl

import httpx

from wasmop.abi import Envelope, EnvelopeKind, Method, decode_envelope, encode_envelope
from wasmop.mockapi import bodies
from wasmop.mockapi.store import AsyncWatch, Gateway

COLLECTION_PREFIX = f"/apis/{bodies.API_VERSION}/namespaces/"

_METHOD_NAMES = {
    Method.GET: "GET",
    Method.POST: "POST",
    Method.PUT: "PUT",
    Method.DELETE: "DELETE",
}


class OperationKind:
    """Host-visible flavour of a pending async operation."""

    REQUEST = "request"
    WATCH = "watch"
    TIMER = "timer"


class CompletionSink(Protocol):
    """The host surface the bridge posts results into."""

    def register_operation(self, instance_id: str, kind: str) -> int: ...

    def post_completion(self, instance_id: str, op_id: int, payload: bytes) -> None: ...


class WatchChannel(Protocol):
    """One live watch connection: get() yields (resourceVersion, event body),
    None once the server ends the stream."""

    async def get(self) -> tuple[int, bytes] | None: ...

    def close(self) -> None: ...


class Transport(Protocol):
    async def request(
        self, method: str, namespace: str, name: str | None, body: bytes
    ) -> tuple[int, bytes]: ...

    async def open_watch(self, namespace: str, since_version: int) -> WatchChannel: ...


class PathError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class ParsedRequest:
    namespace: str
    name: str | None
    resource_version: int | None
    watch: bool


def parse_request_path(path: str) -> ParsedRequest:
    """Split an API path into namespace / optional name / watch query."""
    path, sep, query = path.partition("?")
    if not path.startswith(COLLECTION_PREFIX):
        raise PathError(f"unknown path {path!r}")
    rest = path[len(COLLECTION_PREFIX) :]
    segments = rest.split("/")
    if len(segments) == 2:
        namespace, plural = segments
        name = None
    elif len(segments) == 3:
        namespace, plural, name = segments
        if not bodies.NAME_RE.fullmatch(name):
            raise PathError(f"invalid name {name!r}")
    else:
        raise PathError(f"unknown path {path!r}")
    if plural != bodies.PLURAL:
        raise PathError(f"unknown resource {plural!r}")
    if not bodies.NAME_RE.fullmatch(namespace):
        raise PathError(f"invalid namespace {namespace!r}")

    resource_version: int | None = None
    watch = False
    if sep:
        if not query:
            raise PathError("empty query string")
        pairs = parse_qsl(query, keep_blank_values=True, strict_parsing=True)
        seen = set()
        for key, value in pairs:
            if key in seen:
                raise PathError(f"duplicate query key {key!r}")
            seen.add(key)
            if key == "resourceVersion":
                if not value.isdigit():
                    raise PathError(f"bad resourceVersion {value!r}")
                resource_version = int(value)
            elif key == "watch":
                if value != "true":
                    raise PathError(f"bad watch value {value!r}")
                watch = True
            else:
                raise PathError(f"unknown query key {key!r}")
    return ParsedRequest(namespace, name, resource_version, watch)


class _Stream:
    __slots__ = ("instance_id", "op_id", "namespace", "last_version", "cancelled", "task")

    def __init__(self, instance_id: str, op_id: int, namespace: str, since: int) -> None:
        self.instance_id = instance_id
        self.op_id = op_id
        self.namespace = namespace
        self.last_version = since
        self.cancelled = False
        self.task: asyncio.Task | None = None


class KubeBridge:
    def __init__(
        self,
        transport: Transport,
        sink: CompletionSink,
        *,
        max_stream_failures: int = 3,
        retry_delay: float = 0.05,
    ) -> None:
        self._transport = transport
        self._sink = sink
        self.max_stream_failures = max_stream_failures
        self.retry_delay = retry_delay
        self._streams: dict[tuple[str, int], _Stream] = {}
        self.submitted = 0
        self.rejected = 0

    # -- submission ------------------------------------------------------------

    def submit(self, instance_id: str, payload: bytes) -> int:
        """Route one guest envelope; returns its operation id immediately."""
        self.submitted += 1
        try:
            envelope = decode_envelope(payload)
        except Exception as e:
            return self._reject(instance_id, f"undecodable envelope: {e}")
        if envelope.kind != EnvelopeKind.REQUEST:
            return self._reject(instance_id, f"kind {int(envelope.kind)} is not a request")
        try:
            parsed = parse_request_path(envelope.path)
        except PathError as e:
            return self._reject(instance_id, str(e))

        if envelope.method == Method.WATCH:
            return self._open_stream(instance_id, envelope, parsed)
        return self._start_request(instance_id, envelope, parsed)

    def _reject(self, instance_id: str, detail: str) -> int:
        self.rejected += 1
        op_id = self._sink.register_operation(instance_id, OperationKind.REQUEST)
        self._complete(instance_id, op_id, 400, bodies.status_body(400, "BadRequest", detail))
        return op_id

    def _complete(self, instance_id: str, op_id: int, status: int, body: bytes) -> None:
        payload = encode_envelope(Envelope.response(status, body))
        self._sink.post_completion(instance_id, op_id, payload)

    # -- unary requests ----------------------------------------------------------

    def _start_request(self, instance_id: str, envelope: Envelope, parsed: ParsedRequest) -> int:
        method = _METHOD_NAMES.get(envelope.method)
        problem = None
        if method is None:
            problem = f"unsupported method {int(envelope.method)}"
        elif parsed.watch or parsed.resource_version is not None:
            problem = "watch query on a unary request"
        elif method in ("PUT", "DELETE") and parsed.name is None:
            problem = f"{method} requires a resource name"
        elif method == "POST" and parsed.name is not None:
            problem = "POST targets the collection, not a name"
        op_id = self._sink.register_operation(instance_id, OperationKind.REQUEST)
        if problem is not None:
            self.rejected += 1
            self._complete(instance_id, op_id, 400, bodies.status_body(400, "BadRequest", problem))
            return op_id
        coro = self._run_request(instance_id, op_id, method, parsed, envelope.body)
        asyncio.get_running_loop().create_task(coro)
        return op_id

    async def _run_request(
        self, instance_id: str, op_id: int, method: str, parsed: ParsedRequest, body: bytes
    ) -> None:
        try:
            status, response_body = await self._transport.request(
                method, parsed.namespace, parsed.name, body
            )
        except asyncio.CancelledError:
            raise
        except Exception as e:
            status = 503
            response_body = bodies.status_body(503, "Unavailable", str(e))
        self._complete(instance_id, op_id, status, response_body)

    # -- watch streams ---------------------------------------------------------------

    def _open_stream(self, instance_id: str, envelope: Envelope, parsed: ParsedRequest) -> int:
        problem = None
        if parsed.name is not None:
            problem = "watch targets the collection, not a name"
        elif envelope.body:
            problem = "watch request takes no body"
        if problem is not None:
            return self._reject(instance_id, problem)
        op_id = self._sink.register_operation(instance_id, OperationKind.WATCH)
        since = parsed.resource_version or 0
        self._arm_stream(instance_id, op_id, parsed.namespace, since)
        return op_id

    def reopen_stream(self, instance_id: str, op_id: int, namespace: str, since: int) -> None:
        """Re-arm a stream for a pre-registered op id (cold-start restore)."""
        self._arm_stream(instance_id, op_id, namespace, since)

    def _arm_stream(self, instance_id: str, op_id: int, namespace: str, since: int) -> None:
        stream = _Stream(instance_id, op_id, namespace, since)
        self._streams[(instance_id, op_id)] = stream
        stream.task = asyncio.get_running_loop().create_task(self._pump_stream(stream))

    async def _pump_stream(self, stream: _Stream) -> None:
        failures = 0
        try:
            while not stream.cancelled:
                delivered = 0
                try:
                    channel = await self._transport.open_watch(
                        stream.namespace, stream.last_version
                    )
                except asyncio.CancelledError:
                    raise
                except Exception:
                    failures += 1
                    if failures >= self.max_stream_failures:
                        break
                    await asyncio.sleep(self.retry_delay)
                    continue
                try:
                    while not stream.cancelled:
                        item = await channel.get()
                        if item is None:
                            break
                        version, body = item
                        if version > stream.last_version:
                            stream.last_version = version
                        delivered += 1
                        payload = encode_envelope(Envelope.watch_event(body))
                        self._sink.post_completion(stream.instance_id, stream.op_id, payload)
                finally:
                    channel.close()
                if stream.cancelled:
                    break
                failures = 0 if delivered else failures + 1
                if failures >= self.max_stream_failures:
                    break
                await asyncio.sleep(self.retry_delay)
        except asyncio.CancelledError:
            pass
        finally:
            self._streams.pop((stream.instance_id, stream.op_id), None)
            if not stream.cancelled:
                self._sink.post_completion(
                    stream.instance_id, stream.op_id, encode_envelope(Envelope.stream_closed())
                )

    def cancel_streams(self, instance_id: str) -> int:
        """Silently tear down an instance's streams; returns how many."""
        doomed = [s for (iid, _), s in self._streams.items() if iid == instance_id]
        for stream in doomed:
            stream.cancelled = True
            if stream.task is not None:
                stream.task.cancel()
            self._streams.pop((stream.instance_id, stream.op_id), None)
        return len(doomed)

    def stream_state(self, instance_id: str) -> dict[int, tuple[str, int]]:
        """op_id -> (namespace, last resourceVersion) for live streams."""
        return {
            op_id: (s.namespace, s.last_version)
            for (iid, op_id), s in self._streams.items()
            if iid == instance_id
        }

    async def drain(self) -> None:
        """Cancel every stream and wait for the tasks to finish (shutdown)."""
        tasks = []
        for stream in list(self._streams.values()):
            stream.cancelled = True
            if stream.task is not None:
                stream.task.cancel()
                tasks.append(stream.task)
        self._streams.clear()
        for task in tasks:
            try:
                await task
            except asyncio.CancelledError:
                pass


class InProcessTransport:
    """Direct calls into a gateway, with optional simulated request latency."""

    def __init__(self, gateway: Gateway, *, request_delay: float = 0.0) -> None:
        self.gateway = gateway
        self.request_delay = request_delay

    async def request(
        self, method: str, namespace: str, name: str | None, body: bytes
    ) -> tuple[int, bytes]:
        if self.request_delay > 0:
            await asyncio.sleep(self.request_delay)
        g = self.gateway
        if method == "GET":
            return g.list(namespace) if name is None else g.get(namespace, name)
        if method == "PUT":
            return g.put(namespace, name, body)
        if method == "POST":
            return g.post(namespace, body)
        if method == "DELETE":
            return g.delete(namespace, name)
        return 400, bodies.status_body(400, "BadRequest", f"unsupported method {method}")

    async def open_watch(self, namespace: str, since_version: int) -> WatchChannel:
        return _StoreChannel(AsyncWatch(self.gateway.store, namespace, since_version))


class _StoreChannel:
    def __init__(self, watch: AsyncWatch) -> None:
        self._watch = watch

    async def get(self) -> tuple[int, bytes] | None:
        event = await self._watch.get()
        if event is None:
            return None
        return event.resource.resource_version, event.body()

    def close(self) -> None:
        self._watch.close()


class RemoteHttpTransport:
    """The same resource API spoken over HTTP.

    `client_factory` builds the AsyncClient (injectable for tests); transient
    transport errors are retried up to `attempts` times per request before
    surfacing as an exception (which the bridge converts to a 503).
    """

    def __init__(
        self,
        base_url: str,
        *,
        client_factory: Callable[[], httpx.AsyncClient] | None = None,
        attempts: int = 3,
        retry_delay: float = 0.05,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self._client_factory = client_factory or (
            lambda: httpx.AsyncClient(base_url=self.base_url, timeout=30.0)
        )
        self._client: httpx.AsyncClient | None = None
        self.attempts = attempts
        self.retry_delay = retry_delay

    def _ensure_client(self) -> httpx.AsyncClient:
        if self._client is None:
            self._client = self._client_factory()
        return self._client

    def _collection_path(self, namespace: str) -> str:
        return f"{COLLECTION_PREFIX}{namespace}/{bodies.PLURAL}"

    async def request(
        self, method: str, namespace: str, name: str | None, body: bytes
    ) -> tuple[int, bytes]:
        path = self._collection_path(namespace)
        if name is not None:
            path = f"{path}/{name}"
        client = self._ensure_client()
        last_error: Exception | None = None
        for attempt in range(self.attempts):
            try:
                response = await client.request(method, path, content=body or None)
                return response.status_code, response.content
            except httpx.TransportError as e:
                last_error = e
                if attempt + 1 < self.attempts:
                    await asyncio.sleep(self.retry_delay)
        raise last_error  # bridge turns this into a 503 completion

    async def open_watch(self, namespace: str, since_version: int) -> WatchChannel:
        path = f"{self._collection_path(namespace)}?watch=true&resourceVersion={since_version}"
        client = self._ensure_client()
        cm = client.stream("GET", path, timeout=httpx.Timeout(30.0, read=None))
        response = await cm.__aenter__()
        if response.status_code != 200:
            await cm.__aexit__(None, None, None)
            raise RuntimeError(f"watch rejected with status {response.status_code}")
        return _HttpChannel(cm, response)

    async def aclose(self) -> None:
        if self._client is not None:
            await self._client.aclose()
            self._client = None


class _HttpChannel:
    """NDJSON watch stream: one event document per line."""

    def __init__(self, cm, response: httpx.Response) -> None:
        self._cm = cm
        self._lines = response.aiter_lines()
        self._closed = False

    async def get(self) -> tuple[int, bytes] | None:
        if self._closed:
            return None
        try:
            async for line in self._lines:
                if not line.strip():
                    continue
                doc = json.loads(line)
                version = int(doc["object"]["metadata"]["resourceVersion"])
                return version, line.encode("utf-8")
        except (httpx.HTTPError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise RuntimeError(f"watch stream broke: {e}") from e
        return None

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            task = asyncio.get_running_loop().create_task(self._cm.__aexit__(None, None, None))
            task.add_done_callback(lambda t: t.exception())
