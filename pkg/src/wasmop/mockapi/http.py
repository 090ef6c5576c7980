"""HTTP facade for the mock resource API server.

Exposes the versioned store over the same paths the request bridge
speaks, so remote hosts can reconcile against this process exactly as
they would against a real apiserver:

    GET    /apis/test.dev/v1/namespaces/{ns}/testresources
    GET    /apis/test.dev/v1/namespaces/{ns}/testresources?watch=true&resourceVersion=N
    POST   /apis/test.dev/v1/namespaces/{ns}/testresources
    GET    /apis/test.dev/v1/namespaces/{ns}/testresources/{name}
    PUT    /apis/test.dev/v1/namespaces/{ns}/testresources/{name}
    DELETE /apis/test.dev/v1/namespaces/{ns}/testresources/{name}

Unary responses carry the canonical JSON bodies produced by the
gateway, byte for byte.  Watches stream newline-delimited JSON event
frames (``{"type": ..., "object": {...}}``) and stay open until the
client disconnects or the watcher falls too far behind and is dropped.
"""

from __future__ import annotations

from collections.abc import AsyncIterator

from fastapi import APIRouter, FastAPI, Request, Response
from fastapi.responses import StreamingResponse

from . import bodies
from .store import AsyncWatch, Gateway, ResourceStore

__all__ = ["create_app", "create_router"]

_JSON = "application/json"

COLLECTION = f"/apis/{bodies.API_VERSION}/namespaces/{{namespace}}/{bodies.PLURAL}"
ITEM = COLLECTION + "/{name}"


def _reply(result: tuple[int, bytes]) -> Response:
    status, body = result
    return Response(content=body, status_code=status, media_type=_JSON)


def _bad_request(message: str) -> Response:
    return _reply((400, bodies.status_body(400, "BadRequest", message)))


def _parse_watch_query(params) -> tuple[bool, int] | Response:
    """Validate the collection-GET query string: only ``watch`` and
    ``resourceVersion`` are understood, mirroring the bridge's parser."""
    watch = False
    since = 0
    for key in params.keys():
        if len(params.getlist(key)) > 1:
            return _bad_request(f"duplicate query parameter: {key}")
        value = params[key]
        if key == "watch":
            if value != "true":
                return _bad_request("watch parameter must be exactly 'true'")
            watch = True
        elif key == "resourceVersion":
            if not value.isdigit():
                return _bad_request("resourceVersion must be a non-negative integer")
            since = int(value)
        else:
            return _bad_request(f"unknown query parameter: {key}")
    return watch, since


async def _event_lines(store: ResourceStore, namespace: str, since: int) -> AsyncIterator[bytes]:
    """Yield one JSON event frame per line: replayed history first, then
    live events, ending only on client disconnect or watcher overflow.

    Client disconnects surface as cancellation of this generator (the
    streaming response races a disconnect listener against it), so the
    watch is unhooked in ``finally`` rather than by polling the request.
    """
    watch = AsyncWatch(store, namespace, since)
    try:
        while True:
            event = await watch.get()
            if event is None:
                return
            yield event.body() + b"\n"
    finally:
        watch.close()


def create_router(store: ResourceStore) -> APIRouter:
    gateway = Gateway(store)
    router = APIRouter()

    @router.get(COLLECTION)
    async def list_or_watch(namespace: str, request: Request) -> Response:
        parsed = _parse_watch_query(request.query_params)
        if isinstance(parsed, Response):
            return parsed
        watch, since = parsed
        if not watch:
            return _reply(gateway.list(namespace))
        return StreamingResponse(
            _event_lines(store, namespace, since),
            media_type=_JSON,
        )

    @router.post(COLLECTION)
    async def create(namespace: str, request: Request) -> Response:
        return _reply(gateway.post(namespace, await request.body()))

    @router.get(ITEM)
    async def read(namespace: str, name: str) -> Response:
        return _reply(gateway.get(namespace, name))

    @router.put(ITEM)
    async def replace(namespace: str, name: str, request: Request) -> Response:
        return _reply(gateway.put(namespace, name, await request.body()))

    @router.delete(ITEM)
    async def remove(namespace: str, name: str) -> Response:
        return _reply(gateway.delete(namespace, name))

    return router


def create_app(store: ResourceStore) -> FastAPI:
    """A standalone ASGI app serving only the resource API."""
    app = FastAPI(title="mock resource apiserver", docs_url=None, redoc_url=None)
    app.include_router(create_router(store))
    return app
