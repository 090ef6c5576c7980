"""HTTP facade for the mock apiserver: unary round trips, NDJSON watch
streaming against a live local server, and the remote transport stack."""

import asyncio
import json
import threading
import time

import httpx
import pytest
import uvicorn

from wasmop.bridge import RemoteHttpTransport
from wasmop.guest import programs
from wasmop.mockapi import bodies
from wasmop.mockapi.http import create_app
from wasmop.mockapi.store import Gateway, ResourceStore
from wasmop.runtime import ControllerHost, ModuleCache

pytestmark = pytest.mark.anyio

NS = "ns-1"
COLLECTION = f"/apis/test.dev/v1/namespaces/{NS}/testresources"


def nonce_body(nonce):
    return json.dumps({"spec": {"nonce": nonce}}).encode()


def asgi_client(store):
    transport = httpx.ASGITransport(app=create_app(store))
    return httpx.AsyncClient(transport=transport, base_url="http://mock")


# -- unary endpoints (in-process ASGI) ----------------------------------------------


async def test_put_creates_then_replaces():
    store = ResourceStore()
    async with asgi_client(store) as client:
        created = await client.put(f"{COLLECTION}/alpha", content=nonce_body(1))
        assert created.status_code == 201
        assert created.headers["content-type"] == "application/json"
        assert created.content == bodies.resource_body(NS, "alpha", 1, 1)

        replaced = await client.put(f"{COLLECTION}/alpha", content=nonce_body(2))
        assert replaced.status_code == 200
        assert replaced.content == bodies.resource_body(NS, "alpha", 2, 2)


async def test_get_absent_then_present():
    store = ResourceStore()
    async with asgi_client(store) as client:
        missing = await client.get(f"{COLLECTION}/alpha")
        assert missing.status_code == 404
        doc = missing.json()
        assert doc["kind"] == "Status" and doc["reason"] == "NotFound"

        await client.put(f"{COLLECTION}/alpha", content=nonce_body(9))
        found = await client.get(f"{COLLECTION}/alpha")
        assert found.status_code == 200
        assert found.content == bodies.resource_body(NS, "alpha", 1, 9)


async def test_post_creates_then_conflicts():
    store = ResourceStore()
    doc = json.dumps(
        {"metadata": {"name": "beta"}, "spec": {"nonce": 4}}
    ).encode()
    async with asgi_client(store) as client:
        created = await client.post(COLLECTION, content=doc)
        assert created.status_code == 201
        duplicate = await client.post(COLLECTION, content=doc)
        assert duplicate.status_code == 409
        assert duplicate.json()["reason"] == "AlreadyExists"


async def test_delete_then_absent():
    store = ResourceStore()
    async with asgi_client(store) as client:
        await client.put(f"{COLLECTION}/alpha", content=nonce_body(1))
        gone = await client.delete(f"{COLLECTION}/alpha")
        assert gone.status_code == 200
        again = await client.delete(f"{COLLECTION}/alpha")
        assert again.status_code == 404


async def test_list_matches_gateway_bytes():
    store = ResourceStore()
    gateway = Gateway(store)
    store.apply(NS, "b", 2)
    store.apply(NS, "a", 1)
    store.apply("ns-other", "c", 3)
    async with asgi_client(store) as client:
        listing = await client.get(COLLECTION)
        assert listing.status_code == 200
        assert listing.content == gateway.list(NS)[1]
        doc = listing.json()
        assert [item["metadata"]["name"] for item in doc["items"]] == ["a", "b"]


async def test_undecodable_body_rejected():
    store = ResourceStore()
    async with asgi_client(store) as client:
        response = await client.put(f"{COLLECTION}/alpha", content=b"not json")
        assert response.status_code == 400
        assert response.json()["reason"] == "BadRequest"


@pytest.mark.parametrize(
    "query",
    [
        "watch=yes",
        "watch=true&watch=true",
        "resourceVersion=abc",
        "resourceVersion=-1",
        "limit=10",
    ],
)
async def test_malformed_queries_rejected(query):
    store = ResourceStore()
    async with asgi_client(store) as client:
        response = await client.get(f"{COLLECTION}?{query}")
        assert response.status_code == 400
        assert response.json()["reason"] == "BadRequest"


async def test_resource_version_without_watch_is_accepted():
    store = ResourceStore()
    store.apply(NS, "a", 1)
    async with asgi_client(store) as client:
        response = await client.get(f"{COLLECTION}?resourceVersion=0")
        assert response.status_code == 200
        assert len(response.json()["items"]) == 1


# -- live server (real sockets, needed for streaming) -------------------------------


class ServerThread:
    """uvicorn on an ephemeral port in a daemon thread."""

    def __init__(self, app):
        self.server = uvicorn.Server(
            uvicorn.Config(app, host="127.0.0.1", port=0, log_level="warning", lifespan="off")
        )
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    def start(self) -> str:
        self.thread.start()
        deadline = time.monotonic() + 10
        while not self.server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("server failed to start")
            time.sleep(0.01)
        port = self.server.servers[0].sockets[0].getsockname()[1]
        return f"http://127.0.0.1:{port}"

    def stop(self) -> None:
        self.server.should_exit = True
        self.thread.join(timeout=10)


@pytest.fixture()
def live_server():
    store = ResourceStore()
    server = ServerThread(create_app(store))
    base_url = server.start()
    yield store, base_url
    server.stop()


async def read_line(lines, timeout=5.0):
    return json.loads(await asyncio.wait_for(lines.__anext__(), timeout))


async def test_watch_streams_replay_then_live(live_server):
    store, base_url = live_server
    store.apply(NS, "a", 1)
    store.apply(NS, "b", 2)
    store.apply("ns-other", "x", 99)

    async with httpx.AsyncClient(base_url=base_url) as client:
        async with client.stream(
            "GET", f"{COLLECTION}?watch=true&resourceVersion=0",
            timeout=httpx.Timeout(5.0, read=None),
        ) as response:
            assert response.status_code == 200
            assert response.headers["content-type"].startswith("application/json")
            lines = response.aiter_lines()

            first = await read_line(lines)
            second = await read_line(lines)
            assert [e["object"]["metadata"]["name"] for e in (first, second)] == ["a", "b"]
            assert [e["type"] for e in (first, second)] == ["ADDED", "ADDED"]

            store.apply(NS, "a", 10)
            live = await read_line(lines)
            assert live["type"] == "MODIFIED"
            assert live["object"]["spec"]["nonce"] == 10
            versions = [
                int(e["object"]["metadata"]["resourceVersion"])
                for e in (first, second, live)
            ]
            assert versions == sorted(versions) and len(set(versions)) == 3


async def test_watch_unknown_namespace_is_empty_but_live(live_server):
    store, base_url = live_server
    store.apply("ns-busy", "noise", 1)
    async with httpx.AsyncClient(base_url=base_url) as client:
        path = "/apis/test.dev/v1/namespaces/ns-quiet/testresources"
        async with client.stream(
            "GET", f"{path}?watch=true&resourceVersion=0",
            timeout=httpx.Timeout(5.0, read=None),
        ) as response:
            assert response.status_code == 200
            lines = response.aiter_lines()
            # Nothing to replay and other-namespace noise is invisible, so
            # the first frame must be the apply issued after the watch opened.
            opened = time.monotonic()
            asyncio.get_running_loop().call_later(
                0.25, store.apply, "ns-quiet", "late", 1
            )
            event = await read_line(lines)
            assert time.monotonic() - opened >= 0.2
            assert event["object"]["metadata"]["name"] == "late"


async def test_watch_since_version_skips_history(live_server):
    store, base_url = live_server
    store.apply(NS, "a", 1)
    store.apply(NS, "b", 2)
    cutoff = store.resource_version
    store.apply(NS, "c", 3)

    async with httpx.AsyncClient(base_url=base_url) as client:
        async with client.stream(
            "GET", f"{COLLECTION}?watch=true&resourceVersion={cutoff}",
            timeout=httpx.Timeout(5.0, read=None),
        ) as response:
            lines = response.aiter_lines()
            event = await read_line(lines)
            assert event["object"]["metadata"]["name"] == "c"


# -- remote transport over the live server ------------------------------------------


async def test_remote_transport_unary_round_trip(live_server):
    store, base_url = live_server
    transport = RemoteHttpTransport(base_url)
    try:
        status, body = await transport.request("PUT", NS, "alpha", nonce_body(7))
        assert (status, body) == (201, bodies.resource_body(NS, "alpha", 1, 7))

        status, body = await transport.request("GET", NS, "alpha", b"")
        assert status == 200

        status, _ = await transport.request("GET", NS, "missing", b"")
        assert status == 404

        status, _ = await transport.request("DELETE", NS, "alpha", b"")
        assert status == 200
        assert store.get(NS, "alpha") is None
    finally:
        await transport.aclose()


async def test_remote_transport_watch_channel(live_server):
    store, base_url = live_server
    store.apply(NS, "a", 1)
    store.apply(NS, "b", 2)
    transport = RemoteHttpTransport(base_url)
    try:
        channel = await transport.open_watch(NS, 0)
        try:
            v1, raw1 = await asyncio.wait_for(channel.get(), 5)
            v2, raw2 = await asyncio.wait_for(channel.get(), 5)
            assert (v1, v2) == (1, 2)
            assert json.loads(raw1)["object"]["metadata"]["name"] == "a"

            store.apply(NS, "c", 3)
            v3, raw3 = await asyncio.wait_for(channel.get(), 5)
            assert v3 == 3
            assert json.loads(raw3)["type"] == "ADDED"
        finally:
            channel.close()
        assert await channel.get() is None
    finally:
        await transport.aclose()


async def test_remote_transport_retries_transport_errors():
    calls = []

    def explode(request):
        calls.append(request.url.path)
        raise httpx.ConnectError("refused", request=request)

    transport = RemoteHttpTransport(
        "http://unreachable",
        client_factory=lambda: httpx.AsyncClient(
            transport=httpx.MockTransport(explode), base_url="http://unreachable"
        ),
        attempts=3,
        retry_delay=0.01,
    )
    try:
        with pytest.raises(httpx.ConnectError):
            await transport.request("GET", NS, "alpha", b"")
        assert len(calls) == 3
    finally:
        await transport.aclose()


async def test_controller_reconciles_over_http(live_server, tmp_path):
    """Full remote stack: guest -> bridge -> HTTP -> server store and back."""
    store, base_url = live_server
    transport = RemoteHttpTransport(base_url)
    cache = ModuleCache(tmp_path / "cache")
    host = ControllerHost(
        transport,
        cache=cache,
        snapshot_dir=tmp_path / "snapshots",
        bridge_retry_delay=0.01,
    )
    try:
        digest = host.load_module(programs.synthetic_operator())
        config = json.dumps(
            {"source": NS, "dest": "ns-2", "ballast_bytes": 0},
            separators=(",", ":"),
        ).encode()
        host.spawn(digest, config)

        store.apply(NS, "probe", 5)
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline:
            await host.settle(0.1)
            mirrored = store.get("ns-2", "probe")
            if mirrored is not None and mirrored.nonce == 5:
                break
            await asyncio.sleep(0.01)
        mirrored = store.get("ns-2", "probe")
        assert mirrored is not None and mirrored.nonce == 5
    finally:
        await host.shutdown()
        await transport.aclose()
