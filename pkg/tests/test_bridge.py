"""Bridge routing: envelopes in, completions out, streams that survive drops."""

import asyncio
import json
import time

import pytest

from wasmop.abi import Envelope, EnvelopeKind, Method, decode_envelope, encode_envelope
from wasmop.bridge import (
    InProcessTransport,
    KubeBridge,
    OperationKind,
    PathError,
    parse_request_path,
)
from wasmop.mockapi import bodies
from wasmop.mockapi.store import Gateway, ResourceStore

pytestmark = pytest.mark.anyio

NS_PATH = "/apis/test.dev/v1/namespaces/ns-1/testresources"


class FakeSink:
    def __init__(self):
        self.next_id = 1
        self.registered = []  # (instance_id, op_id, kind)
        self.completions = []  # (instance_id, op_id, Envelope)

    def register_operation(self, instance_id, kind):
        op_id = self.next_id
        self.next_id += 1
        self.registered.append((instance_id, op_id, kind))
        return op_id

    def post_completion(self, instance_id, op_id, payload):
        self.completions.append((instance_id, op_id, decode_envelope(payload)))

    def completions_for(self, op_id):
        return [e for _, oid, e in self.completions if oid == op_id]


def make_rig(**bridge_kwargs):
    store = ResourceStore()
    sink = FakeSink()
    transport = InProcessTransport(Gateway(store), **bridge_kwargs.pop("transport_kwargs", {}))
    bridge = KubeBridge(transport, sink, retry_delay=0.01, **bridge_kwargs)
    return store, sink, bridge

def request_payload(method, path, body=b""):
    return encode_envelope(Envelope.request(method, path, body))


async def settle(seconds=0.05):
    await asyncio.sleep(seconds)


# -- path parsing ----------------------------------------------------------------


def test_parse_collection_and_named_paths():
    parsed = parse_request_path(NS_PATH)
    assert (parsed.namespace, parsed.name, parsed.watch) == ("ns-1", None, False)
    parsed = parse_request_path(NS_PATH + "/obj-a")
    assert parsed.name == "obj-a"
    parsed = parse_request_path(NS_PATH + "?resourceVersion=17")
    assert (parsed.resource_version, parsed.watch) == (17, False)
    parsed = parse_request_path(NS_PATH + "?watch=true&resourceVersion=0")
    assert (parsed.resource_version, parsed.watch) == (0, True)


@pytest.mark.parametrize(
    "path",
    [
        "/apis/other.group/v1/namespaces/ns/testresources",
        "/apis/test.dev/v1/namespaces/ns/otherthings",
        "/apis/test.dev/v1/namespaces/Bad_NS/testresources",
        NS_PATH + "/UPPER",
        NS_PATH + "/a/b",
        NS_PATH + "?resourceVersion=abc",
        NS_PATH + "?watch=yes",
        NS_PATH + "?mystery=1",
        NS_PATH + "?resourceVersion=1&resourceVersion=2",
        NS_PATH + "?",
    ],
)
def test_parse_rejects_malformed_paths(path):
    with pytest.raises(PathError):
        parse_request_path(path)


# -- unary requests ----------------------------------------------------------------


async def test_put_then_get_round_trip():
    store, sink, bridge = make_rig()
    body = b'{"spec":{"nonce":7}}'
    op = bridge.submit("inst", request_payload(Method.PUT, NS_PATH + "/obj-a", body))
    await settle()
    (envelope,) = sink.completions_for(op)
    assert (envelope.kind, envelope.status) == (EnvelopeKind.RESPONSE, 201)
    assert store.get("ns-1", "obj-a").nonce == 7

    op2 = bridge.submit("inst", request_payload(Method.GET, NS_PATH + "/obj-a"))
    await settle()
    (envelope,) = sink.completions_for(op2)
    assert envelope.status == 200
    assert json.loads(envelope.body)["spec"]["nonce"] == 7
    assert op2 != op


async def test_get_collection_lists():
    store, sink, bridge = make_rig()
    store.apply("ns-1", "b", 1)
    store.apply("ns-1", "a", 2)
    op = bridge.submit("inst", request_payload(Method.GET, NS_PATH))
    await settle()
    (envelope,) = sink.completions_for(op)
    doc = json.loads(envelope.body)
    assert [i["metadata"]["name"] for i in doc["items"]] == ["a", "b"]


async def test_delete_round_trip():
    store, sink, bridge = make_rig()
    store.apply("ns-1", "a", 1)
    op = bridge.submit("inst", request_payload(Method.DELETE, NS_PATH + "/a"))
    await settle()
    (envelope,) = sink.completions_for(op)
    assert envelope.status == 200
    assert store.get("ns-1", "a") is None


@pytest.mark.parametrize(
    "payload_maker,needle",
    [
        (lambda: b"\x00garbage", b"undecodable"),
        (lambda: encode_envelope(Envelope.response(200)), b"not a request"),
        (lambda: request_payload(Method.GET, "/definitely/not/an/api/path"), b"unknown path"),
        (lambda: request_payload(Method.PATCH, NS_PATH + "/a"), b"unsupported method"),
        (lambda: request_payload(Method.PUT, NS_PATH), b"requires a resource name"),
        (lambda: request_payload(Method.DELETE, NS_PATH), b"requires a resource name"),
        (lambda: request_payload(Method.POST, NS_PATH + "/a"), b"collection"),
        (
            lambda: request_payload(Method.GET, NS_PATH + "?resourceVersion=3"),
            b"watch query",
        ),
        (lambda: request_payload(Method.WATCH, NS_PATH + "/a?resourceVersion=0"), b"collection"),
        (
            lambda: request_payload(Method.WATCH, NS_PATH + "?resourceVersion=0", b"x"),
            b"takes no body",
        ),
    ],
)
async def test_malformed_submissions_complete_with_400(payload_maker, needle):
    _, sink, bridge = make_rig()
    op = bridge.submit("inst", payload_maker())
    await settle()
    (envelope,) = sink.completions_for(op)
    assert (envelope.kind, envelope.status) == (EnvelopeKind.RESPONSE, 400)
    assert needle in envelope.body
    assert bridge.rejected == 1


async def test_submit_returns_before_slow_transport_completes():
    _, sink, bridge = make_rig(transport_kwargs={"request_delay": 0.2})
    t0 = time.monotonic()
    op = bridge.submit("inst", request_payload(Method.PUT, NS_PATH + "/a", b'{"spec":{"nonce":1}}'))
    submit_elapsed = time.monotonic() - t0
    assert submit_elapsed < 0.05
    assert sink.completions_for(op) == []
    await settle(0.3)
    (envelope,) = sink.completions_for(op)
    assert envelope.status == 201


async def test_transport_exception_becomes_503():
    class BrokenTransport:
        async def request(self, method, namespace, name, body):
            raise ConnectionError("backend gone")

        async def open_watch(self, namespace, since_version):
            raise ConnectionError("backend gone")

    sink = FakeSink()
    bridge = KubeBridge(BrokenTransport(), sink, retry_delay=0.01)
    op = bridge.submit("inst", request_payload(Method.GET, NS_PATH + "/a"))
    await settle()
    (envelope,) = sink.completions_for(op)
    assert envelope.status == 503
    assert b"backend gone" in envelope.body


# -- watch streams ---------------------------------------------------------------


async def test_watch_replays_then_follows_live_events():
    store, sink, bridge = make_rig()
    store.apply("ns-1", "pre-a", 1)
    store.apply("ns-1", "pre-b", 2)
    op = bridge.submit("inst", request_payload(Method.WATCH, NS_PATH + "?resourceVersion=0"))
    assert sink.registered[-1] == ("inst", op, OperationKind.WATCH)
    await settle()
    store.apply("ns-1", "live-c", 3)
    store.apply("ns-2", "other", 4)  # different namespace: invisible
    await settle()
    events = sink.completions_for(op)
    assert [e.kind for e in events] == [EnvelopeKind.WATCH_EVENT] * 3
    names = [json.loads(e.body)["object"]["metadata"]["name"] for e in events]
    assert names == ["pre-a", "pre-b", "live-c"]
    assert bridge.stream_state("inst")[op][1] == 3
    await bridge.drain()


async def test_watch_since_midstream_skips_replay():
    store, sink, bridge = make_rig()
    store.apply("ns-1", "old", 1)
    marker = store.resource_version
    op = bridge.submit(
        "inst", request_payload(Method.WATCH, NS_PATH + f"?resourceVersion={marker}")
    )
    await settle()
    store.apply("ns-1", "new", 2)
    await settle()
    names = [json.loads(e.body)["object"]["metadata"]["name"] for e in sink.completions_for(op)]
    assert names == ["new"]
    await bridge.drain()


async def test_watch_resumes_from_last_version_across_drops():
    store, sink, bridge = make_rig()
    inner = bridge._transport

    class DroppyTransport:
        """Serves one event per connection, then hangs up."""

        async def request(self, *a):
            return await inner.request(*a)

        async def open_watch(self, namespace, since_version):
            channel = await inner.open_watch(namespace, since_version)
            return _OneShot(channel)

    class _OneShot:
        def __init__(self, channel):
            self.channel = channel
            self.served = 0

        async def get(self):
            if self.served:
                return None
            self.served = 1
            return await self.channel.get()

        def close(self):
            self.channel.close()

    bridge._transport = DroppyTransport()
    store.apply("ns-1", "a", 10)
    store.apply("ns-1", "b", 20)
    store.apply("ns-1", "c", 30)
    op = bridge.submit("inst", request_payload(Method.WATCH, NS_PATH + "?resourceVersion=0"))
    await settle(0.3)
    # Each event needed its own connection; resume from last_version keeps the
    # sequence gap-free and duplicate-free.
    events = sink.completions_for(op)
    assert [e.kind for e in events] == [EnvelopeKind.WATCH_EVENT] * 3
    names = [json.loads(e.body)["object"]["metadata"]["name"] for e in events]
    assert names == ["a", "b", "c"]
    store.apply("ns-1", "d", 40)
    await settle(0.2)
    assert len(sink.completions_for(op)) == 4
    await bridge.drain()


async def test_watch_gives_up_after_empty_connections():
    class EmptyCloseTransport:
        def __init__(self):
            self.connections = 0

        async def request(self, *a):
            raise AssertionError("not used")

        async def open_watch(self, namespace, since_version):
            self.connections += 1
            return self

        async def get(self):
            return None

        def close(self):
            pass

    transport = EmptyCloseTransport()
    sink = FakeSink()
    bridge = KubeBridge(transport, sink, retry_delay=0.01, max_stream_failures=3)
    op = bridge.submit("inst", request_payload(Method.WATCH, NS_PATH + "?resourceVersion=0"))
    await settle(0.2)
    (envelope,) = sink.completions_for(op)
    assert envelope.kind == EnvelopeKind.STREAM_CLOSED
    assert transport.connections == 3
    assert bridge.stream_state("inst") == {}


async def test_watch_gives_up_after_consecutive_connect_failures():
    class DeadTransport:
        def __init__(self):
            self.attempts = 0

        async def request(self, *a):
            raise AssertionError("not used")

        async def open_watch(self, namespace, since_version):
            self.attempts += 1
            raise ConnectionError("no backend")

    transport = DeadTransport()
    sink = FakeSink()
    bridge = KubeBridge(transport, sink, retry_delay=0.01, max_stream_failures=3)
    op = bridge.submit("inst", request_payload(Method.WATCH, NS_PATH + "?resourceVersion=0"))
    await settle(0.2)
    (envelope,) = sink.completions_for(op)
    assert envelope.kind == EnvelopeKind.STREAM_CLOSED
    assert transport.attempts == 3


async def test_cancel_streams_is_silent_and_scoped():
    store, sink, bridge = make_rig()
    op_a = bridge.submit("inst-a", request_payload(Method.WATCH, NS_PATH + "?resourceVersion=0"))
    op_b = bridge.submit("inst-a", request_payload(Method.WATCH, NS_PATH + "?resourceVersion=0"))
    op_c = bridge.submit("inst-b", request_payload(Method.WATCH, NS_PATH + "?resourceVersion=0"))
    await settle()
    assert bridge.cancel_streams("inst-a") == 2
    await settle()
    store.apply("ns-1", "after", 1)
    await settle()
    assert sink.completions_for(op_a) == []
    assert sink.completions_for(op_b) == []
    live = [e for e in sink.completions_for(op_c) if e.kind == EnvelopeKind.WATCH_EVENT]
    assert len(live) == 1
    assert bridge.cancel_streams("inst-b") == 1
    assert bridge.cancel_streams("inst-b") == 0


async def test_reopen_stream_resumes_for_preassigned_id():
    store, sink, bridge = make_rig()
    store.apply("ns-1", "old", 5)
    marker = store.resource_version
    op = sink.register_operation("inst", OperationKind.WATCH)
    bridge.reopen_stream("inst", op, "ns-1", marker)
    await settle()
    store.apply("ns-1", "fresh", 6)
    await settle()
    names = [json.loads(e.body)["object"]["metadata"]["name"] for e in sink.completions_for(op)]
    assert names == ["fresh"]
    await bridge.drain()


async def test_drain_tears_down_without_stream_closed():
    store, sink, bridge = make_rig()
    op = bridge.submit("inst", request_payload(Method.WATCH, NS_PATH + "?resourceVersion=0"))
    await settle()
    await bridge.drain()
    assert bridge.stream_state("inst") == {}
    assert all(e.kind != EnvelopeKind.STREAM_CLOSED for e in sink.completions_for(op))


async def test_operation_ids_are_distinct_and_every_submit_completes():
    store, sink, bridge = make_rig()
    ops = [
        bridge.submit("inst", request_payload(Method.PUT, NS_PATH + f"/r-{i}", b'{"spec":{"nonce":1}}'))
        for i in range(10)
    ]
    ops.append(bridge.submit("inst", b"junk"))
    await settle()
    assert len(set(ops)) == len(ops)
    for op in ops:
        assert len(sink.completions_for(op)) == 1
