"""Envelope codec: frozen wire examples, round-trips, and rejection rules."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wasmop.abi import (
    DEFAULT_MAX_PATH_LEN,
    DecodingError,
    EncodingError,
    Envelope,
    EnvelopeKind,
    Method,
    decode_envelope,
    encode_envelope,
)

# Known-good frames, written out byte by byte.
GET_A = bytes(
    [0x01, 0x01, 0x01, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00, 0x2F, 0x61, 0x00, 0x00, 0x00, 0x00]
)
OK_RESPONSE = bytes(
    [0x01, 0x02, 0x00, 0xC8, 0x00, 0x00, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00, 0x6F, 0x6B]
)


def test_encode_get_request_example():
    e = Envelope.request(Method.GET, "/a")
    assert encode_envelope(e) == GET_A


def test_encode_ok_response_example():
    e = Envelope.response(200, b"ok")
    assert encode_envelope(e) == OK_RESPONSE


def test_decode_examples():
    e = decode_envelope(GET_A)
    assert (e.kind, e.method, e.status, e.path, e.body) == (
        EnvelopeKind.REQUEST,
        Method.GET,
        0,
        "/a",
        b"",
    )
    e = decode_envelope(OK_RESPONSE)
    assert (e.kind, e.method, e.status, e.path, e.body) == (
        EnvelopeKind.RESPONSE,
        Method.NONE,
        200,
        "",
        b"ok",
    )


def _random_envelope(rng: random.Random) -> Envelope:
    kind = rng.choice(list(EnvelopeKind))
    if kind == EnvelopeKind.REQUEST:
        method = rng.choice([m for m in Method if m != Method.NONE])
        status = 0
    else:
        method = Method.NONE
        status = rng.randrange(0, 0x10000)
    path = "".join(rng.choice("abz019/-._~%") for _ in range(rng.randrange(0, 64)))
    body = rng.randbytes(rng.randrange(0, 256))
    return Envelope(kind=kind, method=method, status=status, path=path, body=body)


def test_round_trip_seeded_2000():
    rng = random.Random(0xE17)
    for _ in range(2000):
        e = _random_envelope(rng)
        assert decode_envelope(encode_envelope(e)) == e


@settings(max_examples=200)
@given(
    kind=st.sampled_from(list(EnvelopeKind)),
    status=st.integers(0, 0xFFFF),
    method=st.sampled_from(list(Method)),
    path=st.text(max_size=100),
    body=st.binary(max_size=300),
)
def test_round_trip_hypothesis(kind, status, method, path, body):
    if kind == EnvelopeKind.REQUEST:
        status = 0
        if method == Method.NONE:
            method = Method.GET
    else:
        method = Method.NONE
    e = Envelope(kind=kind, method=method, status=status, path=path, body=body)
    assert decode_envelope(encode_envelope(e)) == e


def test_encode_rejects_oversized_path():
    e = Envelope.request(Method.GET, "a" * (DEFAULT_MAX_PATH_LEN + 1))
    with pytest.raises(EncodingError) as ei:
        encode_envelope(e)
    assert ei.value.violation == "path_too_long"


def test_encode_rejects_oversized_body_with_custom_limit():
    e = Envelope.response(200, b"x" * 11)
    with pytest.raises(EncodingError) as ei:
        encode_envelope(e, max_body_len=10)
    assert ei.value.violation == "body_too_long"


def test_encode_rejects_inconsistent_shapes():
    with pytest.raises(EncodingError) as ei:
        encode_envelope(Envelope(EnvelopeKind.REQUEST, method=Method.GET, status=404))
    assert ei.value.violation == "status_nonzero_for_request"
    with pytest.raises(EncodingError) as ei:
        encode_envelope(Envelope(EnvelopeKind.RESPONSE, method=Method.GET, status=200))
    assert ei.value.violation == "method_set_for_non_request"
    with pytest.raises(EncodingError) as ei:
        encode_envelope(Envelope(EnvelopeKind.RESPONSE, status=200, version=2))
    assert ei.value.violation == "bad_version"


@pytest.mark.parametrize(
    "mutate,violation",
    [
        (lambda b: b[:0], "too_short"),
        (lambda b: b[:12], "too_short"),
        (lambda b: b[:14], "length_mismatch"),
        (lambda b: b + b"\x00", "length_mismatch"),
        (lambda b: bytes([2]) + b[1:], "bad_version"),
        (lambda b: b[:1] + bytes([0]) + b[2:], "bad_kind"),
        (lambda b: b[:1] + bytes([5]) + b[2:], "bad_kind"),
        (lambda b: b[:2] + bytes([7]) + b[3:], "bad_method"),
        # GET_A is a Request; setting a status byte breaks the Request rule.
        (lambda b: b[:3] + bytes([1]) + b[4:], "status_nonzero_for_request"),
        # Declared path length beyond the frame.
        (lambda b: b[:5] + (1 << 16).to_bytes(4, "little") + b[9:], "length_mismatch"),
    ],
)
def test_decode_rejects_mutations(mutate, violation):
    with pytest.raises(DecodingError) as ei:
        decode_envelope(mutate(bytearray(GET_A)))
    assert ei.value.violation == violation


def test_decode_rejects_method_on_response():
    bad = bytearray(OK_RESPONSE)
    bad[2] = 1  # GET on a Response
    with pytest.raises(DecodingError) as ei:
        decode_envelope(bytes(bad))
    assert ei.value.violation == "method_set_for_non_request"


def test_decode_rejects_non_utf8_path():
    e = encode_envelope(Envelope.request(Method.GET, "/ab"))
    bad = bytearray(e)
    bad[9] = 0xFF
    with pytest.raises(DecodingError) as ei:
        decode_envelope(bytes(bad))
    assert ei.value.violation == "path_not_utf8"


def test_decode_rejects_declared_body_over_limit():
    # Header claims a 17 MiB body; decoder must refuse before trying to slice it.
    e = bytearray(encode_envelope(Envelope.response(200, b"xx")))
    e[9 + 0 : 13 + 0] = (17 << 20).to_bytes(4, "little")
    with pytest.raises(DecodingError) as ei:
        decode_envelope(bytes(e))
    assert ei.value.violation == "body_too_long"
