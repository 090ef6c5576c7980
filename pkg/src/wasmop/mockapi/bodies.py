"""Canonical JSON bodies for the mock resource API.

Every body is compact (no whitespace) with a fixed key order, so guests can
scan fields with byte needles and golden tests can compare bytes. The shapes
follow the usual declarative-API conventions: resources carry apiVersion,
kind, metadata (namespace, name, resourceVersion-as-string), and a spec
holding a single integer `nonce`; errors are Status documents.
"""

from __future__ import annotations

import json
import re
from typing import Any

API_GROUP = "test.dev"
API_VERSION = "test.dev/v1"
KIND = "TestResource"
LIST_KIND = "TestResourceList"
PLURAL = "testresources"

#: Namespaces and resource names share the DNS-label shape.
NAME_RE = re.compile(r"^[a-z0-9-]{1,63}$")

MAX_NONCE = 2**63 - 1  # fits signed and unsigned 64-bit readers alike


def _dump(doc: dict[str, Any]) -> bytes:
    return json.dumps(doc, separators=(",", ":")).encode()


def resource_doc(namespace: str, name: str, resource_version: int, nonce: int) -> dict:
    return {
        "apiVersion": API_VERSION,
        "kind": KIND,
        "metadata": {
            "namespace": namespace,
            "name": name,
            "resourceVersion": str(resource_version),
        },
        "spec": {"nonce": nonce},
    }


def resource_body(namespace: str, name: str, resource_version: int, nonce: int) -> bytes:
    return _dump(resource_doc(namespace, name, resource_version, nonce))


def event_body(event_type: str, object_doc: dict) -> bytes:
    return _dump({"type": event_type, "object": object_doc})


def list_body(items: list[dict], resource_version: int) -> bytes:
    return _dump(
        {
            "apiVersion": API_VERSION,
            "kind": LIST_KIND,
            "metadata": {"resourceVersion": str(resource_version)},
            "items": items,
        }
    )


def status_body(code: int, reason: str, message: str) -> bytes:
    return _dump(
        {
            "kind": "Status",
            "apiVersion": "v1",
            "status": "Success" if code < 400 else "Failure",
            "code": code,
            "reason": reason,
            "message": message,
        }
    )


def parse_nonce(body: bytes) -> int:
    """Extract spec.nonce from a request body; raises ValueError otherwise.

    Accepts both the minimal `{"spec":{"nonce":N}}` form guests send and a
    full resource document.
    """
    try:
        doc = json.loads(body)
    except (ValueError, UnicodeDecodeError):
        raise ValueError("body is not valid JSON") from None
    if not isinstance(doc, dict):
        raise ValueError("body is not a JSON object")
    spec = doc.get("spec")
    if not isinstance(spec, dict) or "nonce" not in spec:
        raise ValueError("body lacks spec.nonce")
    nonce = spec["nonce"]
    if not isinstance(nonce, int) or isinstance(nonce, bool):
        raise ValueError("spec.nonce is not an integer")
    if not 0 <= nonce <= MAX_NONCE:
        raise ValueError(f"spec.nonce out of range: {nonce}")
    return nonce


def parse_metadata_name(body: bytes) -> str:
    """Extract metadata.name from a creation body; raises ValueError."""
    try:
        doc = json.loads(body)
    except (ValueError, UnicodeDecodeError):
        raise ValueError("body is not valid JSON") from None
    if not isinstance(doc, dict):
        raise ValueError("body is not a JSON object")
    meta = doc.get("metadata")
    if not isinstance(meta, dict) or not isinstance(meta.get("name"), str):
        raise ValueError("body lacks metadata.name")
    return meta["name"]
