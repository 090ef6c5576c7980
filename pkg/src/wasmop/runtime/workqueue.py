"""Per-instance delivery queue with level-triggered coalescing.

Completions for a loaded instance are delivered in arrival order.  While an
instance is unloaded its watch streams keep running, so watch events are
coalesced per resource: reconciliation is level-triggered, and an instance
that wakes up only needs the latest observed state of each object, not every
intermediate version.  Responses and stream terminations are never coalesced —
each one settles exactly one pending operation.

The coalesced side is bounded: past `cap` distinct resources the oldest entry
is dropped (and counted), which keeps a long-dormant instance's backlog to one
event per object up to the cap instead of growing with event volume.
"""

from __future__ import annotations

from collections import OrderedDict, deque

DEFAULT_COALESCE_CAP = 1024


class DeliveryQueue:
    """FIFO of (op_id, payload) with an optional coalescing side table."""

    __slots__ = ("_fifo", "_coalesced", "cap", "dropped", "coalesced_hits")

    def __init__(self, cap: int = DEFAULT_COALESCE_CAP) -> None:
        self._fifo: deque[tuple[int, bytes]] = deque()
        self._coalesced: OrderedDict[tuple, tuple[int, bytes]] = OrderedDict()
        self.cap = cap
        self.dropped = 0
        self.coalesced_hits = 0

    def push(self, op_id: int, payload: bytes, coalesce_key: tuple | None = None) -> None:
        if coalesce_key is None:
            self._fifo.append((op_id, payload))
            return
        key = (op_id, *coalesce_key)
        if key in self._coalesced:
            self.coalesced_hits += 1
            self._coalesced[key] = (op_id, payload)  # latest state wins, position kept
            return
        if len(self._coalesced) >= self.cap:
            self._coalesced.popitem(last=False)
            self.dropped += 1
        self._coalesced[key] = (op_id, payload)

    def pop(self) -> tuple[int, bytes] | None:
        if self._fifo:
            return self._fifo.popleft()
        if self._coalesced:
            _, item = self._coalesced.popitem(last=False)
            return item
        return None

    def discard_op(self, op_id: int) -> int:
        """Remove every queued delivery for one operation; returns how many."""
        before = len(self)
        self._fifo = deque(item for item in self._fifo if item[0] != op_id)
        for key in [k for k in self._coalesced if k[0] == op_id]:
            del self._coalesced[key]
        return before - len(self)

    def clear(self) -> None:
        self._fifo.clear()
        self._coalesced.clear()

    def __len__(self) -> int:
        return len(self._fifo) + len(self._coalesced)

    def __bool__(self) -> bool:
        return bool(self._fifo) or bool(self._coalesced)
