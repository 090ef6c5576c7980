"""The no-isolation baseline: the same relay reconciliation the wasm guest
performs, written as plain in-process async tasks with no engine between
the logic and the transport."""

from __future__ import annotations

import asyncio
import json

from wasmop.bridge import Transport

__all__ = ["NativeOperator"]


class NativeOperator:
    """Watches ``source`` and mirrors each resource's nonce into ``dest``.

    ``ballast_bytes`` of heap are allocated and touched up front, mirroring
    the guest's configured heap footprint so memory comparisons across
    variants measure isolation cost, not workload asymmetry.
    """

    def __init__(
        self, transport: Transport, source: str, dest: str, ballast_bytes: int = 0
    ) -> None:
        self.transport = transport
        self.source = source
        self.dest = dest
        self.applied = 0
        self.ready = asyncio.Event()
        self._ballast = bytearray(ballast_bytes)
        for offset in range(0, ballast_bytes, 4096):
            self._ballast[offset] = 1
        self._task: asyncio.Task | None = None

    def start(self) -> None:
        self._task = asyncio.get_running_loop().create_task(self._run())

    async def _run(self) -> None:
        last_version = 0
        while True:
            channel = await self.transport.open_watch(self.source, last_version)
            self.ready.set()
            try:
                while True:
                    item = await channel.get()
                    if item is None:
                        break
                    version, frame = item
                    last_version = max(last_version, version)
                    await self._reconcile(frame)
            finally:
                channel.close()

    async def _reconcile(self, frame: bytes) -> None:
        event = json.loads(frame)
        if event.get("type") not in ("ADDED", "MODIFIED"):
            return
        resource = event["object"]
        name = resource["metadata"]["name"]
        nonce = resource["spec"]["nonce"]
        body = json.dumps({"spec": {"nonce": nonce}}, separators=(",", ":")).encode()
        status, _ = await self.transport.request("PUT", self.dest, name, body)
        if status not in (200, 201):
            raise RuntimeError(f"apply to {self.dest}/{name} failed with status {status}")
        self.applied += 1

    def failure(self) -> BaseException | None:
        """The exception that killed this operator's task, if any."""
        if self._task is None or not self._task.done() or self._task.cancelled():
            return None
        return self._task.exception()

    async def stop(self) -> None:
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass
            self._task = None
