"""HTTP control plane for a controller host.

A single FastAPI app exposes two surfaces:

* ``/v1/...`` — runtime management: upload modules, spawn/inspect/unload/
  destroy instances, read guest logs and host metrics.
* ``/apis/...`` — the mock resource API (mounted when the host reconciles
  against an in-process store), so guests and external clients observe the
  same objects.

The app owns a background pump task that drives guest turns for as long as
the server runs; request handlers only mutate host state and return, they
never run guest code inline.
"""

from __future__ import annotations

import asyncio
import contextlib
import json

from fastapi import FastAPI, HTTPException, Request

from ..mockapi.http import create_router
from ..mockapi.store import ResourceStore
from ..runtime.cache import AbiError
from ..runtime.host import ControllerHost, HostError, UnknownInstance, UnknownModule
from ..wasm import ENGINE_VERSION
from . import models

__all__ = ["ServiceState", "create_app"]


class ServiceState:
    """Everything the request handlers share.

    ``owns_pump`` decides whether the app lifespan runs the turn pump; an
    embedding caller (the CLI's run loop) that pumps the host itself passes
    False so there is exactly one driver.
    """

    def __init__(
        self,
        host: ControllerHost,
        *,
        store: ResourceStore | None = None,
        owns_pump: bool = True,
    ) -> None:
        self.host = host
        self.store = store
        self.owns_pump = owns_pump
        self.modules: set[str] = set()
        self._pump_task: asyncio.Task | None = None

    async def start(self) -> None:
        if self.owns_pump and self._pump_task is None:
            self._pump_task = asyncio.create_task(self._pump_forever())

    async def stop(self) -> None:
        if self._pump_task is not None:
            self._pump_task.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await self._pump_task
            self._pump_task = None
        if self.owns_pump:
            await self.host.shutdown()

    async def _pump_forever(self) -> None:
        while True:
            await self.host.pump(deadline=0.5)
            # pump returns immediately when no instance is live; don't spin.
            await asyncio.sleep(0.05)


def _status(state: ServiceState, iid: str) -> dict:
    try:
        return state.host.status(iid)
    except UnknownInstance:
        raise HTTPException(status_code=404, detail=f"no instance {iid}") from None


def create_app(state: ServiceState) -> FastAPI:
    @contextlib.asynccontextmanager
    async def lifespan(app: FastAPI):
        await state.start()
        try:
            yield
        finally:
            await state.stop()

    app = FastAPI(title="wasmop runtime", lifespan=lifespan, docs_url=None, redoc_url=None)

    @app.get("/healthz", response_model=models.HealthResponse)
    async def healthz() -> models.HealthResponse:
        return models.HealthResponse(
            status="ok",
            engine=ENGINE_VERSION,
            instances=len(state.host.instances()),
        )

    @app.post("/v1/modules", response_model=models.ModuleResponse)
    async def upload_module(request: Request) -> models.ModuleResponse:
        blob = await request.body()
        try:
            digest = state.host.load_module(blob)
        except AbiError as e:
            raise HTTPException(
                status_code=422,
                detail={"symbol": e.symbol, "message": str(e)},
            ) from None
        except ValueError as e:  # parse and validation failures
            raise HTTPException(
                status_code=422,
                detail={"symbol": "<module>", "message": f"invalid module: {e}"},
            ) from None
        cached = digest in state.modules
        state.modules.add(digest)
        return models.ModuleResponse(module_hash=digest, cached=cached)

    @app.get("/v1/modules", response_model=models.ModuleListResponse)
    async def list_modules() -> models.ModuleListResponse:
        return models.ModuleListResponse(modules=sorted(state.modules))

    @app.post("/v1/instances", response_model=models.SpawnResponse)
    async def spawn(body: models.SpawnRequest) -> models.SpawnResponse:
        config = b""
        if body.config is not None:
            config = json.dumps(body.config, separators=(",", ":")).encode()
        ids = []
        for i in range(body.count):
            name = body.name
            if name and body.count > 1:
                name = f"{name}-{i}"
            try:
                ids.append(state.host.spawn(body.module_hash, config, name=name))
            except UnknownModule:
                raise HTTPException(
                    status_code=404, detail=f"no module {body.module_hash}"
                ) from None
        return models.SpawnResponse(instance_ids=ids)

    @app.get("/v1/instances", response_model=models.InstanceListResponse)
    async def list_instances() -> models.InstanceListResponse:
        statuses = [state.host.status(iid) for iid in state.host.instances()]
        return models.InstanceListResponse(
            instances=[models.InstanceStatus(**doc) for doc in statuses]
        )

    @app.get("/v1/instances/{iid}", response_model=models.InstanceStatus)
    async def instance_status(iid: str) -> models.InstanceStatus:
        return models.InstanceStatus(**_status(state, iid))

    @app.delete("/v1/instances/{iid}", response_model=models.DestroyResponse)
    async def destroy(iid: str) -> models.DestroyResponse:
        _status(state, iid)
        state.host.destroy(iid)
        return models.DestroyResponse(destroyed=iid)

    @app.post("/v1/instances/{iid}/unload", response_model=models.UnloadResponse)
    async def unload(iid: str) -> models.UnloadResponse:
        doc = _status(state, iid)
        if not state.host.unloadable(iid):
            raise HTTPException(
                status_code=409,
                detail=(
                    f"instance {iid} is not unloadable"
                    f" (state={doc['state']}, queue_depth={doc['queue_depth']})"
                ),
            )
        try:
            path = state.host.unload(iid)
        except HostError as e:
            raise HTTPException(status_code=409, detail=str(e)) from None
        return models.UnloadResponse(instance_id=iid, snapshot_path=str(path))

    @app.get("/v1/instances/{iid}/logs", response_model=models.LogsResponse)
    async def logs(iid: str) -> models.LogsResponse:
        _status(state, iid)
        return models.LogsResponse(instance_id=iid, lines=state.host.guest_logs(iid))

    @app.get("/v1/metrics", response_model=models.MetricsResponse)
    async def metrics() -> models.MetricsResponse:
        return models.MetricsResponse(**state.host.metrics())

    if state.store is not None:
        app.include_router(create_router(state.store))

    return app
