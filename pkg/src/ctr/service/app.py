"""HTTP front end of the node daemon."""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from ..errors import EXIT_FAILURE, CtrError, UnknownProcess, UnknownProgram, exit_code_for
from . import schemas
from .node import Node, process_info


def _status(exc: CtrError) -> int:
    if isinstance(exc, (UnknownProcess, UnknownProgram)):
        return 404
    return 409


def create_app(node: Node) -> FastAPI:
    app = FastAPI(title="ctr node")
    app.state.node = node

    @app.exception_handler(CtrError)
    async def ctr_error(request: Request, exc: CtrError) -> JSONResponse:
        body = schemas.ErrorBody(code=exc.code, message=str(exc), exit_code=exit_code_for(exc))
        return JSONResponse(status_code=_status(exc), content=body.model_dump())

    @app.exception_handler(OSError)
    @app.exception_handler(ValueError)
    async def bad_request(request: Request, exc: Exception) -> JSONResponse:
        body = schemas.ErrorBody(code=type(exc).__name__, message=str(exc), exit_code=EXIT_FAILURE)
        return JSONResponse(status_code=400, content=body.model_dump())

    @app.get("/health")
    def health() -> dict:
        return {"ok": True, "processes": len(node.processes), "mks": node.mks}

    @app.get("/processes", response_model=list[schemas.ProcessInfo])
    def list_processes():
        return [process_info(p) for p in node.processes.values()]

    @app.post("/processes", response_model=schemas.ProcessInfo)
    def spawn(req: schemas.SpawnRequest):
        return process_info(node.spawn(req))

    @app.get("/processes/{pid}", response_model=schemas.ProcessInfo)
    def get_process(pid: int):
        return process_info(node.get(pid))

    @app.post("/processes/{pid}/run", response_model=schemas.ProcessInfo)
    def run(pid: int, req: schemas.RunRequest):
        return process_info(node.run(pid, req.steps))

    @app.post("/processes/{pid}/checkpoint", response_model=schemas.CheckpointResult)
    def checkpoint(pid: int, req: schemas.CheckpointRequest):
        return node.checkpoint(pid, req)

    @app.post("/processes/{pid}/self-migrate", response_model=schemas.RestoreResult)
    def self_migrate(pid: int, req: schemas.SelfMigrateRequest):
        return node.self_migrate(pid, req)

    @app.post("/restore", response_model=schemas.RestoreResult)
    def restore(req: schemas.RestoreRequest):
        return node.restore(req)

    return app
