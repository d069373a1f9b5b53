"""HTTP coordinator exposing the project store to the CLI and the web UI.

Endpoints (JSON bodies):
  POST /projects                                create project, build plan
  GET  /projects/{id}                           project doc + live status
  GET  /projects/{id}/tasks/next?worker_id=...  lease the next task
  POST /projects/{id}/responses                 submit grouping/intruder response
  POST /projects/{id}/aggregate                 start aggregation job
  GET  /projects/{id}/results                   clustering result + diagnostics
  POST /projects/{id}/evaluation                generate + serve intruder tasks
  GET  /projects/{id}/report                    evaluation report (JSON + text)
  GET  /projects/{id}/export                    full event log (JSON Lines)
Static object images are served from /images when a directory is configured.
"""

from __future__ import annotations

import time
from pathlib import Path

from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse, PlainTextResponse
from fastapi.staticfiles import StaticFiles

from . import serialize
from .errors import (ConflictError, CrowdClusterError, NotFoundError, ProtocolError,
                     ValidationError)
from .evaluation import report_text
from .store import DEFAULT_LEASE_SECONDS, Clock, StoreRegistry

_STATUS = {
    ValidationError: 400,
    NotFoundError: 404,
    ConflictError: 409,
    ProtocolError: 409,
}


def create_app(
    data_dir: str | Path,
    images_dir: str | Path | None = None,
    lease_seconds: int = DEFAULT_LEASE_SECONDS,
    clock: Clock = time.time,
    run_jobs_in_background: bool = True,
) -> FastAPI:
    registry = StoreRegistry(Path(data_dir), clock=clock, lease_seconds=lease_seconds)
    app = FastAPI(title="crowdcluster", docs_url=None, redoc_url=None)
    app.state.registry = registry

    @app.exception_handler(CrowdClusterError)
    async def _domain_error(_request: Request, exc: CrowdClusterError):
        status = next((code for cls, code in _STATUS.items() if isinstance(exc, cls)), 500)
        return JSONResponse(
            status_code=status,
            content={"error": {"type": type(exc).__name__, "message": str(exc)}},
        )

    @app.post("/projects", status_code=201)
    async def create_project(body: dict):
        project_id = body.get("project_id") or f"project-{int(clock())}"
        objects = [serialize.object_record_from_doc(d) for d in body.get("objects", [])]
        if not objects:
            raise ValidationError("a project needs at least one object")
        store = registry.create(project_id, objects, body.get("config") or {})
        return store.project_doc

    @app.get("/projects/{project_id}")
    async def get_project(project_id: str):
        store = registry.get(project_id)
        return {**store.project_doc, "status": store.status_doc()}

    @app.get("/projects/{project_id}/tasks/next")
    async def next_task(project_id: str, worker_id: str = Query(...)):
        task = registry.get(project_id).next_task(worker_id)
        return task if task is not None else {"kind": "none"}

    @app.post("/projects/{project_id}/responses")
    async def submit_response(project_id: str, body: dict):
        return registry.get(project_id).submit_response(body)

    @app.post("/projects/{project_id}/aggregate", status_code=202)
    async def aggregate(project_id: str):
        job_id = registry.get(project_id).start_aggregation(
            background=run_jobs_in_background)
        return {"job_id": job_id}

    @app.get("/projects/{project_id}/results")
    async def results(project_id: str):
        result, diagnostics = registry.get(project_id).get_results()
        return {"result": result, "diagnostics": diagnostics}

    @app.post("/projects/{project_id}/evaluation", status_code=201)
    async def start_evaluation(project_id: str):
        count = registry.get(project_id).start_evaluation()
        return {"task_count": count}

    @app.get("/projects/{project_id}/report")
    async def report(project_id: str):
        doc = registry.get(project_id).report()
        return {**doc, "text": report_text(serialize.report_from_doc(doc))}

    @app.get("/projects/{project_id}/export")
    async def export(project_id: str):
        lines = registry.get(project_id).export_lines()
        return PlainTextResponse("\n".join(lines) + "\n",
                                 media_type="application/jsonl")

    if images_dir is not None:
        app.mount("/images", StaticFiles(directory=str(images_dir)), name="images")

    return app
