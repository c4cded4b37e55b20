"""JSON-over-HTTP surface for the evaluation service."""

from __future__ import annotations

from fastapi import FastAPI, HTTPException, Request

from .core import CandidateProgram, InvalidArgumentError, TaskSpec
from .sandboxclient import BackendUnavailableError
from .service import EvalService, QueueFullError, UnknownJobError


def create_app(service: EvalService) -> FastAPI:
    app = FastAPI(title="evotune evaluation service")
    app.state.service = service

    def _parse_pair(body: dict):
        try:
            task = TaskSpec.from_record(body["task"])
            candidate = CandidateProgram.from_record(body["candidate"])
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=f"bad request body: {exc}") from exc
        return task, candidate

    @app.post("/v1/evaluate")
    async def evaluate(request: Request) -> dict:
        task, candidate = _parse_pair(await request.json())
        try:
            result = service.evaluate(task, candidate)
        except BackendUnavailableError as exc:
            raise HTTPException(status_code=503, detail=str(exc)) from exc
        except InvalidArgumentError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return result.to_record()

    @app.post("/v1/jobs")
    async def submit(request: Request) -> dict:
        task, candidate = _parse_pair(await request.json())
        try:
            job_id = service.submit_job(task, candidate)
        except QueueFullError as exc:
            raise HTTPException(status_code=429, detail=str(exc)) from exc
        except BackendUnavailableError as exc:
            raise HTTPException(status_code=503, detail=str(exc)) from exc
        return {"job_id": job_id}

    @app.get("/v1/jobs/{job_id}")
    async def poll(job_id: str) -> dict:
        try:
            return service.poll_job(job_id).to_record()
        except UnknownJobError as exc:
            raise HTTPException(status_code=404, detail=f"unknown job {job_id}") from exc

    @app.get("/v1/health")
    async def health() -> dict:
        return service.health()

    @app.get("/v1/backends")
    async def backends() -> list:
        return [d.to_record() for d in service.backends()]

    return app
