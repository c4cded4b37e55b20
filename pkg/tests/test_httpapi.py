from __future__ import annotations

import time

import pytest
from fastapi.testclient import TestClient

from evotune.httpapi import create_app
from evotune.service import BackendDescriptor, EvalService

from conftest import make_candidate, make_task


@pytest.fixture()
def client():
    service = EvalService(parallelism=2, queue_limit=32)
    service.register_backend(BackendDescriptor(backend_id="simulated", kind="simulated"))
    with TestClient(create_app(service)) as test_client:
        yield test_client
    service.shutdown()


def body_for(source="# sim: runtime_ns=50\n"):
    task = make_task()
    return {
        "task": task.to_record(),
        "candidate": make_candidate(full_source=source).to_record(),
    }


def poll_until_done(client, job_id, timeout=10.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        job = client.get(f"/v1/jobs/{job_id}").json()
        if job["state"] in ("done", "failed"):
            return job
        time.sleep(0.01)
    raise AssertionError("job did not finish")


class TestEndpoints:
    def test_health(self, client):
        resp = client.get("/v1/health")
        assert resp.status_code == 200
        assert resp.json() == {"status": "ok", "backends": ["simulated"]}

    def test_backends(self, client):
        resp = client.get("/v1/backends")
        assert resp.status_code == 200
        assert resp.json()[0]["backend_id"] == "simulated"
        assert resp.json()[0]["kind"] == "simulated"

    def test_synchronous_evaluate(self, client):
        resp = client.post("/v1/evaluate", json=body_for())
        assert resp.status_code == 200
        result = resp.json()
        assert result["stage"] == "passed"
        assert result["speedup"] == pytest.approx(2.0)

    def test_evaluate_bad_body(self, client):
        resp = client.post("/v1/evaluate", json={"task": {"oops": True}})
        assert resp.status_code == 400

    def test_evaluate_unregistered_backend(self, client):
        body = body_for()
        body["task"]["backend_id"] = "missing"
        resp = client.post("/v1/evaluate", json=body)
        assert resp.status_code == 503

    def test_job_lifecycle(self, client):
        resp = client.post("/v1/jobs", json=body_for())
        assert resp.status_code == 200
        job_id = resp.json()["job_id"]
        job = poll_until_done(client, job_id)
        assert job["state"] == "done"
        assert job["result"]["speedup"] == pytest.approx(2.0)

    def test_unknown_job_is_404(self, client):
        assert client.get("/v1/jobs/nope").status_code == 404

    def test_sync_equals_async_bit_for_bit(self, client):
        body = body_for("# sim: runtime_ns=20\n")
        sync = client.post("/v1/evaluate", json=body).json()
        job_id = client.post("/v1/jobs", json=body).json()["job_id"]
        job = poll_until_done(client, job_id)
        assert job["result"] == sync
