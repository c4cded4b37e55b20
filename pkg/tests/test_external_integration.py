"""End-to-end over the wire: the evaluation service driving the real runner binary."""

from __future__ import annotations

import shutil

import pytest

from evotune.core import Stage, TaskSpec, TimingConfig
from evotune.prompting import BlockMarkers, wrap_in_block
from evotune.service import BackendDescriptor, EvalService

from conftest import make_candidate

RUNNER = shutil.which("sandbox-runner")
pytestmark = pytest.mark.skipif(RUNNER is None, reason="sandbox-runner binary not installed")

BUSY_LOOP = (
    "def run(n):\n"
    "    total = 0\n"
    "    for i in range(n):\n"
    "        total += i * i\n"
    "    return float(total % 1000003)\n"
)

MARKERS = BlockMarkers()


def make_sandbox_task(task_id="sbx-task"):
    return TaskSpec(
        task_id=task_id,
        reference_source=BUSY_LOOP,
        target_class_name="run",
        backend_id="sandbox",
        test_input_spec={
            "execution_mode": "inline_script",
            "cases": [{"args": [30000]}],
        },
        # interpreter wall-clock jitter is far looser than the GPU-side 1% gate
        timing=TimingConfig(
            warmup_count=3, measure_count=15, stability_threshold=0.5, max_retry_rounds=1
        ),
    )


@pytest.fixture()
def service():
    svc = EvalService(parallelism=1)
    svc.register_backend(
        BackendDescriptor(
            backend_id="sandbox",
            kind="external_sandbox",
            endpoint_or_command=f"{RUNNER} --serve",
        )
    )
    yield svc
    svc._adapters["sandbox"].close()
    svc.shutdown()


class TestOverTheWire:
    def test_identity_candidate_passes_with_unit_speedup(self, service):
        task = make_sandbox_task()
        candidate = make_candidate(
            task_id=task.task_id,
            full_source=wrap_in_block(BUSY_LOOP, MARKERS),
            evolve_block=BUSY_LOOP,
        )
        result = service.evaluate(task, candidate)
        assert result.stage == Stage.passed, result.error_log
        assert result.compiled and result.correct and not result.hack_detected
        assert 0.7 <= result.speedup <= 1.4
        assert result.hardware_metadata.get("runner") == "sandbox-runner"

    def test_library_fallback_is_hack_detected(self, service):
        task = make_sandbox_task("sbx-hack")
        fallback = (
            BUSY_LOOP
            + wrap_in_block("def fused(n):\n    return float(n)\n", MARKERS)
        )
        candidate = make_candidate(task_id=task.task_id, full_source=fallback, evolve_block="")
        result = service.evaluate(task, candidate)
        assert result.stage == Stage.hack_detected
        assert result.hack_detected
        assert result.speedup is None

    def test_broken_candidate_is_compile_error(self, service):
        task = make_sandbox_task("sbx-broken")
        candidate = make_candidate(
            task_id=task.task_id,
            full_source=wrap_in_block("def run(:\n", MARKERS),
            evolve_block="",
        )
        result = service.evaluate(task, candidate)
        assert result.stage == Stage.compile_error
        assert result.score == 0.0
        assert "SyntaxError" in result.error_log
