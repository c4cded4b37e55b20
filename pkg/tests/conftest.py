from __future__ import annotations

from datetime import datetime, timedelta, timezone

import pytest

from evotune.core import (
    CandidateProgram,
    EvalResult,
    Stage,
    TaskSpec,
    TimingConfig,
    TimingStats,
)

FIXED_TIME = datetime(2024, 1, 1, tzinfo=timezone.utc)


class TickingClock:
    """Deterministic clock for replay tests; advances a fixed step per call."""

    def __init__(self, step_s: float = 0.0):
        self.now = FIXED_TIME
        self.step = timedelta(seconds=step_s)

    def __call__(self) -> datetime:
        current = self.now
        self.now = self.now + self.step
        return current


@pytest.fixture
def fixed_clock():
    return lambda: FIXED_TIME


def make_candidate(
    candidate_id="cand-1",
    task_id="task-1",
    parent_id=None,
    generation=0,
    island=0,
    full_source="print('hello')\n",
    evolve_block="",
    model_id="test-model",
) -> CandidateProgram:
    return CandidateProgram(
        candidate_id=candidate_id,
        task_id=task_id,
        parent_id=parent_id,
        generation=generation,
        island=island,
        full_source=full_source,
        evolve_block=evolve_block,
        model_id=model_id,
        prompt_hash="",
        created_at=FIXED_TIME,
    )


def make_timing(mean=100.0, count=4) -> TimingStats:
    return TimingStats(
        raw_samples=tuple([mean] * count),
        kept_count=count,
        dropped_count=0,
        trimmed_mean=mean,
        std_dev=0.0,
        cv=0.0,
    )


def make_result(
    candidate_id="cand-1",
    stage=Stage.passed,
    speedup=1.0,
    score=3.0,
    candidate_mean=100.0,
    baseline_mean=100.0,
    error_log="",
) -> EvalResult:
    """EvalResult factory covering the common stage shapes."""
    if stage == Stage.passed:
        return EvalResult(
            candidate_id=candidate_id,
            compiled=True,
            correct=True,
            hack_detected=False,
            stage=stage,
            candidate_timing=make_timing(candidate_mean),
            baseline_timing=make_timing(baseline_mean),
            speedup=speedup,
            score=score,
            error_log=error_log,
        )
    compiled = stage != Stage.compile_error
    correct = stage == Stage.unstable_timing
    return EvalResult(
        candidate_id=candidate_id,
        compiled=compiled,
        correct=correct,
        hack_detected=stage == Stage.hack_detected,
        stage=stage,
        candidate_timing=make_timing(candidate_mean) if stage == Stage.unstable_timing else None,
        speedup=None,
        score=score,
        error_log=error_log,
    )


def make_task(
    task_id="task-1",
    backend_id="simulated",
    baseline_ns=100.0,
    noise_cv=0.0,
    measure_count=10,
    max_retry_rounds=0,
    extra_spec=None,
) -> TaskSpec:
    spec = {"baseline_runtime_ns": baseline_ns, "noise_cv": noise_cv}
    if extra_spec:
        spec.update(extra_spec)
    return TaskSpec(
        task_id=task_id,
        reference_source="def run(x):\n    return x + 1\n",
        target_class_name="ModelNew",
        backend_id=backend_id,
        test_input_spec=spec,
        timing=TimingConfig(
            warmup_count=1, measure_count=measure_count, max_retry_rounds=max_retry_rounds
        ),
    )
