"""Evaluation orchestrator: phase pipeline, robust timing, scoring, and the job pool."""

from __future__ import annotations

import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional

from .core import (
    BASELINE_FIXED,
    CandidateProgram,
    EvalResult,
    InvalidArgumentError,
    ScoreWeights,
    Stage,
    TaskSpec,
    compute_score,
    utcnow,
    format_timestamp,
    parse_timestamp,
)
from .sandboxclient import BackendUnavailableError, ExternalSandboxBackend
from .simbackend import BackendRun, SimulatedBackend
from .timing import UNSTABLE, check_stability, robust_stats

JOB_QUEUED = "queued"
JOB_RUNNING = "running"
JOB_DONE = "done"
JOB_FAILED = "failed"


class UnknownJobError(KeyError):
    pass


class QueueFullError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackendDescriptor:
    backend_id: str
    kind: str  # simulated | external_sandbox
    endpoint_or_command: str = ""
    capabilities: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "backend_id": self.backend_id,
            "kind": self.kind,
            "endpoint_or_command": self.endpoint_or_command,
            "capabilities": dict(self.capabilities),
        }

    @classmethod
    def from_record(cls, record: dict) -> "BackendDescriptor":
        return cls(
            backend_id=record["backend_id"],
            kind=record["kind"],
            endpoint_or_command=record.get("endpoint_or_command", ""),
            capabilities=dict(record.get("capabilities", {})),
        )


@dataclass(frozen=True)
class EvalJob:
    job_id: str
    task: TaskSpec
    candidate: CandidateProgram
    submitted_at: datetime
    state: str
    result: Optional[EvalResult] = None
    error: Optional[str] = None

    def __post_init__(self) -> None:
        if (self.result is not None) != (self.state == JOB_DONE):
            raise InvalidArgumentError("result present iff state is done")

    def to_record(self) -> dict:
        return {
            "job_id": self.job_id,
            "task": self.task.to_record(),
            "candidate": self.candidate.to_record(),
            "submitted_at": format_timestamp(self.submitted_at),
            "state": self.state,
            "result": self.result.to_record() if self.result else None,
            "error": self.error,
        }

    @classmethod
    def from_record(cls, record: dict) -> "EvalJob":
        return cls(
            job_id=record["job_id"],
            task=TaskSpec.from_record(record["task"]),
            candidate=CandidateProgram.from_record(record["candidate"]),
            submitted_at=parse_timestamp(record["submitted_at"]),
            state=record["state"],
            result=EvalResult.from_record(record["result"]) if record.get("result") else None,
            error=record.get("error"),
        )


class _JobState:
    __slots__ = ("job_id", "task", "candidate", "submitted_at", "state", "result", "error")

    def __init__(self, job_id, task, candidate):
        self.job_id = job_id
        self.task = task
        self.candidate = candidate
        self.submitted_at = utcnow()
        self.state = JOB_QUEUED
        self.result: Optional[EvalResult] = None
        self.error: Optional[str] = None

    def snapshot(self) -> EvalJob:
        return EvalJob(
            job_id=self.job_id,
            task=self.task,
            candidate=self.candidate,
            submitted_at=self.submitted_at,
            state=self.state,
            result=self.result,
            error=self.error,
        )


class EvalService:
    """Accepts (task, candidate) work, dispatches it to backends, returns EvalResults.

    Synchronous ``evaluate`` and async ``submit_job``/``poll_job`` share the
    same pipeline, so job results are bit-identical to direct evaluation.
    """

    def __init__(
        self,
        weights: ScoreWeights = ScoreWeights(),
        parallelism: int = 4,
        queue_limit: int = 64,
    ):
        if parallelism < 1:
            raise InvalidArgumentError("parallelism must be >= 1")
        self.weights = weights
        self.queue_limit = queue_limit
        self._adapters: dict = {}
        self._descriptors: dict = {}
        self._jobs: dict = {}
        self._lock = threading.Lock()
        self._baseline_cache: dict = {}
        self._pool = ThreadPoolExecutor(max_workers=parallelism, thread_name_prefix="eval")

    # -- backend registry ---------------------------------------------------

    def register_backend(self, descriptor: BackendDescriptor, adapter=None) -> None:
        if adapter is None:
            if descriptor.kind == "simulated":
                adapter = SimulatedBackend()
            elif descriptor.kind == "external_sandbox":
                adapter = ExternalSandboxBackend(descriptor.endpoint_or_command)
            else:
                raise InvalidArgumentError(f"unknown backend kind {descriptor.kind!r}")
        self._descriptors[descriptor.backend_id] = descriptor
        self._adapters[descriptor.backend_id] = adapter

    def backends(self) -> list:
        return [self._descriptors[k] for k in sorted(self._descriptors)]

    def _adapter(self, backend_id: str):
        try:
            return self._adapters[backend_id]
        except KeyError:
            raise BackendUnavailableError(f"backend {backend_id!r} is not registered") from None

    # -- evaluation pipeline --------------------------------------------------

    def evaluate(
        self, task: TaskSpec, candidate: CandidateProgram, refresh_baseline: bool = False
    ) -> EvalResult:
        if candidate.task_id != task.task_id:
            raise InvalidArgumentError("candidate does not belong to this task")
        adapter = self._adapter(task.backend_id)
        run = adapter.run_phases(task, candidate)
        return self._finish(task, candidate, adapter, run, refresh_baseline)

    def _finish(
        self,
        task: TaskSpec,
        candidate: CandidateProgram,
        adapter,
        run: BackendRun,
        refresh_baseline: bool,
    ) -> EvalResult:
        meta = dict(run.hardware_metadata)
        base = dict(
            candidate_id=candidate.candidate_id,
            hardware_metadata=meta,
            error_log=run.error_log,
        )

        if not run.compile_ok:
            return EvalResult(
                compiled=False,
                correct=False,
                hack_detected=False,
                stage=Stage.compile_error,
                score=compute_score(False, False, False, None, self.weights),
                **base,
            )
        if run.run_ok is False:
            return EvalResult(
                compiled=True,
                correct=False,
                hack_detected=False,
                stage=Stage.runtime_error,
                score=compute_score(True, False, False, None, self.weights),
                **base,
            )
        if run.outputs_match is False:
            return EvalResult(
                compiled=True,
                correct=False,
                hack_detected=False,
                stage=Stage.correctness_error,
                score=compute_score(True, False, False, None, self.weights),
                **base,
            )
        if run.kernel_executed is False:
            # A hack fabricates a "passed test"; the correctness verdict is void.
            return EvalResult(
                compiled=True,
                correct=False,
                hack_detected=True,
                stage=Stage.hack_detected,
                score=compute_score(True, False, True, None, self.weights),
                **base,
            )

        baseline_stats, baseline_mean = self._baseline(task, adapter, run, refresh_baseline)
        candidate_stats = robust_stats(run.candidate_samples)
        rounds = 0
        while (
            check_stability(candidate_stats, task.timing) == UNSTABLE
            and rounds < task.timing.max_retry_rounds
        ):
            rounds += 1
            samples = adapter.measure_candidate(task, candidate, round_idx=rounds)
            candidate_stats = robust_stats(samples)

        if check_stability(candidate_stats, task.timing) == UNSTABLE:
            return EvalResult(
                compiled=True,
                correct=True,
                hack_detected=False,
                stage=Stage.unstable_timing,
                candidate_timing=candidate_stats,
                baseline_timing=baseline_stats,
                # No trustworthy speedup: credit compilation and correctness only.
                score=self.weights.compile_credit + self.weights.correct_credit,
                candidate_id=candidate.candidate_id,
                hardware_metadata=meta,
                error_log=(
                    f"timing cv {candidate_stats.cv:.6f} above threshold "
                    f"{task.timing.stability_threshold} after {rounds} retries"
                ),
            )

        speedup = baseline_mean / candidate_stats.trimmed_mean
        return EvalResult(
            compiled=True,
            correct=True,
            hack_detected=False,
            stage=Stage.passed,
            candidate_timing=candidate_stats,
            baseline_timing=baseline_stats,
            speedup=speedup,
            score=compute_score(True, True, False, speedup, self.weights),
            **base,
        )

    def _baseline(self, task: TaskSpec, adapter, run: BackendRun, refresh: bool):
        if task.baseline_mode == BASELINE_FIXED:
            return None, float(task.fixed_baseline_ns)
        key = (task.task_id, task.backend_id)
        with self._lock:
            cached = None if refresh else self._baseline_cache.get(key)
        if cached is not None:
            return cached, cached.trimmed_mean
        samples = run.baseline_samples
        if samples is None:
            samples = adapter.measure_baseline(task)
        stats = robust_stats(samples)
        with self._lock:
            self._baseline_cache[key] = stats
        return stats, stats.trimmed_mean

    # -- async job surface -----------------------------------------------------

    def submit_job(self, task: TaskSpec, candidate: CandidateProgram) -> str:
        self._adapter(task.backend_id)  # fail fast on unregistered backends
        job = _JobState(uuid.uuid4().hex, task, candidate)
        with self._lock:
            active = sum(1 for j in self._jobs.values() if j.state in (JOB_QUEUED, JOB_RUNNING))
            if active >= self.queue_limit:
                raise QueueFullError(f"queue limit {self.queue_limit} reached")
            self._jobs[job.job_id] = job
        self._pool.submit(self._run_job, job.job_id)
        return job.job_id

    def _run_job(self, job_id: str) -> None:
        with self._lock:
            job = self._jobs[job_id]
            job.state = JOB_RUNNING
            task, candidate = job.task, job.candidate
        try:
            result = self.evaluate(task, candidate)
        except Exception as exc:
            with self._lock:
                job.state = JOB_FAILED
                job.error = f"{type(exc).__name__}: {exc}"
            return
        with self._lock:
            job.result = result
            job.state = JOB_DONE

    def poll_job(self, job_id: str) -> EvalJob:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise UnknownJobError(job_id)
            return job.snapshot()

    def purge_job(self, job_id: str) -> None:
        with self._lock:
            self._jobs.pop(job_id, None)

    def purge_finished(self) -> int:
        with self._lock:
            done = [k for k, j in self._jobs.items() if j.state in (JOB_DONE, JOB_FAILED)]
            for k in done:
                del self._jobs[k]
            return len(done)

    def health(self) -> dict:
        return {"status": "ok", "backends": [d.backend_id for d in self.backends()]}

    def shutdown(self) -> None:
        self._pool.shutdown(wait=True)
