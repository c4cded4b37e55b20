"""Shared domain types, the program score function, and the stage classifier."""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Optional


class InvalidArgumentError(ValueError):
    """An operation was called with arguments that violate its precondition."""


DIFFICULTY_LEVELS = ("easy", "medium", "hard")

BASELINE_MEASURE_REFERENCE = "measure_reference"
BASELINE_FIXED = "fixed_baseline"


class Stage(str, Enum):
    """First evaluation phase at which a candidate failed, or ``passed``."""

    compile_error = "compile_error"
    runtime_error = "runtime_error"
    correctness_error = "correctness_error"
    hack_detected = "hack_detected"
    unstable_timing = "unstable_timing"
    passed = "passed"


ERROR_STAGES = frozenset(
    {
        Stage.compile_error,
        Stage.runtime_error,
        Stage.correctness_error,
        Stage.hack_detected,
        Stage.unstable_timing,
    }
)


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    """RFC 3339 text; naive datetimes are assumed UTC."""
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.isoformat()


def parse_timestamp(text: str) -> datetime:
    return datetime.fromisoformat(text)


@dataclass(frozen=True)
class ToleranceConfig:
    relative_tol: float = 1e-3
    absolute_tol: float = 1e-3

    def __post_init__(self) -> None:
        if self.relative_tol < 0 or self.absolute_tol < 0:
            raise InvalidArgumentError("tolerances must be non-negative")
        if self.relative_tol == 0 and self.absolute_tol == 0:
            raise InvalidArgumentError("tolerances must not both be zero")

    def to_record(self) -> dict:
        return {"relative_tol": self.relative_tol, "absolute_tol": self.absolute_tol}

    @classmethod
    def from_record(cls, record: dict) -> "ToleranceConfig":
        return cls(
            relative_tol=float(record["relative_tol"]),
            absolute_tol=float(record["absolute_tol"]),
        )


@dataclass(frozen=True)
class TimingConfig:
    warmup_count: int = 3
    measure_count: int = 100
    stability_threshold: float = 0.01
    max_retry_rounds: int = 3

    def __post_init__(self) -> None:
        if self.warmup_count < 0:
            raise InvalidArgumentError("warmup_count must be >= 0")
        if self.measure_count < 2:
            raise InvalidArgumentError("measure_count must be >= 2")
        if not 0 < self.stability_threshold < 1:
            raise InvalidArgumentError("stability_threshold must be in (0, 1)")
        if self.max_retry_rounds < 0:
            raise InvalidArgumentError("max_retry_rounds must be >= 0")

    def to_record(self) -> dict:
        return {
            "warmup_count": self.warmup_count,
            "measure_count": self.measure_count,
            "stability_threshold": self.stability_threshold,
            "max_retry_rounds": self.max_retry_rounds,
        }

    @classmethod
    def from_record(cls, record: dict) -> "TimingConfig":
        return cls(
            warmup_count=int(record["warmup_count"]),
            measure_count=int(record["measure_count"]),
            stability_threshold=float(record["stability_threshold"]),
            max_retry_rounds=int(record["max_retry_rounds"]),
        )


@dataclass(frozen=True)
class TaskSpec:
    """One optimization problem: a reference program plus how to judge candidates."""

    task_id: str
    reference_source: str
    target_class_name: str
    backend_id: str
    test_input_spec: Any = None
    tolerance: ToleranceConfig = ToleranceConfig()
    timing: TimingConfig = TimingConfig()
    difficulty_level: Optional[str] = None
    baseline_mode: str = BASELINE_MEASURE_REFERENCE
    fixed_baseline_ns: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.task_id:
            raise InvalidArgumentError("task_id must be non-empty")
        if not self.reference_source:
            raise InvalidArgumentError("reference_source must be non-empty")
        if self.difficulty_level is not None and self.difficulty_level not in DIFFICULTY_LEVELS:
            raise InvalidArgumentError(f"unknown difficulty_level {self.difficulty_level!r}")
        if self.baseline_mode not in (BASELINE_MEASURE_REFERENCE, BASELINE_FIXED):
            raise InvalidArgumentError(f"unknown baseline_mode {self.baseline_mode!r}")
        if self.baseline_mode == BASELINE_FIXED:
            if self.fixed_baseline_ns is None or self.fixed_baseline_ns <= 0:
                raise InvalidArgumentError("fixed_baseline requires fixed_baseline_ns > 0")

    def to_record(self) -> dict:
        return {
            "task_id": self.task_id,
            "reference_source": self.reference_source,
            "target_class_name": self.target_class_name,
            "backend_id": self.backend_id,
            "test_input_spec": self.test_input_spec,
            "tolerance": self.tolerance.to_record(),
            "timing": self.timing.to_record(),
            "difficulty_level": self.difficulty_level,
            "baseline_mode": self.baseline_mode,
            "fixed_baseline_ns": self.fixed_baseline_ns,
        }

    @classmethod
    def from_record(cls, record: dict) -> "TaskSpec":
        return cls(
            task_id=record["task_id"],
            reference_source=record["reference_source"],
            target_class_name=record["target_class_name"],
            backend_id=record["backend_id"],
            test_input_spec=record.get("test_input_spec"),
            tolerance=ToleranceConfig.from_record(record["tolerance"]),
            timing=TimingConfig.from_record(record["timing"]),
            difficulty_level=record.get("difficulty_level"),
            baseline_mode=record.get("baseline_mode", BASELINE_MEASURE_REFERENCE),
            fixed_baseline_ns=record.get("fixed_baseline_ns"),
        )


@dataclass(frozen=True)
class CandidateProgram:
    """An executable candidate with lineage and provenance."""

    candidate_id: str
    task_id: str
    parent_id: Optional[str]
    generation: int
    island: int
    full_source: str
    evolve_block: str
    model_id: str
    prompt_hash: str
    created_at: datetime

    def __post_init__(self) -> None:
        if self.generation == 0 and self.parent_id is not None:
            raise InvalidArgumentError("generation-0 candidates have no parent")
        if self.generation > 0 and self.parent_id is None:
            raise InvalidArgumentError("non-seed candidates require a parent_id")
        if self.evolve_block and self.evolve_block not in self.full_source:
            raise InvalidArgumentError("evolve_block must be a contiguous substring of full_source")

    def to_record(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "task_id": self.task_id,
            "parent_id": self.parent_id,
            "generation": self.generation,
            "island": self.island,
            "full_source": self.full_source,
            "evolve_block": self.evolve_block,
            "model_id": self.model_id,
            "prompt_hash": self.prompt_hash,
            "created_at": format_timestamp(self.created_at),
        }

    @classmethod
    def from_record(cls, record: dict) -> "CandidateProgram":
        return cls(
            candidate_id=record["candidate_id"],
            task_id=record["task_id"],
            parent_id=record.get("parent_id"),
            generation=int(record["generation"]),
            island=int(record["island"]),
            full_source=record["full_source"],
            evolve_block=record["evolve_block"],
            model_id=record["model_id"],
            prompt_hash=record["prompt_hash"],
            created_at=parse_timestamp(record["created_at"]),
        )


@dataclass(frozen=True)
class TimingStats:
    """Robust summary of one measurement round (nanoseconds)."""

    raw_samples: tuple
    kept_count: int
    dropped_count: int
    trimmed_mean: float
    std_dev: float
    cv: float

    def __post_init__(self) -> None:
        if self.kept_count + self.dropped_count != len(self.raw_samples):
            raise InvalidArgumentError("kept + dropped must equal the sample count")
        if self.kept_count < 2:
            raise InvalidArgumentError("kept_count must be >= 2")
        if self.trimmed_mean <= 0:
            raise InvalidArgumentError("trimmed_mean must be > 0")

    def to_record(self) -> dict:
        return {
            "raw_samples": list(self.raw_samples),
            "kept_count": self.kept_count,
            "dropped_count": self.dropped_count,
            "trimmed_mean": self.trimmed_mean,
            "std_dev": self.std_dev,
            "cv": self.cv,
        }

    @classmethod
    def from_record(cls, record: dict) -> "TimingStats":
        return cls(
            raw_samples=tuple(record["raw_samples"]),
            kept_count=int(record["kept_count"]),
            dropped_count=int(record["dropped_count"]),
            trimmed_mean=float(record["trimmed_mean"]),
            std_dev=float(record["std_dev"]),
            cv=float(record["cv"]),
        )


@dataclass(frozen=True)
class EvalResult:
    """Structured evaluator verdict for one candidate."""

    candidate_id: str
    compiled: bool
    correct: bool
    hack_detected: bool
    stage: Stage
    candidate_timing: Optional[TimingStats] = None
    baseline_timing: Optional[TimingStats] = None
    speedup: Optional[float] = None
    score: float = 0.0
    error_log: str = ""
    hardware_metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.correct and not self.compiled:
            raise InvalidArgumentError("correct implies compiled")
        if self.hack_detected and self.stage != Stage.hack_detected:
            raise InvalidArgumentError("hack_detected implies stage hack_detected")
        # A speedup is reported only for fully valid results: compiled, correct,
        # honest, and timing-stable (stage == passed).
        if (self.speedup is not None) != (self.stage == Stage.passed):
            raise InvalidArgumentError("speedup must be present exactly for passed results")
        if self.speedup is not None and self.speedup <= 0:
            raise InvalidArgumentError("speedup must be > 0 when present")

    @property
    def valid(self) -> bool:
        """Compiled, correct, and not flagged as evaluation hacking."""
        return self.compiled and self.correct and not self.hack_detected

    def to_record(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "compiled": self.compiled,
            "correct": self.correct,
            "hack_detected": self.hack_detected,
            "stage": self.stage.value,
            "candidate_timing": self.candidate_timing.to_record() if self.candidate_timing else None,
            "baseline_timing": self.baseline_timing.to_record() if self.baseline_timing else None,
            "speedup": self.speedup,
            "score": self.score,
            "error_log": self.error_log,
            "hardware_metadata": dict(self.hardware_metadata),
        }

    @classmethod
    def from_record(cls, record: dict) -> "EvalResult":
        return cls(
            candidate_id=record["candidate_id"],
            compiled=bool(record["compiled"]),
            correct=bool(record["correct"]),
            hack_detected=bool(record["hack_detected"]),
            stage=Stage(record["stage"]),
            candidate_timing=(
                TimingStats.from_record(record["candidate_timing"])
                if record.get("candidate_timing")
                else None
            ),
            baseline_timing=(
                TimingStats.from_record(record["baseline_timing"])
                if record.get("baseline_timing")
                else None
            ),
            speedup=record.get("speedup"),
            score=float(record["score"]),
            error_log=record.get("error_log", ""),
            hardware_metadata=dict(record.get("hardware_metadata", {})),
        )


@dataclass(frozen=True)
class ScoreWeights:
    compile_credit: float = 1.0
    correct_credit: float = 1.0
    speedup_weight: float = 1.0
    speedup_cap: float = 100.0

    def __post_init__(self) -> None:
        if min(self.compile_credit, self.correct_credit, self.speedup_weight) < 0:
            raise InvalidArgumentError("score weights must be non-negative")
        if self.speedup_cap <= 1:
            raise InvalidArgumentError("speedup_cap must be > 1")

    def to_record(self) -> dict:
        return {
            "compile_credit": self.compile_credit,
            "correct_credit": self.correct_credit,
            "speedup_weight": self.speedup_weight,
            "speedup_cap": self.speedup_cap,
        }

    @classmethod
    def from_record(cls, record: dict) -> "ScoreWeights":
        return cls(
            compile_credit=float(record["compile_credit"]),
            correct_credit=float(record["correct_credit"]),
            speedup_weight=float(record["speedup_weight"]),
            speedup_cap=float(record["speedup_cap"]),
        )


DEFAULT_WEIGHTS = ScoreWeights()


def compute_score(
    compiled: bool,
    correct: bool,
    hack_detected: bool,
    speedup: Optional[float],
    weights: ScoreWeights = DEFAULT_WEIGHTS,
) -> float:
    """Piecewise-linear program score.

    Failure floors: 0 without compilation, ``compile_credit`` for compiled but
    incorrect (or hacked) candidates. Fully valid candidates additionally earn
    ``correct_credit`` plus ``speedup_weight * min(speedup, speedup_cap)``.
    """
    fully_valid = compiled and correct and not hack_detected
    if (speedup is not None) != fully_valid:
        raise InvalidArgumentError(
            "speedup must be present exactly when compiled, correct, and not hacked"
        )
    if not compiled:
        return 0.0
    if not fully_valid:
        return weights.compile_credit
    return (
        weights.compile_credit
        + weights.correct_credit
        + weights.speedup_weight * min(speedup, weights.speedup_cap)
    )


@dataclass(frozen=True)
class PhaseReport:
    """Which evaluation phases ran and how they ended.

    ``None`` means the phase was never reached; the first ``False`` in phase
    order fixes the stage.
    """

    compile_ok: Optional[bool] = None
    run_ok: Optional[bool] = None
    outputs_match: Optional[bool] = None
    kernel_executed: Optional[bool] = None
    timing_stable: Optional[bool] = None


def classify_stage(report: PhaseReport) -> Stage:
    """Deterministic, total mapping from a phase report onto the stage enum."""
    if report.compile_ok is False:
        return Stage.compile_error
    if report.run_ok is False:
        return Stage.runtime_error
    if report.outputs_match is False:
        return Stage.correctness_error
    if report.kernel_executed is False:
        return Stage.hack_detected
    if report.timing_stable is False:
        return Stage.unstable_timing
    return Stage.passed
