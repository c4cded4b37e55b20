"""Deterministic in-process evaluator driven by scripted outcome rules.

Outcomes come from, in precedence order: ``# sim:`` directive lines embedded in
the candidate source, ``contains`` rules in the task's rule table, then the
table's default. Timing samples are synthesized with seeded noise so the
stability gate is exercised without hardware.
"""

from __future__ import annotations

import hashlib
import random
import re
from dataclasses import dataclass, field
from typing import Optional

from .core import CandidateProgram, InvalidArgumentError, TaskSpec

DIRECTIVE_RE = re.compile(r"^\s*#\s*sim:\s*(.+)$", re.MULTILINE)

SIMULATED_KIND = "simulated"


@dataclass(frozen=True)
class SimOutcome:
    compiled: bool = True
    runtime_error: bool = False
    correct: bool = True
    kernel_executed: bool = True
    runtime_ns: Optional[float] = None  # None: same as the baseline
    noise_cv: Optional[float] = None
    error_log: str = ""
    max_abs_err: float = 0.0


@dataclass
class BackendRun:
    """Phase outcomes handed back to the orchestrator; later phases may be absent."""

    compile_ok: bool
    run_ok: Optional[bool] = None
    outputs_match: Optional[bool] = None
    max_abs_err: Optional[float] = None
    kernel_executed: Optional[bool] = None
    hack_evidence: str = ""
    baseline_samples: Optional[list] = None
    candidate_samples: Optional[list] = None
    error_log: str = ""
    hardware_metadata: dict = field(default_factory=dict)


def _parse_value(raw: str):
    lowered = raw.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    try:
        return float(raw)
    except ValueError:
        return raw


def parse_directives(source: str) -> dict:
    """Collect ``key=value`` tokens from every ``# sim:`` line in the source."""
    values: dict = {}
    for match in DIRECTIVE_RE.finditer(source):
        for token in match.group(1).split():
            if "=" not in token:
                raise InvalidArgumentError(f"bad sim directive token {token!r}")
            key, raw = token.split("=", 1)
            values[key.strip()] = _parse_value(raw.strip())
    return values


def _outcome_from_values(values: dict, default: SimOutcome) -> SimOutcome:
    known = {
        "compiled",
        "runtime_error",
        "correct",
        "kernel_executed",
        "runtime_ns",
        "noise_cv",
        "error_log",
        "max_abs_err",
    }
    unknown = set(values) - known
    if unknown:
        raise InvalidArgumentError(f"unknown sim outcome keys: {sorted(unknown)}")
    merged = {
        "compiled": bool(values.get("compiled", default.compiled)),
        "runtime_error": bool(values.get("runtime_error", default.runtime_error)),
        "correct": bool(values.get("correct", default.correct)),
        "kernel_executed": bool(values.get("kernel_executed", default.kernel_executed)),
        "runtime_ns": values.get("runtime_ns", default.runtime_ns),
        "noise_cv": values.get("noise_cv", default.noise_cv),
        "error_log": str(values.get("error_log", default.error_log)),
        "max_abs_err": float(values.get("max_abs_err", default.max_abs_err)),
    }
    return SimOutcome(**merged)


def _seeded_rng(*parts) -> random.Random:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


class SimulatedBackend:
    """Backend adapter with fully scripted, reproducible behaviour."""

    backend_id = "simulated"
    kind = SIMULATED_KIND

    def _table(self, task: TaskSpec) -> dict:
        table = task.test_input_spec or {}
        if not isinstance(table, dict):
            raise InvalidArgumentError("simulated backend expects a dict rule table")
        return table

    def _resolve(self, task: TaskSpec, source: str) -> SimOutcome:
        table = self._table(task)
        default = _outcome_from_values(dict(table.get("default", {})), SimOutcome())
        outcome = default
        for rule in table.get("rules", []):
            needle = rule.get("contains")
            if needle is None:
                raise InvalidArgumentError("simulated rule needs a 'contains' key")
            if needle in source:
                values = {k: v for k, v in rule.items() if k != "contains"}
                outcome = _outcome_from_values(values, default)
                break
        directives = parse_directives(source)
        if directives:
            outcome = _outcome_from_values(directives, outcome)
        return outcome

    def _synth_samples(
        self, task: TaskSpec, label: str, runtime_ns: float, noise_cv: float, round_idx: int
    ) -> list:
        table = self._table(task)
        seed = table.get("noise_seed", 0)
        rng = _seeded_rng(task.task_id, label, round_idx, seed)
        count = task.timing.measure_count
        if noise_cv <= 0:
            return [float(runtime_ns)] * count
        samples = []
        for _ in range(count):
            factor = max(1e-6, 1.0 + rng.gauss(0.0, noise_cv))
            samples.append(runtime_ns * factor)
        return samples

    def _baseline_runtime(self, task: TaskSpec) -> float:
        return float(self._table(task).get("baseline_runtime_ns", 100.0))

    def _noise_cv(self, task: TaskSpec, outcome: SimOutcome) -> float:
        if outcome.noise_cv is not None:
            return float(outcome.noise_cv)
        return float(self._table(task).get("noise_cv", 0.0))

    def run_phases(self, task: TaskSpec, candidate: CandidateProgram) -> BackendRun:
        outcome = self._resolve(task, candidate.full_source)
        run = BackendRun(
            compile_ok=outcome.compiled,
            hardware_metadata={"backend": "simulated", "device": "scripted"},
        )
        if not outcome.compiled:
            run.error_log = outcome.error_log or "simulated compile failure"
            return run
        if outcome.runtime_error:
            run.run_ok = False
            run.error_log = outcome.error_log or "simulated runtime failure"
            return run
        run.run_ok = True
        run.outputs_match = outcome.correct
        run.max_abs_err = outcome.max_abs_err if not outcome.correct else 0.0
        if not outcome.correct:
            run.error_log = outcome.error_log or (
                f"simulated correctness failure: max_abs_err={run.max_abs_err}"
            )
            return run
        run.kernel_executed = outcome.kernel_executed
        if not outcome.kernel_executed:
            run.hack_evidence = "no block-defined function executed"
            run.error_log = outcome.error_log or run.hack_evidence
            return run
        noise_cv = self._noise_cv(task, outcome)
        runtime = outcome.runtime_ns if outcome.runtime_ns is not None else self._baseline_runtime(task)
        run.baseline_samples = self.measure_baseline(task, round_idx=0)
        run.candidate_samples = self._synth_samples(
            task, candidate.candidate_id, float(runtime), noise_cv, round_idx=0
        )
        return run

    def measure_candidate(
        self, task: TaskSpec, candidate: CandidateProgram, round_idx: int
    ) -> list:
        outcome = self._resolve(task, candidate.full_source)
        runtime = outcome.runtime_ns if outcome.runtime_ns is not None else self._baseline_runtime(task)
        return self._synth_samples(
            task, candidate.candidate_id, float(runtime), self._noise_cv(task, outcome), round_idx
        )

    def measure_baseline(self, task: TaskSpec, round_idx: int = 0) -> list:
        table = self._table(task)
        noise_cv = float(table.get("baseline_noise_cv", table.get("noise_cv", 0.0)))
        return self._synth_samples(
            task, "__baseline__", self._baseline_runtime(task), noise_cv, round_idx
        )
