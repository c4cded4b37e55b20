"""Suite metrics: corr, fast_p at configurable thresholds, and average speedup."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .core import InvalidArgumentError

DEFAULT_P_VALUES = (0.0, 1.0, 2.0)


@dataclass(frozen=True)
class ResultRow:
    """Minimal per-task judgment used by metric computation."""

    correct: bool
    hack_detected: bool
    speedup: Optional[float] = None


@dataclass(frozen=True)
class MetricsSummary:
    corr: float  # percentage in [0, 100]
    fast_p: dict  # threshold -> fraction in [0, 1]
    avg_amsr: float
    task_count: int

    def __post_init__(self) -> None:
        if not 0 <= self.corr <= 100:
            raise InvalidArgumentError("corr must be a percentage")
        if any(not 0 <= v <= 1 for v in self.fast_p.values()):
            raise InvalidArgumentError("fast_p fractions must be in [0, 1]")
        if self.avg_amsr < 0:
            raise InvalidArgumentError("avg_amsr must be >= 0")

    def to_record(self) -> dict:
        return {
            "corr": self.corr,
            "fast_p": {f"{p:g}": v for p, v in sorted(self.fast_p.items())},
            "avg_amsr": self.avg_amsr,
            "task_count": self.task_count,
        }


def compute_metrics(results: list, p_values=DEFAULT_P_VALUES) -> MetricsSummary:
    """Aggregate per-task verdicts.

    corr counts correct-and-honest results; fast_p uses a strict ``speedup > p``;
    avg_amsr zeroes invalid results and any speedup below 1.
    """
    if not results:
        raise InvalidArgumentError("compute_metrics needs at least one result")
    n = len(results)

    def honest(r: ResultRow) -> bool:
        return r.correct and not r.hack_detected

    corr = 100.0 * sum(1 for r in results if honest(r)) / n
    fast_p = {
        float(p): sum(1 for r in results if honest(r) and r.speedup is not None and r.speedup > p)
        / n
        for p in p_values
    }
    amsr_total = sum(
        r.speedup
        for r in results
        if honest(r) and r.speedup is not None and r.speedup >= 1.0
    )
    return MetricsSummary(corr=corr, fast_p=fast_p, avg_amsr=amsr_total / n, task_count=n)
