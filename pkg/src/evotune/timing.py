"""Robust microbenchmark statistics: IQR outlier trimming and stability gating."""

from __future__ import annotations

import statistics
from typing import Sequence

from .core import InvalidArgumentError, TimingConfig, TimingStats

STABLE = "stable"
UNSTABLE = "unstable"


def robust_stats(samples: Sequence[float]) -> TimingStats:
    """Summarize raw duration samples after 1.5x-IQR outlier exclusion.

    Quartiles use linear interpolation. Samples outside
    [Q1 - 1.5*IQR, Q3 + 1.5*IQR] are dropped; if that would leave fewer than
    two samples, the two closest to the median are kept instead.
    """
    if len(samples) < 2:
        raise InvalidArgumentError("robust_stats needs at least 2 samples")
    if any(s <= 0 for s in samples):
        raise InvalidArgumentError("durations must be positive")

    ordered = sorted(samples)
    q1, _, q3 = statistics.quantiles(ordered, n=4, method="inclusive")
    iqr = q3 - q1
    lo = q1 - 1.5 * iqr
    hi = q3 + 1.5 * iqr
    kept = [s for s in ordered if lo <= s <= hi]

    if len(kept) < 2:
        median = statistics.median(ordered)
        kept = sorted(ordered, key=lambda s: (abs(s - median), s))[:2]

    mean = statistics.fmean(kept)
    std = statistics.stdev(kept)
    return TimingStats(
        raw_samples=tuple(samples),
        kept_count=len(kept),
        dropped_count=len(samples) - len(kept),
        trimmed_mean=mean,
        std_dev=std,
        cv=std / mean,
    )


def check_stability(stats: TimingStats, config: TimingConfig) -> str:
    """``stable`` iff the coefficient of variation is within the threshold (inclusive)."""
    return STABLE if stats.cv <= config.stability_threshold else UNSTABLE
