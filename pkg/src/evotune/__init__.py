"""Evolutionary program-optimization harness.

Maintains an archive of executable candidate programs, improves them with
LLM-proposed block edits under structured execution feedback, evaluates
candidates through a noise-hardened service with hack detection, and mines
the resulting trajectories into training samples.
"""

from .archive import ArchiveConfig, ArchiveEntry, CellKey, MapElitesArchive
from .controller import EvolutionController, RunConfig, RunReport, TrajectoryStep
from .core import (
    CandidateProgram,
    EvalResult,
    PhaseReport,
    ScoreWeights,
    Stage,
    TaskSpec,
    TimingConfig,
    TimingStats,
    ToleranceConfig,
    classify_stage,
    compute_score,
)
from .llm import DecodingConfig, LLMClient, scripted_mock
from .metrics import MetricsSummary, ResultRow, compute_metrics
from .prompting import BlockMarkers, extract_evolve_block, merge_block
from .service import BackendDescriptor, EvalJob, EvalService
from .timing import check_stability, robust_stats

__version__ = "0.1.0"

__all__ = [
    "ArchiveConfig",
    "ArchiveEntry",
    "BackendDescriptor",
    "BlockMarkers",
    "CandidateProgram",
    "CellKey",
    "DecodingConfig",
    "EvalJob",
    "EvalResult",
    "EvalService",
    "EvolutionController",
    "LLMClient",
    "MapElitesArchive",
    "MetricsSummary",
    "PhaseReport",
    "ResultRow",
    "RunConfig",
    "RunReport",
    "ScoreWeights",
    "Stage",
    "TaskSpec",
    "TimingConfig",
    "TimingStats",
    "ToleranceConfig",
    "TrajectoryStep",
    "check_stability",
    "classify_stage",
    "compute_metrics",
    "compute_score",
    "extract_evolve_block",
    "merge_block",
    "robust_stats",
    "scripted_mock",
]
