"""Mines persisted evolution runs into step-centric training samples."""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Optional

from .controller import RunReport
from .core import EvalResult, InvalidArgumentError, TaskSpec

log = logging.getLogger(__name__)

KIND_CORRECTNESS = "correctness_sft"
KIND_PERFORMANCE = "performance_sft"
KIND_BEST_STEP = "best_step_rl"

IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


class MissingArtifactError(FileNotFoundError):
    """A persisted run is incomplete (prompt/generation/eval file absent)."""


@dataclass(frozen=True)
class StepDraft:
    """Everything a filter needs to know about one accepted trajectory step."""

    run_id: str
    task_id: str
    iteration: int
    system_text: str
    user_text: str
    target_output: str
    parent_id: str
    parent_is_seed: bool
    parent_score: float
    parent_runtime_ns: Optional[float]
    child_id: str
    child_score: float
    child_correct: bool
    child_speedup: Optional[float]
    child_runtime_ns: Optional[float]
    context_candidate_ids: tuple


@dataclass(frozen=True)
class TrainingSample:
    sample_id: str
    kind: str
    system_text: str
    user_text: str
    target_output: str
    parent_runtime_ns: Optional[float]
    child_runtime_ns: Optional[float]
    achieved_speedup_vs_parent: Optional[float]
    reward: Optional[float]
    difficulty: str
    task_id: str
    run_id: str
    iteration: int
    target_score: float
    context_candidate_ids: tuple = ()

    def __post_init__(self) -> None:
        if (self.reward is not None) != (self.kind == KIND_BEST_STEP):
            raise InvalidArgumentError("reward present iff kind is best_step_rl")

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "kind": self.kind,
            "input_context": {"system_text": self.system_text, "user_text": self.user_text},
            "target_output": self.target_output,
            "parent_runtime_ns": self.parent_runtime_ns,
            "child_runtime_ns": self.child_runtime_ns,
            "achieved_speedup_vs_parent": self.achieved_speedup_vs_parent,
            "reward": self.reward,
            "difficulty": self.difficulty,
            "task_id": self.task_id,
            "source_step": {"run_id": self.run_id, "iteration": self.iteration},
            "target_score": self.target_score,
            "context_candidate_ids": list(self.context_candidate_ids),
        }


@dataclass(frozen=True)
class RLGroup:
    group_id: str
    parent_candidate_id: str
    prompt_context_ref: str
    members: tuple  # ((candidate_id, reward), ...)

    @property
    def group_size(self) -> int:
        return len(self.members)

    def to_record(self) -> dict:
        return {
            "group_id": self.group_id,
            "parent_candidate_id": self.parent_candidate_id,
            "prompt_context_ref": self.prompt_context_ref,
            "members": [{"candidate_id": c, "reward": r} for c, r in self.members],
        }


def load_run(run_dir: Path) -> tuple:
    """(RunReport, TaskSpec) from a persisted run directory."""
    run_dir = Path(run_dir)
    run_path = run_dir / "run.json"
    task_path = run_dir / "task.json"
    if not run_path.exists() or not task_path.exists():
        raise MissingArtifactError(f"run.json/task.json missing under {run_dir}")
    report = RunReport.from_record(json.loads(run_path.read_text()))
    task = TaskSpec.from_record(json.loads(task_path.read_text()))
    return report, task


def _read_artifact(path: Path) -> str:
    if not path.exists():
        raise MissingArtifactError(str(path))
    return path.read_text(encoding="utf-8")


def _runtime_of(evaluation: Optional[EvalResult]) -> Optional[float]:
    if evaluation is None or evaluation.candidate_timing is None:
        return None
    return evaluation.candidate_timing.trimmed_mean


def decompose(run_dir: Path, report: Optional[RunReport] = None) -> list:
    """One draft per accepted step; the exact persisted prompt pair and generation."""
    run_dir = Path(run_dir)
    if report is None:
        report, _ = load_run(run_dir)
    system_text = _read_artifact(run_dir / "system_prompt.txt")
    run_id = run_dir.name

    evals = {report.seed_candidate.candidate_id: report.seed_eval}
    scores = {report.seed_candidate.candidate_id: report.seed_eval.score}
    drafts: list = []
    for step in report.steps:
        if not step.accepted:
            continue
        step_dir = run_dir / "steps" / f"{step.iteration:03d}"
        user_text = _read_artifact(step_dir / "prompt.txt")
        generation = _read_artifact(step_dir / "generation.txt")
        parent_eval = evals.get(step.parent_id)
        parent_runtime = _runtime_of(parent_eval)
        child_runtime = _runtime_of(step.child_eval)
        drafts.append(
            StepDraft(
                run_id=run_id,
                task_id=report.task_id,
                iteration=step.iteration,
                system_text=system_text,
                user_text=user_text,
                target_output=generation,
                parent_id=step.parent_id,
                parent_is_seed=step.parent_id == report.seed_candidate.candidate_id,
                parent_score=scores.get(step.parent_id, 0.0),
                parent_runtime_ns=parent_runtime,
                child_id=step.child.candidate_id,
                child_score=step.child_eval.score,
                child_correct=step.child_eval.valid,
                child_speedup=step.child_eval.speedup,
                child_runtime_ns=child_runtime,
                context_candidate_ids=step.inspiration_ids,
            )
        )
        evals[step.child.candidate_id] = step.child_eval
        scores[step.child.candidate_id] = step.child_eval.score
    return drafts


def _make_sample(draft: StepDraft, kind: str, difficulty: str, reward=None) -> TrainingSample:
    vs_parent = None
    if draft.parent_runtime_ns and draft.child_runtime_ns:
        vs_parent = draft.parent_runtime_ns / draft.child_runtime_ns
    return TrainingSample(
        sample_id=f"{draft.run_id}-{draft.iteration:04d}-{kind}",
        kind=kind,
        system_text=draft.system_text,
        user_text=draft.user_text,
        target_output=draft.target_output,
        parent_runtime_ns=draft.parent_runtime_ns,
        child_runtime_ns=draft.child_runtime_ns,
        achieved_speedup_vs_parent=vs_parent,
        reward=reward,
        difficulty=difficulty,
        task_id=draft.task_id,
        run_id=draft.run_id,
        iteration=draft.iteration,
        target_score=draft.child_score,
        context_candidate_ids=draft.context_candidate_ids,
    )


def filter_correctness(drafts: list, difficulty: str = "easy") -> list:
    """Initial translation steps (seed parent) whose child is functionally correct."""
    return [
        _make_sample(d, KIND_CORRECTNESS, difficulty)
        for d in drafts
        if d.parent_is_seed and d.child_correct
    ]


def filter_performance(drafts: list, difficulty: str = "easy") -> list:
    """Non-initial steps with a correct child that beats the baseline (strict > 1.0)."""
    return [
        _make_sample(d, KIND_PERFORMANCE, difficulty)
        for d in drafts
        if not d.parent_is_seed
        and d.child_correct
        and d.child_speedup is not None
        and d.child_speedup > 1.0
    ]


def select_best_steps(
    report: RunReport, drafts: list, difficulty: str = "easy"
) -> list:
    """Steps that strictly improve the running-max score, first steps excluded."""
    samples: list = []
    running_max = report.seed_eval.score
    by_iteration = {d.iteration: d for d in drafts}
    for step in report.steps:
        if not step.accepted:
            continue
        is_best = step.child_eval.score > running_max
        running_max = max(running_max, step.child_eval.score)
        if not is_best:
            continue
        draft = by_iteration[step.iteration]
        if draft.parent_is_seed:
            continue  # first-step distribution is a translation task, not optimization
        reward = 0.0
        if draft.child_correct and draft.parent_runtime_ns and draft.child_runtime_ns:
            reward = draft.parent_runtime_ns / draft.child_runtime_ns
        samples.append(_make_sample(draft, KIND_BEST_STEP, difficulty, reward=reward))
    return samples


def grpo_rewards(
    parent_eval: EvalResult,
    children_evals: list,
    group_id: str = "group-0",
    prompt_context_ref: str = "",
) -> RLGroup:
    """Per-candidate speedup ratio relative to the parent; zero for invalid children."""
    parent_runtime = _runtime_of(parent_eval)
    if parent_runtime is None:
        raise InvalidArgumentError("parent has no valid timing")
    members = []
    for child in children_evals:
        child_runtime = _runtime_of(child)
        if child.valid and child_runtime:
            reward = parent_runtime / child_runtime
        else:
            reward = 0.0
        members.append((child.candidate_id, reward))
    return RLGroup(
        group_id=group_id,
        parent_candidate_id=parent_eval.candidate_id,
        prompt_context_ref=prompt_context_ref,
        members=tuple(members),
    )


# -- difficulty bucketing ------------------------------------------------------


def load_default_vocabulary() -> frozenset:
    text = resources.files("evotune.data").joinpath("operator_vocab.txt").read_text("utf-8")
    return frozenset(line.strip() for line in text.splitlines() if line.strip())


def load_vocabulary(path: Path) -> frozenset:
    """Custom operator vocabulary: one identifier per line, blanks ignored."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return frozenset(line.strip() for line in lines if line.strip())


def bucket_difficulty(
    task: TaskSpec, reference_source: Optional[str] = None, vocabulary: Optional[frozenset] = None
) -> str:
    """Heuristic bucket from matched operator identifiers; task override wins."""
    if task.difficulty_level is not None:
        return task.difficulty_level
    if vocabulary is None:
        vocabulary = load_default_vocabulary()
    source = reference_source if reference_source is not None else task.reference_source
    matched = {tok for tok in IDENT_RE.findall(source.lower()) if tok in vocabulary}
    count = len(matched)
    if count < 3:
        return "easy"
    if count <= 7:
        return "medium"
    return "hard"


# -- assembly ------------------------------------------------------------------


def leakage_audit(samples: list, scores_by_candidate: dict) -> tuple:
    """Drop samples whose prompt context contains a program outscoring the target.

    Returns (kept, dropped); dropped samples are logged so mining stays auditable.
    """
    kept, dropped = [], []
    for sample in samples:
        leaked = [
            cid
            for cid in sample.context_candidate_ids
            if scores_by_candidate.get(cid, float("-inf")) > sample.target_score
        ]
        if leaked:
            log.warning(
                "leakage audit dropped %s: context %s outscores target %.4f",
                sample.sample_id,
                leaked,
                sample.target_score,
            )
            dropped.append(sample)
        else:
            kept.append(sample)
    return kept, dropped


def balanced_sample(samples: list, per_bucket_quota: int, seed: int = 0) -> list:
    """Uniform without-replacement draw of min(quota, available) per (kind, difficulty)."""
    if per_bucket_quota < 0:
        raise InvalidArgumentError("quota must be >= 0")
    buckets: dict = {}
    for sample in samples:
        buckets.setdefault((sample.kind, sample.difficulty), []).append(sample)
    rng = random.Random(seed)
    shard: list = []
    for key in sorted(buckets):
        pool = sorted(buckets[key], key=lambda s: s.sample_id)
        take = min(per_bucket_quota, len(pool))
        shard.extend(rng.sample(pool, take))
    return shard


def export_shard(samples: list, out_dir: Path, shard_name: str = "shard") -> Path:
    """Write one JSON object per line plus a manifest with bucket counts and digest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shard_path = out_dir / f"{shard_name}.jsonl"
    lines = [json.dumps(s.to_record(), sort_keys=True) for s in samples]
    shard_path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    counts: dict = {}
    for sample in samples:
        key = f"{sample.kind}/{sample.difficulty}"
        counts[key] = counts.get(key, 0) + 1
    manifest = {
        "shard": shard_path.name,
        "sample_count": len(samples),
        "bucket_counts": counts,
        "sha256": hashlib.sha256(shard_path.read_bytes()).hexdigest(),
    }
    (out_dir / f"{shard_name}.manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True)
    )
    return shard_path


def extract_run(
    run_dir: Path,
    out_dir: Optional[Path] = None,
    per_bucket_quota: Optional[int] = None,
    seed: int = 0,
    vocabulary: Optional[frozenset] = None,
) -> dict:
    """Full mining pipeline for one run directory; returns summary counts."""
    report, task = load_run(run_dir)
    drafts = decompose(run_dir, report)
    difficulty = bucket_difficulty(task, vocabulary=vocabulary)

    samples = (
        filter_correctness(drafts, difficulty)
        + filter_performance(drafts, difficulty)
        + select_best_steps(report, drafts, difficulty)
    )
    scores = {report.seed_candidate.candidate_id: report.seed_eval.score}
    for step in report.steps:
        if step.accepted:
            scores[step.child.candidate_id] = step.child_eval.score
    kept, dropped = leakage_audit(samples, scores)
    if per_bucket_quota is not None:
        kept = balanced_sample(kept, per_bucket_quota, seed)
    if out_dir is not None:
        export_shard(kept, out_dir, shard_name=Path(run_dir).name)
    return {
        "drafts": len(drafts),
        "samples": len(kept),
        "dropped_by_leakage": len(dropped),
        "difficulty": difficulty,
    }
