"""Evolution loop for one task: seed, iterate, record the trajectory, stop on budget."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .archive import ArchiveConfig, MapElitesArchive
from .core import (
    CandidateProgram,
    EvalResult,
    InvalidArgumentError,
    TaskSpec,
    utcnow,
)
from .llm import DecodingConfig, LLMClient, prompt_digest
from .prompting import (
    BlockExtractionError,
    BlockMarkers,
    PromptDraft,
    enforce_token_budget,
    extract_evolve_block,
    locked_regions,
    merge_block,
    render_system_prompt,
    wrap_in_block,
)

REJECT_NO_BLOCK = "no_block"
REJECT_AMBIGUOUS = "ambiguous_block"
REJECT_INVERTED = "inverted_markers"
REJECT_LOCKED = "locked_region_violation"
REJECT_TRUNCATED = "output_truncated"


@dataclass(frozen=True)
class RunConfig:
    iterations: int = 40
    decoding: DecodingConfig = DecodingConfig()
    archive: ArchiveConfig = ArchiveConfig()
    input_token_cap: int = 32768
    seed: int = 0
    stop_on_score: Optional[float] = None
    history_k: int = 3

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise InvalidArgumentError("iterations must be >= 1")

    def to_record(self) -> dict:
        return {
            "iterations": self.iterations,
            "decoding": self.decoding.to_record(),
            "archive": self.archive.to_record(),
            "input_token_cap": self.input_token_cap,
            "seed": self.seed,
            "stop_on_score": self.stop_on_score,
            "history_k": self.history_k,
        }


@dataclass(frozen=True)
class TrajectoryStep:
    iteration: int
    island: int
    parent_id: str
    inspiration_ids: tuple
    prompt_hash: str
    generation_ref: str
    child: Optional[CandidateProgram] = None
    child_eval: Optional[EvalResult] = None
    rejection_reason: Optional[str] = None

    def __post_init__(self) -> None:
        accepted = self.child is not None and self.child_eval is not None
        rejected = self.rejection_reason is not None
        if accepted == rejected:
            raise InvalidArgumentError("step must be exactly one of accepted or rejected")

    @property
    def accepted(self) -> bool:
        return self.child is not None

    def to_record(self) -> dict:
        return {
            "iteration": self.iteration,
            "island": self.island,
            "parent_id": self.parent_id,
            "inspiration_ids": list(self.inspiration_ids),
            "prompt_hash": self.prompt_hash,
            "generation_ref": self.generation_ref,
            "child": self.child.to_record() if self.child else None,
            "child_eval": self.child_eval.to_record() if self.child_eval else None,
            "rejection_reason": self.rejection_reason,
        }

    @classmethod
    def from_record(cls, record: dict) -> "TrajectoryStep":
        return cls(
            iteration=int(record["iteration"]),
            island=int(record["island"]),
            parent_id=record["parent_id"],
            inspiration_ids=tuple(record.get("inspiration_ids", [])),
            prompt_hash=record["prompt_hash"],
            generation_ref=record["generation_ref"],
            child=CandidateProgram.from_record(record["child"]) if record.get("child") else None,
            child_eval=EvalResult.from_record(record["child_eval"])
            if record.get("child_eval")
            else None,
            rejection_reason=record.get("rejection_reason"),
        )


@dataclass(frozen=True)
class RunReport:
    task_id: str
    steps: tuple
    best_score_curve: tuple  # ((iteration, running max score), ...), seed included
    best_speedup_curve: tuple
    final_best: dict
    wall_clock_s: float
    seed_candidate: Optional[CandidateProgram] = None
    seed_eval: Optional[EvalResult] = None

    def __post_init__(self) -> None:
        scores = [s for _, s in self.best_score_curve]
        if any(b < a for a, b in zip(scores, scores[1:])):
            raise InvalidArgumentError("best_score_curve must be non-decreasing")
        if len(self.best_score_curve) != len(self.steps) + 1:
            raise InvalidArgumentError("curve must cover the seed plus every step")

    def to_record(self) -> dict:
        return {
            "task_id": self.task_id,
            "steps": [s.to_record() for s in self.steps],
            "best_score_curve": [list(p) for p in self.best_score_curve],
            "best_speedup_curve": [list(p) for p in self.best_speedup_curve],
            "final_best": dict(self.final_best),
            "wall_clock_s": self.wall_clock_s,
            "seed_candidate": self.seed_candidate.to_record() if self.seed_candidate else None,
            "seed_eval": self.seed_eval.to_record() if self.seed_eval else None,
        }

    @classmethod
    def from_record(cls, record: dict) -> "RunReport":
        return cls(
            task_id=record["task_id"],
            steps=tuple(TrajectoryStep.from_record(s) for s in record["steps"]),
            best_score_curve=tuple(tuple(p) for p in record["best_score_curve"]),
            best_speedup_curve=tuple(tuple(p) for p in record["best_speedup_curve"]),
            final_best=dict(record["final_best"]),
            wall_clock_s=float(record["wall_clock_s"]),
            seed_candidate=CandidateProgram.from_record(record["seed_candidate"])
            if record.get("seed_candidate")
            else None,
            seed_eval=EvalResult.from_record(record["seed_eval"])
            if record.get("seed_eval")
            else None,
        )


def best_score_curve(report: RunReport) -> list:
    """Recompute the running-max series from the persisted steps."""
    points = [(0, report.seed_eval.score)]
    best = report.seed_eval.score
    for step in report.steps:
        if step.accepted:
            best = max(best, step.child_eval.score)
        points.append((step.iteration, best))
    return points


class EvolutionController:
    """Runs one task's evolution against an evaluator and an LLM client."""

    def __init__(
        self,
        evaluator,
        llm_client: LLMClient,
        markers: BlockMarkers = BlockMarkers(),
        clock: Callable = utcnow,
        run_dir: Optional[Path] = None,
    ):
        self.evaluator = evaluator
        self.llm = llm_client
        self.markers = markers
        self.clock = clock
        self.run_dir = Path(run_dir) if run_dir else None

    # -- seeding ---------------------------------------------------------

    def seed_run(self, task: TaskSpec, config: RunConfig, archive: MapElitesArchive):
        """Wrap the reference into the initial block, evaluate, occupy every island."""
        seed = CandidateProgram(
            candidate_id=f"{task.task_id}-seed",
            task_id=task.task_id,
            parent_id=None,
            generation=0,
            island=0,
            full_source=wrap_in_block(task.reference_source, self.markers),
            evolve_block=extract_evolve_block(
                wrap_in_block(task.reference_source, self.markers), self.markers
            )["block"],
            model_id="reference",
            prompt_hash="",
            created_at=self.clock(),
        )
        evaluation = self.evaluator.evaluate(task, seed)
        for island in range(config.archive.island_count):
            archive.insert(seed, evaluation, iteration=0, island=island)
        return seed, evaluation

    # -- main loop ---------------------------------------------------------

    def run(self, task: TaskSpec, config: RunConfig) -> RunReport:
        started = self.clock()
        archive = MapElitesArchive(config.archive)
        seed, seed_eval = self.seed_run(task, config, archive)
        evals: dict = {seed.candidate_id: seed_eval}
        history: dict = {i: [] for i in range(config.archive.island_count)}

        system_text = render_system_prompt(
            task, seed_eval.hardware_metadata, markers=self.markers
        )
        if self.run_dir:
            self._persist_seed(system_text, seed, seed_eval)

        steps: list = []
        best_score = seed_eval.score
        best_speedup = seed_eval.speedup if seed_eval.valid and seed_eval.speedup else 0.0
        score_curve = [(0, best_score)]
        speedup_curve = [(0, best_speedup)]

        if config.stop_on_score is None or best_score < config.stop_on_score:
            for iteration in range(1, config.iterations + 1):
                archive.migrate(iteration)
                island = (iteration - 1) % config.archive.island_count
                step = self._step(task, config, archive, evals, history, system_text, iteration, island)
                steps.append(step)
                if step.accepted:
                    best_score = max(best_score, step.child_eval.score)
                    if step.child_eval.valid and step.child_eval.speedup:
                        best_speedup = max(best_speedup, step.child_eval.speedup)
                score_curve.append((iteration, best_score))
                speedup_curve.append((iteration, best_speedup))
                if self.run_dir:
                    self._persist_step(step)
                if config.stop_on_score is not None and best_score >= config.stop_on_score:
                    break

        if self.run_dir:
            (self.run_dir / "task.json").write_text(
                json.dumps(task.to_record(), indent=2, sort_keys=True)
            )
        final = self._final_best(seed, seed_eval, steps)
        report = RunReport(
            task_id=task.task_id,
            steps=tuple(steps),
            best_score_curve=tuple(score_curve),
            best_speedup_curve=tuple(speedup_curve),
            final_best=final,
            wall_clock_s=(self.clock() - started).total_seconds(),
            seed_candidate=seed,
            seed_eval=seed_eval,
        )
        if self.run_dir:
            self._persist_report(report, archive)
        return report

    def _step(self, task, config, archive, evals, history, system_text, iteration, island):
        parent = archive.sample_parent(island)
        parent_eval = evals[parent.candidate_id]
        inspirations = archive.sample_inspirations(island)
        top_pairs = tuple(
            (archive.candidate(e.candidate_id), evals[e.candidate_id])
            for e in inspirations
            if e.candidate_id != parent.candidate_id
        )
        previous_pairs = tuple(history[island][-config.history_k :])

        bundle = enforce_token_budget(
            PromptDraft(
                system_text=system_text,
                target_class=task.target_class_name,
                current=parent,
                current_eval=parent_eval,
                previous=previous_pairs,
                top=top_pairs,
            ),
            cap=config.input_token_cap,
        )
        context_ids = tuple(dict.fromkeys(bundle.included_top + bundle.included_previous))
        record = self.llm.complete(bundle.system_text, bundle.user_text, config.decoding)
        base = dict(
            iteration=iteration,
            island=island,
            parent_id=parent.candidate_id,
            inspiration_ids=context_ids,
            prompt_hash=prompt_digest(bundle.system_text, bundle.user_text),
            generation_ref=record.prompt_hash,
        )
        # Stashed for persistence next to the step record.
        self._user_prompt = bundle.user_text
        self._raw_generation = record.output_text

        if record.truncated:
            return TrajectoryStep(rejection_reason=REJECT_TRUNCATED, **base)
        try:
            extracted = extract_evolve_block(record.output_text, self.markers)
        except BlockExtractionError as exc:
            return TrajectoryStep(rejection_reason=exc.reason, **base)

        # The locked region of the model's own full program must match the parent's.
        try:
            model_locked = locked_regions(extracted["full_program"], self.markers)
        except Exception:
            model_locked = None
        if model_locked is not None and model_locked != locked_regions(parent.full_source, self.markers):
            return TrajectoryStep(rejection_reason=REJECT_LOCKED, **base)

        child_source = merge_block(parent.full_source, extracted["block"], self.markers)
        child = CandidateProgram(
            candidate_id=f"{task.task_id}-{iteration:04d}",
            task_id=task.task_id,
            parent_id=parent.candidate_id,
            generation=parent.generation + 1,
            island=island,
            full_source=child_source,
            evolve_block=extract_evolve_block(child_source, self.markers)["block"],
            model_id=config.decoding.model_id,
            prompt_hash=base["prompt_hash"],
            created_at=self.clock(),
        )
        child_eval = self.evaluator.evaluate(task, child)
        archive.insert(child, child_eval, iteration=iteration)
        evals[child.candidate_id] = child_eval
        history[island].append((child, child_eval))
        return TrajectoryStep(child=child, child_eval=child_eval, **base)

    @staticmethod
    def _final_best(seed, seed_eval, steps) -> dict:
        best_id, best_score, best_speedup = seed.candidate_id, seed_eval.score, seed_eval.speedup
        for step in steps:
            if step.accepted and step.child_eval.score > best_score:
                best_id = step.child.candidate_id
                best_score = step.child_eval.score
                best_speedup = step.child_eval.speedup
        return {"candidate_id": best_id, "score": best_score, "speedup": best_speedup}

    # -- persistence ---------------------------------------------------------

    def _persist_seed(self, system_text, seed, seed_eval) -> None:
        root = self.run_dir
        (root / "seed").mkdir(parents=True, exist_ok=True)
        (root / "system_prompt.txt").write_text(system_text, encoding="utf-8")
        (root / "seed" / "candidate.txt").write_text(seed.full_source, encoding="utf-8")
        (root / "seed" / "eval.json").write_text(
            json.dumps(seed_eval.to_record(), indent=2, sort_keys=True)
        )

    def _persist_step(self, step: TrajectoryStep) -> None:
        step_dir = self.run_dir / "steps" / f"{step.iteration:03d}"
        step_dir.mkdir(parents=True, exist_ok=True)
        (step_dir / "prompt.txt").write_text(self._user_prompt, encoding="utf-8")
        (step_dir / "generation.txt").write_text(self._raw_generation, encoding="utf-8")
        if step.child is not None:
            (step_dir / "candidate.txt").write_text(step.child.full_source, encoding="utf-8")
            (step_dir / "eval.json").write_text(
                json.dumps(step.child_eval.to_record(), indent=2, sort_keys=True)
            )

    def _persist_report(self, report: RunReport, archive: MapElitesArchive) -> None:
        root = self.run_dir
        root.mkdir(parents=True, exist_ok=True)
        (root / "run.json").write_text(
            json.dumps(report.to_record(), indent=2, sort_keys=True)
        )
        archive.save(root / "archive.json")
        _write_curve(root / "score_curve.csv", "best_score", report.best_score_curve)
        _write_curve(root / "speedup_curve.csv", "best_speedup", report.best_speedup_curve)


def _write_curve(path: Path, column: str, points) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", column])
        for iteration, value in points:
            writer.writerow([iteration, f"{value:.6f}"])
