"""Benchmark-suite execution, curve/figure exports, and run re-scoring."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .configio import load_task, run_config
from .controller import EvolutionController, RunConfig, RunReport
from .core import EvalResult, InvalidArgumentError, ScoreWeights, Stage, compute_score
from .llm import AuditLog, LLMClient, scripted_mock
from .metrics import DEFAULT_P_VALUES, MetricsSummary, ResultRow, compute_metrics
from .service import BackendDescriptor, EvalService


@dataclass(frozen=True)
class SuiteTaskResult:
    task_id: str
    level: str
    run_dir: str
    best_result: Optional[EvalResult]  # None on infrastructure failure
    error: Optional[str] = None

    def to_record(self) -> dict:
        return {
            "task_id": self.task_id,
            "level": self.level,
            "run_dir": self.run_dir,
            "best_result": self.best_result.to_record() if self.best_result else None,
            "error": self.error,
        }


@dataclass(frozen=True)
class SuiteResult:
    tasks: tuple
    per_level: dict  # level -> MetricsSummary
    overall: Optional[MetricsSummary]

    def to_record(self) -> dict:
        return {
            "tasks": [t.to_record() for t in self.tasks],
            "per_level": {k: v.to_record() for k, v in sorted(self.per_level.items())},
            "overall": self.overall.to_record() if self.overall else None,
        }


def best_result_of(report: RunReport) -> EvalResult:
    """EvalResult of the run's best-scoring candidate (seed included)."""
    best_id = report.final_best["candidate_id"]
    if report.seed_candidate is not None and best_id == report.seed_candidate.candidate_id:
        return report.seed_eval
    for step in report.steps:
        if step.accepted and step.child.candidate_id == best_id:
            return step.child_eval
    raise InvalidArgumentError(f"best candidate {best_id} not found in report")


def _result_row(result: EvalResult) -> ResultRow:
    return ResultRow(
        correct=result.correct,
        hack_detected=result.hack_detected,
        speedup=result.speedup,
    )


def run_suite(
    manifest_entries: list,
    config: dict,
    out_dir: Path,
    parallelism: int = 1,
    p_values=DEFAULT_P_VALUES,
    provider_factory=None,
    clock=None,
) -> SuiteResult:
    """Run the evolution controller per manifest task and aggregate metrics.

    ``provider_factory(task, mock_script)`` builds the LLM provider per task;
    the default replays the task file's embedded mock script.
    """
    if not manifest_entries:
        raise InvalidArgumentError("suite manifest lists no tasks")
    out_dir = Path(out_dir)
    runs_dir = out_dir / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)

    service = EvalService(
        weights=ScoreWeights(**config["weights"]),
        parallelism=int(config["service"]["parallelism"]),
        queue_limit=int(config["service"]["queue_limit"]),
    )
    service.register_backend(BackendDescriptor(backend_id="simulated", kind="simulated"))

    def one_task(entry: dict) -> SuiteTaskResult:
        task, mock_script = load_task(entry["file"])
        level = entry.get("level") or task.difficulty_level or "easy"
        run_dir = runs_dir / task.task_id
        rel_dir = str(Path("runs") / task.task_id)  # stable across output roots
        try:
            if provider_factory is not None:
                provider = provider_factory(task, mock_script)
            else:
                if not mock_script:
                    raise InvalidArgumentError(
                        f"task {task.task_id} has no llm_mock_script and no provider was supplied"
                    )
                provider = scripted_mock(mock_script)
            client = LLMClient(provider, audit_log=AuditLog(run_dir / "audit.jsonl"))
            controller_kwargs = {} if clock is None else {"clock": clock}
            controller = EvolutionController(
                service, client, run_dir=run_dir, **controller_kwargs
            )
            report = controller.run(task, run_config(config))
            return SuiteTaskResult(
                task_id=task.task_id,
                level=level,
                run_dir=rel_dir,
                best_result=best_result_of(report),
            )
        except Exception as exc:  # infrastructure failure: record and continue
            return SuiteTaskResult(
                task_id=task.task_id,
                level=level,
                run_dir=rel_dir,
                best_result=None,
                error=f"{type(exc).__name__}: {exc}",
            )

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            tasks = list(pool.map(one_task, manifest_entries))
    else:
        tasks = [one_task(entry) for entry in manifest_entries]
    tasks.sort(key=lambda t: t.task_id)

    completed = [t for t in tasks if t.best_result is not None]
    per_level: dict = {}
    for level in sorted({t.level for t in completed}):
        rows = [_result_row(t.best_result) for t in completed if t.level == level]
        per_level[level] = compute_metrics(rows, p_values)
    overall = (
        compute_metrics([_result_row(t.best_result) for t in completed], p_values)
        if completed
        else None
    )
    suite = SuiteResult(tasks=tuple(tasks), per_level=per_level, overall=overall)
    (out_dir / "suite.json").write_text(json.dumps(suite.to_record(), indent=2, sort_keys=True))
    service.shutdown()
    return suite


# -- curve exports ---------------------------------------------------------------


def load_report(run_dir: Path) -> RunReport:
    return RunReport.from_record(json.loads((Path(run_dir) / "run.json").read_text()))


def export_curves(run_dirs: list, out_dir: Path) -> list:
    """Per-task (iteration, best_score, best_speedup) CSVs plus one aggregate CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list = []
    aggregate_rows: list = []

    for run_dir in sorted(Path(d) for d in run_dirs):
        report = load_report(run_dir)
        speedups = dict(report.best_speedup_curve)
        path = out_dir / f"{report.task_id}_curve.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "best_score", "best_speedup"])
            for iteration, score in report.best_score_curve:
                writer.writerow(
                    [iteration, f"{score:.6f}", f"{speedups.get(iteration, 0.0):.6f}"]
                )
        written.append(path)
        for iteration, score in report.best_score_curve:
            aggregate_rows.append(
                (report.task_id, iteration, score, speedups.get(iteration, 0.0))
            )

    aggregate = out_dir / "curves_aggregate.csv"
    aggregate_rows.sort(key=lambda r: (r[0], r[1]))
    with aggregate.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_id", "iteration", "best_score", "best_speedup"])
        for task_id, iteration, score, speedup in aggregate_rows:
            writer.writerow([task_id, iteration, f"{score:.6f}", f"{speedup:.6f}"])
    written.append(aggregate)
    return written


def render_figures(run_dirs: list, out_dir: Path) -> list:
    """Best-score and speedup-growth figures (PNG) alongside the CSV exports."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list = []
    reports = [load_report(d) for d in sorted(Path(d) for d in run_dirs)]

    for report in reports:
        fig, (ax_score, ax_speed) = plt.subplots(1, 2, figsize=(10, 4))
        xs = [i for i, _ in report.best_score_curve]
        ax_score.plot(xs, [s for _, s in report.best_score_curve], marker="o")
        ax_score.set_xlabel("iteration")
        ax_score.set_ylabel("best score")
        ax_score.set_title(f"{report.task_id}: best score")
        ax_score.grid(True, linestyle="--", alpha=0.5)
        ax_speed.plot(
            [i for i, _ in report.best_speedup_curve],
            [s for _, s in report.best_speedup_curve],
            marker="o",
            color="tab:green",
        )
        ax_speed.set_xlabel("iteration")
        ax_speed.set_ylabel("best speedup")
        ax_speed.set_title(f"{report.task_id}: speedup growth")
        ax_speed.grid(True, linestyle="--", alpha=0.5)
        fig.tight_layout()
        path = out_dir / f"{report.task_id}_curves.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    if reports:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for report in reports:
            ax.plot(
                [i for i, _ in report.best_score_curve],
                [s for _, s in report.best_score_curve],
                marker=".",
                label=report.task_id,
            )
        ax.set_xlabel("iteration")
        ax.set_ylabel("best score")
        ax.set_title("best-score trajectories")
        ax.legend(fontsize=8)
        ax.grid(True, linestyle="--", alpha=0.5)
        fig.tight_layout()
        path = out_dir / "suite_curves.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


# -- replay ------------------------------------------------------------------------


def replay_run(run_dir: Path, weights: ScoreWeights) -> dict:
    """Re-score a persisted run under new weights without re-evaluating anything."""
    report = load_report(run_dir)

    def rescore(result: EvalResult) -> float:
        if result.stage == Stage.unstable_timing:
            return weights.compile_credit + weights.correct_credit
        return compute_score(
            result.compiled, result.correct, result.hack_detected, result.speedup, weights
        )

    seed_score = rescore(report.seed_eval)
    best = seed_score
    curve = [(0, best)]
    rescored_steps = []
    for step in report.steps:
        if step.accepted:
            new_score = rescore(step.child_eval)
            rescored_steps.append(
                {"iteration": step.iteration, "candidate_id": step.child.candidate_id, "score": new_score}
            )
            best = max(best, new_score)
        curve.append((step.iteration, best))
    replayed = {
        "task_id": report.task_id,
        "weights": weights.to_record(),
        "seed_score": seed_score,
        "steps": rescored_steps,
        "best_score_curve": [list(p) for p in curve],
        "final_best_score": best,
    }
    out_path = Path(run_dir) / "replay.json"
    out_path.write_text(json.dumps(replayed, indent=2, sort_keys=True))
    return replayed
