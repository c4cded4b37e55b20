"""Command-line entry point: run / suite / serve / extract / report / replay."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import configio
from .controller import EvolutionController
from .core import InvalidArgumentError, ScoreWeights
from .llm import AuditLog, HttpChatProvider, LLMClient, scripted_mock
from .service import BackendDescriptor, EvalService
from .suite import (
    best_result_of,
    export_curves,
    render_figures,
    replay_run,
    run_suite,
)
from .training import extract_run

EXIT_OK = 0
EXIT_CANDIDATE_FAILURES = 1
EXIT_INFRASTRUCTURE = 2


def _global_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="config YAML file")
    parser.add_argument("--seed", type=int, default=None, help="override run seed")
    parser.add_argument("--backend", default=None, help="override task backend id")
    parser.add_argument("--parallelism", type=int, default=None, help="worker/suite parallelism")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evotune",
        description="Evolutionary program-optimization harness with archived candidates "
        "and structured execution feedback.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="evolve a single task")
    p_run.add_argument("task_file", type=Path)
    p_run.add_argument("--out", type=Path, required=True, help="run directory")
    p_run.add_argument("--iterations", type=int, default=None)
    _global_flags(p_run)

    p_suite = sub.add_parser("suite", help="run every task in a manifest")
    p_suite.add_argument("manifest", type=Path)
    p_suite.add_argument("--out", type=Path, required=True)
    _global_flags(p_suite)

    p_serve = sub.add_parser("serve", help="start the evaluation HTTP service")
    p_serve.add_argument("--port", type=int, default=None)
    p_serve.add_argument("--host", default="127.0.0.1")
    _global_flags(p_serve)

    p_extract = sub.add_parser("extract", help="mine training samples from run dirs")
    p_extract.add_argument("run_dirs", type=Path, nargs="+")
    p_extract.add_argument("--out", type=Path, required=True)
    p_extract.add_argument("--quota", type=int, default=None, help="per-bucket sample quota")
    p_extract.add_argument(
        "--vocab", type=Path, default=None, help="operator vocabulary file, one identifier per line"
    )
    _global_flags(p_extract)

    p_report = sub.add_parser("report", help="metrics, curve CSVs, and figures from runs")
    p_report.add_argument("run_dirs", type=Path, nargs="+")
    p_report.add_argument("--out", type=Path, required=True)
    p_report.add_argument("--no-figures", action="store_true")
    _global_flags(p_report)

    p_replay = sub.add_parser("replay", help="re-score a persisted run under new weights")
    p_replay.add_argument("run_dir", type=Path)
    _global_flags(p_replay)

    return parser


def _provider(config: dict, mock_script):
    section = config["provider"]
    if section["kind"] == "mock":
        if not mock_script:
            raise InvalidArgumentError("provider kind 'mock' needs an llm_mock_script in the task file")
        return scripted_mock(mock_script)
    if section["kind"] == "http":
        return HttpChatProvider(
            endpoint=section["endpoint"],
            credential_env=section["credential_env"],
            timeout_s=float(section["timeout_s"]),
        )
    raise InvalidArgumentError(f"unknown provider kind {section['kind']!r}")


def _build_service(config: dict, parallelism=None) -> EvalService:
    service = EvalService(
        weights=ScoreWeights(**config["weights"]),
        parallelism=int(parallelism or config["service"]["parallelism"]),
        queue_limit=int(config["service"]["queue_limit"]),
    )
    for descriptor in configio.load_backends(config["service"]["backends_file"] or None):
        service.register_backend(descriptor)
    if "simulated" not in {d.backend_id for d in service.backends()}:
        service.register_backend(BackendDescriptor(backend_id="simulated", kind="simulated"))
    return service


def cmd_run(args) -> int:
    config = configio.load_config(args.config)
    if args.iterations:
        config["run"]["iterations"] = args.iterations
    task, mock_script = configio.load_task(args.task_file, backend_override=args.backend)
    service = _build_service(config, args.parallelism)
    client = LLMClient(
        _provider(config, mock_script),
        audit_log=AuditLog(args.out / "audit.jsonl"),
        max_attempts=int(config["provider"]["max_attempts"]),
        backoff_base_s=float(config["provider"]["backoff_base_s"]),
    )
    controller = EvolutionController(service, client, run_dir=args.out)
    report = controller.run(task, configio.run_config(config, seed=args.seed))
    best = report.final_best
    print(f"[{task.task_id}] steps={len(report.steps)} best_score={best['score']:.4f} "
          f"best_speedup={best['speedup'] if best['speedup'] is not None else 'n/a'}")
    print(f"[{task.task_id}] run artifacts in {args.out}")
    service.shutdown()
    return EXIT_OK if best_result_of(report).valid else EXIT_CANDIDATE_FAILURES


def cmd_suite(args) -> int:
    config = configio.load_config(args.config)
    manifest = configio.load_manifest(args.manifest)
    config = configio.deep_merge(config, manifest["config"])
    if args.seed is not None:
        config["run"]["seed"] = args.seed
    suite = run_suite(
        manifest["entries"],
        config,
        out_dir=args.out,
        parallelism=args.parallelism or 1,
    )
    run_dirs = [args.out / t.run_dir for t in suite.tasks if t.best_result is not None]
    if run_dirs:
        export_curves(run_dirs, args.out / "curves")
        render_figures(run_dirs, args.out / "figures")

    for level, summary in sorted(suite.per_level.items()):
        fast1 = summary.fast_p.get(1.0, 0.0)
        print(f"level={level:8s} corr={summary.corr:6.2f} fast_1={fast1:.2f} "
              f"avg_amsr={summary.avg_amsr:.4f} tasks={summary.task_count}")
    if suite.overall:
        fast1 = suite.overall.fast_p.get(1.0, 0.0)
        print(f"overall       corr={suite.overall.corr:6.2f} fast_1={fast1:.2f} "
              f"avg_amsr={suite.overall.avg_amsr:.4f} tasks={suite.overall.task_count}")

    if any(t.error for t in suite.tasks):
        return EXIT_INFRASTRUCTURE
    if any(t.best_result is not None and not t.best_result.valid for t in suite.tasks):
        return EXIT_CANDIDATE_FAILURES
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .httpapi import create_app

    config = configio.load_config(args.config)
    service = _build_service(config, args.parallelism)
    port = int(args.port or config["service"]["port"])
    uvicorn.run(create_app(service), host=args.host, port=port, log_level="info")
    return EXIT_OK


def cmd_extract(args) -> int:
    from .training import load_vocabulary

    config = configio.load_config(args.config)
    seed = args.seed if args.seed is not None else int(config["run"]["seed"])
    vocabulary = load_vocabulary(args.vocab) if args.vocab else None
    totals = {"drafts": 0, "samples": 0, "dropped_by_leakage": 0}
    for run_dir in args.run_dirs:
        summary = extract_run(
            run_dir,
            out_dir=args.out,
            per_bucket_quota=args.quota,
            seed=seed,
            vocabulary=vocabulary,
        )
        for key in totals:
            totals[key] += summary[key]
        print(f"[{Path(run_dir).name}] drafts={summary['drafts']} samples={summary['samples']} "
              f"leakage_dropped={summary['dropped_by_leakage']} difficulty={summary['difficulty']}")
    print(f"[total] drafts={totals['drafts']} samples={totals['samples']} "
          f"leakage_dropped={totals['dropped_by_leakage']} -> {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .metrics import compute_metrics
    from .suite import load_report

    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    reports = []
    for run_dir in args.run_dirs:
        report = load_report(run_dir)
        reports.append((run_dir, report))
        result = best_result_of(report)
        rows.append(
            {
                "correct": result.correct,
                "hack_detected": result.hack_detected,
                "speedup": result.speedup,
            }
        )
    from .metrics import ResultRow

    summary = compute_metrics([ResultRow(**r) for r in rows])
    (args.out / "metrics.json").write_text(json.dumps(summary.to_record(), indent=2, sort_keys=True))
    export_curves([d for d, _ in reports], args.out / "curves")
    if not args.no_figures:
        render_figures([d for d, _ in reports], args.out / "figures")
    fast1 = summary.fast_p.get(1.0, 0.0)
    print(f"tasks={summary.task_count} corr={summary.corr:.2f} fast_1={fast1:.2f} "
          f"avg_amsr={summary.avg_amsr:.4f}")
    print(f"reports in {args.out}")
    return EXIT_OK


def cmd_replay(args) -> int:
    config = configio.load_config(args.config)
    replayed = replay_run(args.run_dir, ScoreWeights(**config["weights"]))
    print(f"[{replayed['task_id']}] replayed final_best_score={replayed['final_best_score']:.4f} "
          f"(seed {replayed['seed_score']:.4f}) -> {Path(args.run_dir) / 'replay.json'}")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "suite": cmd_suite,
    "serve": cmd_serve,
    "extract": cmd_extract,
    "report": cmd_report,
    "replay": cmd_replay,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (InvalidArgumentError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFRASTRUCTURE
    except Exception as exc:  # infrastructure failures map to exit code 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INFRASTRUCTURE


if __name__ == "__main__":
    sys.exit(main())
