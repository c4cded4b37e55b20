"""Acceptance gate: every primary criterion at its stated tolerance and budget.

Each test prints one ``[PASS]/[FAIL] <criterion> (<elapsed>s, budget <cap>s)``
line; run with ``pytest tests/test_acceptance.py -v -s`` to watch them.
"""

from __future__ import annotations

import random
import time
from contextlib import contextmanager

import pytest
from fastapi.testclient import TestClient

from evotune.archive import ArchiveConfig, CellKey, MapElitesArchive, complexity_feature, score_bin
from evotune.controller import RunConfig
from evotune.core import EvalResult, ScoreWeights, Stage, compute_score, TimingConfig
from evotune.httpapi import create_app
from evotune.llm import ScriptEntry
from evotune.metrics import ResultRow, compute_metrics
from evotune.prompting import (
    BlockExtractionError,
    DEFAULT_END_MARKER,
    DEFAULT_START_MARKER,
    extract_evolve_block,
    locked_regions,
    merge_block,
)
from evotune.service import BackendDescriptor, EvalService
from evotune.timing import STABLE, UNSTABLE, check_stability, robust_stats
from evotune.training import grpo_rewards, leakage_audit

from conftest import make_candidate, make_result, make_task
from test_controller import HALVING_ENTRIES, run_once
from test_metrics import brute_force_oracle, random_results
from test_training import SCENARIO, synthetic_run
from evotune.training import decompose, filter_performance, load_run, select_best_steps


@contextmanager
def criterion(name: str, budget_s: float):
    started = time.perf_counter()
    failed = False
    try:
        yield
    except BaseException:
        failed = True
        raise
    finally:
        elapsed = time.perf_counter() - started
        verdict = "FAIL" if failed or elapsed >= budget_s else "PASS"
        print(f"[{verdict}] {name} ({elapsed:.2f}s, budget {budget_s:.0f}s)", flush=True)
    assert elapsed < budget_s, f"{name} exceeded runtime budget"


def test_metrics_oracle():
    with criterion("metrics oracle (200 random sets + hand vectors)", 5.0):
        rng = random.Random(2024)
        p_values = (0.0, 1.0, 2.0)
        for _ in range(200):
            rows = random_results(rng, rng.randint(1, 40))
            summary = compute_metrics(rows, p_values)
            corr, fast_p, amsr = brute_force_oracle(rows, p_values)
            assert summary.corr == corr
            assert summary.avg_amsr == amsr
            for p in p_values:
                assert summary.fast_p[p] == fast_p[p]

        hand = compute_metrics(
            [ResultRow(True, False, 2.0), ResultRow(True, False, 0.5), ResultRow(True, False, 1.5)],
            (1.0,),
        )
        assert round(hand.corr, 4) == 100.0
        assert round(hand.fast_p[1.0], 4) == round(2 / 3, 4)
        assert round(hand.avg_amsr, 4) == 1.1667

        hacked = compute_metrics([ResultRow(True, True, 1.0), ResultRow(True, False, 2.0)], (1.0,))
        assert round(hacked.corr, 4) == 50.0
        assert round(hacked.fast_p[1.0], 4) == 0.5
        assert round(hacked.avg_amsr, 4) == 1.0


def test_score_penalty_ordering():
    with criterion("score/penalty ordering (1,000 random draws)", 5.0):
        rng = random.Random(77)
        for _ in range(1000):
            weights = ScoreWeights(
                compile_credit=rng.uniform(0, 4),
                correct_credit=rng.uniform(0, 4),
                speedup_weight=rng.uniform(0, 4),
                speedup_cap=rng.uniform(1.01, 300),
            )
            not_compiled = compute_score(False, False, False, None, weights)
            compiled_bad = compute_score(True, False, False, None, weights)
            hacked = compute_score(True, True, True, None, weights)
            parity = compute_score(True, True, False, 1.0, weights)
            assert not_compiled <= compiled_bad <= parity
            assert hacked == compiled_bad

            s1 = rng.uniform(0.01, 250)
            s2 = s1 + rng.uniform(0.0, 50)
            lo = compute_score(True, True, False, s1, weights)
            hi = compute_score(True, True, False, s2, weights)
            assert lo <= hi
            if weights.speedup_weight > 0 and s2 < weights.speedup_cap and s2 > s1:
                assert lo < hi


def test_archive_elitism_and_determinism():
    with criterion("archive elitism + determinism (1,000 insertions)", 10.0):
        config = ArchiveConfig(island_count=3, complexity_bins=5, score_bins=5, rng_seed=11)
        archive = MapElitesArchive(config)
        rng = random.Random(3)
        cell_max: dict = {}
        for i in range(1000):
            cid = f"c{i}"
            source = "s" * rng.randint(1, 9000)
            island = rng.randrange(3)
            score = round(rng.uniform(0, 11), 4)
            evaluation = EvalResult(
                candidate_id=cid,
                compiled=True,
                correct=False,
                hack_detected=False,
                stage=Stage.correctness_error,
                score=score,
            )
            archive.insert(make_candidate(cid, island=island, full_source=source), evaluation, i)
            key = CellKey(island, complexity_feature(source, config), score_bin(score, config))
            cell_max[key] = max(cell_max.get(key, float("-inf")), score)
        assert archive.occupancy() == len(cell_max)
        mismatches = [k for k, e in ((k, archive._cells[k]) for k in archive._cells)
                      if e.score != cell_max[k]]
        assert mismatches == []

        def sampling_trace(seed):
            replica = MapElitesArchive(ArchiveConfig(rng_seed=seed, score_range=(0.0, 12.0)))
            for i in range(40):
                cid = f"r{i}"
                evaluation = EvalResult(
                    candidate_id=cid, compiled=True, correct=False, hack_detected=False,
                    stage=Stage.correctness_error, score=round(i * 0.27, 3) % 11,
                )
                replica.insert(make_candidate(cid, full_source="t" * (10 + 71 * i)), evaluation, i)
            trace = []
            for _ in range(50):
                trace.append(replica.sample_parent(0).candidate_id)
                picks = replica.sample_inspirations(0)
                trace.extend(p.candidate_id for p in picks)
                keys = [p.key for p in picks]
                assert len(set(keys)) == len(keys)  # diverse never repeats chosen cells
            return trace

        assert sampling_trace(42) == sampling_trace(42)


def test_evolve_block_round_trip_fuzz():
    with criterion("EVOLVE-BLOCK round-trip fuzz (1,000 pairs)", 10.0):
        rng = random.Random(13)

        def chunk():
            lines = []
            for _ in range(rng.randint(1, 8)):
                lines.append(
                    "".join(rng.choices("abcdefghij XYZ=+-#()_49 ", k=rng.randint(0, 40)))
                )
            return "\n".join(lines) + "\n"

        for _ in range(1000):
            parent = (
                chunk()
                + DEFAULT_START_MARKER
                + "\n"
                + chunk()
                + DEFAULT_END_MARKER
                + "\n"
                + chunk()
            )
            block = chunk()
            child = merge_block(parent, block)
            assert extract_evolve_block(child)["block"] == block
            assert locked_regions(child) == locked_regions(parent)

        def reason_of(text):
            with pytest.raises(BlockExtractionError) as err:
                extract_evolve_block(text)
            return err.value.reason

        assert reason_of("no markers\n") == "no_block"
        assert (
            reason_of(f"{DEFAULT_START_MARKER}\nx\n{DEFAULT_END_MARKER}\n{DEFAULT_START_MARKER}\n")
            == "ambiguous_block"
        )
        assert (
            reason_of(f"{DEFAULT_START_MARKER}\nx\n{DEFAULT_END_MARKER}\n{DEFAULT_END_MARKER}\n")
            == "ambiguous_block"
        )
        assert reason_of(f"{DEFAULT_END_MARKER}\nx\n{DEFAULT_START_MARKER}\n") == "inverted_markers"


def test_robust_timing():
    with criterion("robust timing (IQR trim + stability gate)", 1.0):
        stats = robust_stats([100, 102, 98, 101, 99, 1000])
        assert stats.dropped_count == 1
        assert stats.trimmed_mean == 100.0

        pair = robust_stats([5, 7])
        assert pair.kept_count == 2
        assert pair.trimmed_mean == 6.0

        config = TimingConfig(stability_threshold=0.01)

        def gate(cv):
            base = robust_stats([100.0, 100.0])
            from dataclasses import replace

            return check_stability(replace(base, std_dev=cv * 100.0, cv=cv), config)

        assert gate(0.005) == STABLE
        assert gate(0.010) == STABLE
        assert gate(0.011) == UNSTABLE


def test_end_to_end_mock_evolution(tmp_path):
    with criterion("end-to-end mock evolution (halving runtimes + all-reject)", 30.0):
        dir_a, dir_b = tmp_path / "a", tmp_path / "b"
        report = run_once(HALVING_ENTRIES, iterations=3, run_dir=dir_a)
        accepted = [s for s in report.steps if s.accepted]
        assert len(accepted) == 3
        scores = [s.child_eval.score for s in accepted]
        assert all(b > a for a, b in zip(scores, scores[1:]))
        assert report.final_best["speedup"] == 8.0  # exact: zero-noise simulated backend
        curve = [s for _, s in report.best_score_curve]
        assert all(b >= a for a, b in zip(curve, curve[1:]))

        run_once(HALVING_ENTRIES, iterations=3, run_dir=dir_b)
        assert (dir_a / "run.json").read_bytes() == (dir_b / "run.json").read_bytes()

        reject = run_once(
            [ScriptEntry(response="no block here") for _ in range(5)], iterations=5
        )
        assert sum(1 for s in reject.steps if s.accepted) == 0
        assert [s for _, s in reject.best_score_curve] == [reject.seed_eval.score] * 6


def test_training_extraction(tmp_path):
    with criterion("training extraction (best steps, filters, leakage, GRPO)", 5.0):
        run_dir = synthetic_run(tmp_path, SCENARIO)
        report, _ = load_run(run_dir)
        drafts = decompose(run_dir)

        best = select_best_steps(report, drafts)
        assert [s.iteration for s in best] == [3]

        perf = filter_performance(drafts)
        assert [s.iteration for s in perf] == [2, 3, 4]
        assert all(s.kind == "performance_sft" for s in perf)

        leaky = synthetic_run(
            tmp_path,
            [
                {"score": 4.0, "speedup": 2.0, "parent": "seed", "runtime": 50.0,
                 "context": ("child-2",)},
                {"score": 6.0, "speedup": 4.0, "parent": 1, "runtime": 25.0},
            ],
            run_name="leaky",
        )
        leaky_report, _ = load_run(leaky)
        leaky_drafts = decompose(leaky)
        from evotune.training import filter_correctness

        samples = filter_correctness(leaky_drafts) + filter_performance(leaky_drafts)
        scores = {"seed-cand": 3.0, "child-1": 4.0, "child-2": 6.0}
        kept, dropped = leakage_audit(samples, scores)
        assert len(dropped) == 1
        assert dropped[0].iteration == 1

        parent = make_result("parent", candidate_mean=100.0)
        children = [
            make_result("a", candidate_mean=50.0, speedup=2.0),
            make_result("b", stage=Stage.correctness_error, score=1.0),
            make_result("c", candidate_mean=100.0, speedup=1.0),
        ]
        group = grpo_rewards(parent, children)
        assert [r for _, r in group.members] == [2.0, 0.0, 1.0]


def test_service_contract():
    with criterion("service contract (sync == async across 8 jobs)", 30.0):
        service = EvalService(parallelism=2, queue_limit=32)
        service.register_backend(BackendDescriptor(backend_id="simulated", kind="simulated"))
        with TestClient(create_app(service)) as client:
            task = make_task()
            bodies = [
                {
                    "task": task.to_record(),
                    "candidate": make_candidate(
                        f"c{i}", full_source=f"# sim: runtime_ns={5 * (i + 1)}\n"
                    ).to_record(),
                }
                for i in range(8)
            ]
            sync_results = [client.post("/v1/evaluate", json=b).json() for b in bodies]
            job_ids = [client.post("/v1/jobs", json=b).json()["job_id"] for b in bodies]
            deadline = time.monotonic() + 20
            results = {}
            while len(results) < 8 and time.monotonic() < deadline:
                for job_id in job_ids:
                    if job_id in results:
                        continue
                    job = client.get(f"/v1/jobs/{job_id}").json()
                    if job["state"] == "done":
                        results[job_id] = job["result"]
                time.sleep(0.01)
            assert len(results) == 8
            for job_id, sync in zip(job_ids, sync_results):
                assert results[job_id] == sync
        service.shutdown()
