from __future__ import annotations

import json
import textwrap
from pathlib import Path

import pytest
import yaml

from evotune import cli
from evotune.configio import apply_env_overrides, load_config, load_manifest, load_task
from evotune.core import InvalidArgumentError, ScoreWeights
from evotune.prompting import wrap_in_block
from evotune.suite import load_report, replay_run, run_suite

REFERENCE = "def run(x):\n    return x + 1\n"


def block_response(body: str) -> str:
    return wrap_in_block(body if body.endswith("\n") else body + "\n")


def write_task(path: Path, task_id: str, runtime_ns: float, level="easy", default_rule=None):
    spec = {"baseline_runtime_ns": 100.0, "noise_cv": 0.0}
    if default_rule:
        spec["default"] = default_rule
    doc = {
        "task_id": task_id,
        "level": level,
        "backend_id": "simulated",
        "target_class_name": "ModelNew",
        "reference_source": REFERENCE,
        "test_input_spec": spec,
        "llm_mock_script": [
            {"match": "any", "response": block_response(f"# sim: runtime_ns={runtime_ns}\n")}
        ],
    }
    path.write_text(yaml.safe_dump(doc))
    return path


def write_manifest(path: Path, task_files, iterations=1):
    doc = {
        "tasks": [{"file": str(f.name), "level": lvl} for f, lvl in task_files],
        "config": {"run": {"iterations": iterations}},
    }
    path.write_text(yaml.safe_dump(doc))
    return path


@pytest.fixture()
def two_task_suite(tmp_path):
    fast = write_task(tmp_path / "fast.yaml", "fast-task", 50.0, level="easy")
    slow = write_task(tmp_path / "slow.yaml", "slow-task", 200.0, level="medium")
    manifest = write_manifest(tmp_path / "suite.yaml", [(fast, "easy"), (slow, "medium")])
    return manifest


def suite_config(iterations=1):
    config = load_config()
    config["run"]["iterations"] = iterations
    return config


class TestRunSuite:
    def test_two_tasks_fast1_is_half(self, two_task_suite, tmp_path):
        out = tmp_path / "out"
        suite = run_suite(load_manifest(two_task_suite)["entries"], suite_config(), out)
        # fast task's child reaches 2.0x; slow task's best stays the 1.0x seed
        assert suite.overall.fast_p[1.0] == pytest.approx(0.5)
        assert suite.overall.corr == pytest.approx(100.0)
        assert suite.overall.avg_amsr == pytest.approx((2.0 + 1.0) / 2)
        assert (out / "suite.json").exists()

    def test_per_level_split(self, two_task_suite, tmp_path):
        suite = run_suite(load_manifest(two_task_suite)["entries"], suite_config(), tmp_path / "out")
        assert set(suite.per_level) == {"easy", "medium"}
        assert suite.per_level["easy"].task_count == 1

    def test_every_task_appears_once(self, two_task_suite, tmp_path):
        suite = run_suite(load_manifest(two_task_suite)["entries"], suite_config(), tmp_path / "out")
        assert sorted(t.task_id for t in suite.tasks) == ["fast-task", "slow-task"]

    def test_empty_manifest_is_error(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            run_suite([], suite_config(), tmp_path / "out")

    def test_task_without_script_recorded_not_raised(self, tmp_path):
        path = tmp_path / "broken.yaml"
        doc = {
            "task_id": "broken-task",
            "backend_id": "simulated",
            "reference_source": REFERENCE,
        }
        path.write_text(yaml.safe_dump(doc))
        manifest = write_manifest(tmp_path / "m.yaml", [(path, "easy")])
        suite = run_suite(load_manifest(manifest)["entries"], suite_config(), tmp_path / "out")
        assert suite.tasks[0].error is not None
        assert suite.overall is None

    def test_rerun_is_byte_identical(self, two_task_suite, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        run_suite(load_manifest(two_task_suite)["entries"], suite_config(), out_a)
        run_suite(load_manifest(two_task_suite)["entries"], suite_config(), out_b)
        assert (out_a / "suite.json").read_bytes() == (out_b / "suite.json").read_bytes()

    def test_parallel_matches_sequential(self, two_task_suite, tmp_path):
        seq = run_suite(load_manifest(two_task_suite)["entries"], suite_config(), tmp_path / "s")
        par = run_suite(
            load_manifest(two_task_suite)["entries"], suite_config(), tmp_path / "p", parallelism=2
        )
        assert seq.to_record() == par.to_record()


class TestCli:
    def run_cli(self, *argv):
        return cli.main([str(a) for a in argv])

    def test_run_single_task(self, tmp_path, capsys):
        task_file = write_task(tmp_path / "t.yaml", "cli-task", 50.0)
        out = tmp_path / "run"
        code = self.run_cli("run", task_file, "--out", out, "--iterations", "1")
        assert code == cli.EXIT_OK
        assert (out / "run.json").exists()
        assert "best_score=4.0000" in capsys.readouterr().out

    def test_run_invalid_best_gives_exit_one(self, tmp_path):
        task_file = write_task(
            tmp_path / "bad.yaml", "bad-task", 50.0, default_rule={"correct": False}
        )
        code = self.run_cli("run", task_file, "--out", tmp_path / "run", "--iterations", "1")
        assert code == cli.EXIT_CANDIDATE_FAILURES

    def test_suite_cli_writes_reports_and_figures(self, two_task_suite, tmp_path, capsys):
        out = tmp_path / "out"
        code = self.run_cli("suite", two_task_suite, "--out", out)
        assert code == cli.EXIT_OK
        captured = capsys.readouterr().out
        assert "overall" in captured and "fast_1=0.50" in captured
        assert (out / "curves" / "curves_aggregate.csv").exists()
        assert (out / "curves" / "fast-task_curve.csv").exists()
        assert (out / "figures" / "suite_curves.png").exists()
        assert (out / "figures" / "fast-task_curves.png").exists()

    def test_missing_manifest_exit_two(self, tmp_path):
        code = self.run_cli("suite", tmp_path / "missing.yaml", "--out", tmp_path / "o")
        assert code == cli.EXIT_INFRASTRUCTURE

    def test_extract_cli(self, tmp_path, capsys):
        task_file = write_task(tmp_path / "t.yaml", "ext-task", 50.0)
        run_dir = tmp_path / "run"
        assert self.run_cli("run", task_file, "--out", run_dir, "--iterations", "1") == 0
        out = tmp_path / "shards"
        assert self.run_cli("extract", run_dir, "--out", out) == cli.EXIT_OK
        assert (out / "run.jsonl").exists()
        assert (out / "run.manifest.json").exists()
        assert "samples=" in capsys.readouterr().out

    def test_report_cli(self, tmp_path, capsys):
        task_file = write_task(tmp_path / "t.yaml", "rep-task", 25.0)
        run_dir = tmp_path / "run"
        self.run_cli("run", task_file, "--out", run_dir, "--iterations", "1")
        out = tmp_path / "report"
        assert self.run_cli("report", run_dir, "--out", out) == cli.EXIT_OK
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["corr"] == 100.0
        assert (out / "curves" / "curves_aggregate.csv").exists()
        assert (out / "figures" / "suite_curves.png").exists()

    def test_replay_cli_rescores_under_new_weights(self, tmp_path, capsys):
        task_file = write_task(tmp_path / "t.yaml", "rp-task", 50.0)
        run_dir = tmp_path / "run"
        self.run_cli("run", task_file, "--out", run_dir, "--iterations", "1")
        weights_file = tmp_path / "weights.yaml"
        weights_file.write_text(
            yaml.safe_dump({"weights": {"compile_credit": 0.0, "correct_credit": 0.0,
                                        "speedup_weight": 2.0, "speedup_cap": 100.0}})
        )
        code = self.run_cli("replay", run_dir, "--config", weights_file)
        assert code == cli.EXIT_OK
        replayed = json.loads((run_dir / "replay.json").read_text())
        assert replayed["final_best_score"] == pytest.approx(4.0)  # 2.0 weight * 2.0x
        assert replayed["seed_score"] == pytest.approx(2.0)

    def test_help_for_every_subcommand(self, capsys):
        for name in ("run", "suite", "serve", "extract", "report", "replay"):
            with pytest.raises(SystemExit) as exc:
                cli.build_parser().parse_args([name, "--help"])
            assert exc.value.code == 0
            assert capsys.readouterr().out


class TestReplayFunction:
    def test_unstable_results_score_two_credits(self, tmp_path):
        task_file = write_task(tmp_path / "t.yaml", "u-task", 50.0)
        run_dir = tmp_path / "run"
        TestCli().run_cli("run", task_file, "--out", run_dir, "--iterations", "1")
        replayed = replay_run(run_dir, ScoreWeights(5.0, 5.0, 1.0, 100.0))
        assert replayed["seed_score"] == pytest.approx(5 + 5 + 1.0)


class TestConfig:
    def test_defaults_loaded(self):
        config = load_config()
        assert config["decoding"]["temperature"] == 0.6
        assert config["run"]["iterations"] == 40

    def test_yaml_merge(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump({"run": {"iterations": 7}}))
        config = load_config(path)
        assert config["run"]["iterations"] == 7
        assert config["decoding"]["top_p"] == 0.95  # untouched default

    def test_named_env_overrides(self):
        config = apply_env_overrides(
            load_config(),
            environ={"EVOTUNE_SERVICE_PORT": "9999", "EVOTUNE_PARALLELISM": "8"},
        )
        assert config["service"]["port"] == 9999
        assert config["service"]["parallelism"] == 8

    def test_generic_env_override(self):
        config = apply_env_overrides(
            load_config(), environ={"EVOTUNE_RUN__ITERATIONS": "3"}
        )
        assert config["run"]["iterations"] == 3

    def test_env_overrides_file_values(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump({"service": {"port": 1234}}))
        config = load_config(path, environ={"EVOTUNE_SERVICE_PORT": "4321"})
        assert config["service"]["port"] == 4321

    def test_load_task_with_reference_path(self, tmp_path):
        (tmp_path / "ref.py").write_text(REFERENCE)
        doc = {"task_id": "t", "backend_id": "simulated", "reference_path": "ref.py"}
        path = tmp_path / "task.yaml"
        path.write_text(yaml.safe_dump(doc))
        task, script = load_task(path)
        assert task.reference_source == REFERENCE
        assert script is None

    def test_load_task_requires_source(self, tmp_path):
        path = tmp_path / "task.yaml"
        path.write_text(yaml.safe_dump({"task_id": "t"}))
        with pytest.raises(InvalidArgumentError):
            load_task(path)

    def test_manifest_requires_tasks(self, tmp_path):
        path = tmp_path / "m.yaml"
        path.write_text(yaml.safe_dump({"tasks": []}))
        with pytest.raises(InvalidArgumentError):
            load_manifest(path)


class TestCurveExports:
    def test_aggregate_grouped_by_task_then_iteration(self, two_task_suite, tmp_path, capsys):
        out = tmp_path / "out"
        TestCli().run_cli("suite", two_task_suite, "--out", out)
        rows = (out / "curves" / "curves_aggregate.csv").read_text().splitlines()
        assert rows[0] == "task_id,iteration,best_score,best_speedup"
        ids = [r.split(",")[0] for r in rows[1:]]
        assert ids == sorted(ids)

    def test_rerun_byte_identical_curves(self, two_task_suite, tmp_path, capsys):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        TestCli().run_cli("suite", two_task_suite, "--out", out_a)
        TestCli().run_cli("suite", two_task_suite, "--out", out_b)
        for name in ("fast-task_curve.csv", "slow-task_curve.csv", "curves_aggregate.csv"):
            assert (out_a / "curves" / name).read_bytes() == (out_b / "curves" / name).read_bytes()
