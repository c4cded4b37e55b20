"""Config and task-file loading: YAML trees with environment-variable overrides."""

from __future__ import annotations

import copy
import os
from pathlib import Path
from typing import Optional

import yaml

from .archive import ArchiveConfig
from .controller import RunConfig
from .core import (
    InvalidArgumentError,
    ScoreWeights,
    TaskSpec,
    TimingConfig,
    ToleranceConfig,
)
from .llm import DecodingConfig
from .service import BackendDescriptor

ENV_PREFIX = "EVOTUNE"

DEFAULT_CONFIG = {
    "service": {"port": 8080, "parallelism": 4, "queue_limit": 64, "backends_file": ""},
    "provider": {
        "kind": "mock",
        "endpoint": "",
        "model_id": "default",
        "credential_env": "",
        "timeout_s": 120.0,
        "max_attempts": 3,
        "backoff_base_s": 1.0,
    },
    "decoding": {"temperature": 0.6, "top_p": 0.95, "max_output_tokens": 32768},
    "run": {
        "iterations": 40,
        "seed": 0,
        "input_token_cap": 32768,
        "history_k": 3,
        "stop_on_score": None,
    },
    "archive": {
        "island_count": 4,
        "complexity_bins": 10,
        "score_bins": 10,
        "score_range": [0.0, 10.0],
        "migration_interval": 10,
        "migration_size": 1,
        "top_k": 3,
        "diverse_k": 2,
        "rng_seed": 0,
        "complexity_ceiling": 65536,
        "parent_temperature": 1.0,
    },
    "weights": {
        "compile_credit": 1.0,
        "correct_credit": 1.0,
        "speedup_weight": 1.0,
        "speedup_cap": 100.0,
    },
}

# Spec-named environment variables mapped onto config paths.
NAMED_ENV_VARS = {
    f"{ENV_PREFIX}_SERVICE_PORT": ("service", "port"),
    f"{ENV_PREFIX}_PARALLELISM": ("service", "parallelism"),
    f"{ENV_PREFIX}_BACKENDS_FILE": ("service", "backends_file"),
}


def deep_merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _coerce(raw: str, like) -> object:
    if isinstance(like, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def apply_env_overrides(config: dict, environ=None) -> dict:
    """Named vars first, then generic ``EVOTUNE_<SECTION>__<KEY>`` overrides."""
    environ = os.environ if environ is None else environ
    config = copy.deepcopy(config)
    for var, (section, key) in NAMED_ENV_VARS.items():
        if var in environ:
            config.setdefault(section, {})[key] = _coerce(
                environ[var], config.get(section, {}).get(key)
            )
    for var, raw in environ.items():
        if not var.startswith(f"{ENV_PREFIX}_") or "__" not in var:
            continue
        section, key = var[len(ENV_PREFIX) + 1 :].lower().split("__", 1)
        if section in config and key in config[section]:
            config[section][key] = _coerce(raw, config[section][key])
    return config


def load_config(path: Optional[Path] = None, environ=None) -> dict:
    config = DEFAULT_CONFIG
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise InvalidArgumentError(f"config root must be a mapping: {path}")
        config = deep_merge(config, loaded)
    else:
        config = copy.deepcopy(config)
    return apply_env_overrides(config, environ)


def decoding_config(config: dict, model_id: Optional[str] = None) -> DecodingConfig:
    section = config["decoding"]
    return DecodingConfig(
        temperature=float(section["temperature"]),
        top_p=float(section["top_p"]),
        max_output_tokens=int(section["max_output_tokens"]),
        model_id=model_id or config["provider"]["model_id"],
    )


def archive_config(config: dict, seed: Optional[int] = None) -> ArchiveConfig:
    section = dict(config["archive"])
    if seed is not None:
        section["rng_seed"] = seed
    section["score_range"] = tuple(section["score_range"])
    return ArchiveConfig(**section)


def score_weights(config: dict) -> ScoreWeights:
    return ScoreWeights(**config["weights"])


def run_config(config: dict, seed: Optional[int] = None) -> RunConfig:
    section = config["run"]
    run_seed = int(section["seed"] if seed is None else seed)
    return RunConfig(
        iterations=int(section["iterations"]),
        decoding=decoding_config(config),
        archive=archive_config(config, seed=run_seed),
        input_token_cap=int(section["input_token_cap"]),
        seed=run_seed,
        stop_on_score=section.get("stop_on_score"),
        history_k=int(section["history_k"]),
    )


# -- task files ----------------------------------------------------------------


def load_task(path: Path, backend_override: Optional[str] = None) -> tuple:
    """(TaskSpec, mock script or None) from a task YAML file."""
    path = Path(path)
    raw = yaml.safe_load(path.read_text())
    if not isinstance(raw, dict):
        raise InvalidArgumentError(f"task file must be a mapping: {path}")

    source = raw.get("reference_source")
    if source is None and raw.get("reference_path"):
        source = (path.parent / raw["reference_path"]).read_text(encoding="utf-8")
    if not source:
        raise InvalidArgumentError(f"task {path} needs reference_source or reference_path")

    tolerance = ToleranceConfig.from_record(raw["tolerance"]) if "tolerance" in raw else ToleranceConfig()
    timing = TimingConfig.from_record(raw["timing"]) if "timing" in raw else TimingConfig()
    task = TaskSpec(
        task_id=raw["task_id"],
        reference_source=source,
        target_class_name=raw.get("target_class_name", "ModelNew"),
        backend_id=backend_override or raw.get("backend_id", "simulated"),
        test_input_spec=raw.get("test_input_spec"),
        tolerance=tolerance,
        timing=timing,
        difficulty_level=raw.get("level", raw.get("difficulty_level")),
        baseline_mode=raw.get("baseline_mode", "measure_reference"),
        fixed_baseline_ns=raw.get("fixed_baseline_ns"),
    )
    return task, raw.get("llm_mock_script")


def load_manifest(path: Path) -> dict:
    """Suite manifest: task entries plus optional suite-level config overrides.

    Returns ``{"entries": [{file, level}, ...], "config": {...}}`` with task
    paths resolved against the manifest directory.
    """
    path = Path(path)
    raw = yaml.safe_load(path.read_text())
    if not isinstance(raw, dict) or not isinstance(raw.get("tasks"), list):
        raise InvalidArgumentError(f"manifest {path} must contain a 'tasks' list")
    if not raw["tasks"]:
        raise InvalidArgumentError(f"manifest {path} lists no tasks")
    entries = []
    for item in raw["tasks"]:
        entries.append(
            {
                "file": (path.parent / item["file"]).resolve(),
                "level": item.get("level"),
            }
        )
    return {"entries": entries, "config": raw.get("config", {})}


def load_backends(path: Optional[Path]) -> list:
    if not path:
        return [BackendDescriptor(backend_id="simulated", kind="simulated")]
    raw = yaml.safe_load(Path(path).read_text()) or []
    return [BackendDescriptor.from_record(item) for item in raw]
