from __future__ import annotations

import json
import subprocess
import sys

import pytest

from sandbox_runner.protocol import (
    DEFAULT_END_MARKER,
    DEFAULT_START_MARKER,
    PROTOCOL_VERSION,
    read_frame,
    write_frame,
)

REFERENCE = "def run(x):\n    return x * 2.0 + 1.0\n"


def wrap_block(body: str, prefix: str = "", suffix: str = "") -> str:
    if body and not body.endswith("\n"):
        body += "\n"
    return f"{prefix}{DEFAULT_START_MARKER}\n{body}{DEFAULT_END_MARKER}\n{suffix}"


# Candidate shapes used across the gate tests. The entry (`run`) lives in the
# locked region unless a test wants block execution to count.
IDENTITY_CANDIDATE = wrap_block(REFERENCE)

HONEST_CANDIDATE = wrap_block(
    "def fast_run(x):\n    return x * 2.0 + 1.0\n",
    suffix="def run(x):\n    return fast_run(x)\n",
)

DEAD_CODE_CANDIDATE = wrap_block(
    "def fast_run(x):\n    return x * 2.0 + 1.0\n",
    suffix="def run(x):\n    return x * 2.0 + 1.0\n",
)

LIBRARY_FALLBACK_CANDIDATE = wrap_block(
    "def fused_kernel(x):\n    return x * 2.0 + 1.0\n",
    prefix="def run(x):\n    return x * 2.0 + 1.0\n",
)

PERTURBED_CANDIDATE = wrap_block("def run(x):\n    return x * 2.0 + 2.0\n")

INFINITE_LOOP_CANDIDATE = wrap_block(
    "def run(x):\n    while True:\n        pass\n"
)


def make_request(
    candidate: str,
    reference: str = REFERENCE,
    phase_plan=("compile", "correctness", "hack", "timing"),
    cases=(( [3.0], {} ),),
    measure_count: int = 4,
    warmup_count: int = 1,
    phase_timeouts=None,
    protocol_version: str = PROTOCOL_VERSION,
    execution_mode: str = "inline_script",
    target: str = "run",
) -> dict:
    spec = {"cases": [{"args": list(a), "kwargs": dict(k)} for a, k in cases]}
    if phase_timeouts:
        spec["phase_timeouts"] = dict(phase_timeouts)
    return {
        "protocol_version": protocol_version,
        "phase_plan": list(phase_plan),
        "reference_source": reference,
        "candidate_source": candidate,
        "target_class_name": target,
        "test_input_spec": spec,
        "tolerance": {"relative_tol": 1e-3, "absolute_tol": 1e-3},
        "timing": {
            "warmup_count": warmup_count,
            "measure_count": measure_count,
            "stability_threshold": 0.01,
            "max_retry_rounds": 0,
        },
        "execution_mode": execution_mode,
        "block_markers": {},
    }


class ServeHarness:
    """Protocol stub driving a live ``sandbox-runner --serve`` process."""

    def __init__(self):
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "sandbox_runner.cli", "--serve"],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
        )

    def request(self, payload: dict) -> dict:
        write_frame(self.proc.stdin, payload)
        return read_frame(self.proc.stdout)

    def close(self):
        if self.proc.poll() is None:
            self.proc.stdin.close()
            try:
                self.proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                self.proc.kill()


@pytest.fixture()
def serve_harness():
    harness = ServeHarness()
    yield harness
    harness.close()


def run_oneshot_file(tmp_path, request: dict):
    """Drive the --oneshot CLI; returns (exit_code, response dict)."""
    path = tmp_path / "request.json"
    path.write_text(json.dumps(request))
    proc = subprocess.run(
        [sys.executable, "-m", "sandbox_runner.cli", "--oneshot", str(path)],
        capture_output=True,
        timeout=120,
    )
    response = json.loads(proc.stdout.decode()) if proc.stdout.strip() else None
    return proc.returncode, response
