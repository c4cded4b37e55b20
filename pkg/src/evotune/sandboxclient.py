"""Client side of the sandbox wire protocol: length-prefixed JSON over stdio."""

from __future__ import annotations

import json
import shlex
import struct
import subprocess
import threading
from typing import Optional

from .core import CandidateProgram, TaskSpec, utcnow
from .simbackend import BackendRun

PROTOCOL_VERSION = "1"
_LEN = struct.Struct(">I")


class BackendUnavailableError(RuntimeError):
    """Transport-level failure talking to a backend; not a candidate failure."""


def write_frame(stream, payload: dict) -> None:
    data = json.dumps(payload).encode("utf-8")
    stream.write(_LEN.pack(len(data)))
    stream.write(data)
    stream.flush()


def read_frame(stream) -> dict:
    header = stream.read(_LEN.size)
    if len(header) < _LEN.size:
        raise BackendUnavailableError("sandbox stream closed while reading frame header")
    (length,) = _LEN.unpack(header)
    data = stream.read(length)
    if len(data) < length:
        raise BackendUnavailableError("sandbox stream closed mid-frame")
    return json.loads(data.decode("utf-8"))


def build_request(
    task: TaskSpec,
    candidate: CandidateProgram,
    phase_plan: list,
    markers: Optional[dict] = None,
) -> dict:
    spec = task.test_input_spec or {}
    return {
        "protocol_version": PROTOCOL_VERSION,
        "phase_plan": list(phase_plan),
        "reference_source": task.reference_source,
        "candidate_source": candidate.full_source,
        "target_class_name": task.target_class_name,
        "test_input_spec": spec,
        "tolerance": task.tolerance.to_record(),
        "timing": task.timing.to_record(),
        "execution_mode": spec.get("execution_mode", "inline_script") if isinstance(spec, dict) else "inline_script",
        "block_markers": markers or {},
    }


class ExternalSandboxBackend:
    """Adapter that drives an out-of-process runner over the wire protocol.

    The runner process is long-lived (``--serve`` stdio loop); requests are
    serialized per process because timing phases must not overlap on one
    device.
    """

    kind = "external_sandbox"

    def __init__(self, command: str, request_timeout_s: float = 600.0):
        self.command = command
        self.request_timeout_s = request_timeout_s
        self._proc: Optional[subprocess.Popen] = None
        self._lock = threading.Lock()

    def _ensure_process(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    shlex.split(self.command),
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                )
            except OSError as exc:
                raise BackendUnavailableError(f"cannot start sandbox: {exc}") from exc
        return self._proc

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
        self._proc = None

    def _roundtrip(self, request: dict) -> dict:
        with self._lock:
            proc = self._ensure_process()
            try:
                write_frame(proc.stdin, request)
                response = _read_with_timeout(proc, self.request_timeout_s)
            except (BrokenPipeError, OSError) as exc:
                self.close()
                raise BackendUnavailableError(f"sandbox pipe failure: {exc}") from exc
        if response.get("protocol_version") != PROTOCOL_VERSION:
            raise BackendUnavailableError(
                f"protocol version mismatch: {response.get('protocol_version')!r}"
            )
        fatal = response.get("fatal")
        if fatal and fatal.get("phase") == "protocol":
            raise BackendUnavailableError(f"sandbox rejected request: {fatal.get('message')}")
        return response

    def run_phases(self, task: TaskSpec, candidate: CandidateProgram) -> BackendRun:
        request = build_request(task, candidate, ["compile", "correctness", "hack", "timing"])
        response = self._roundtrip(request)
        return response_to_run(response)

    def measure_candidate(self, task: TaskSpec, candidate: CandidateProgram, round_idx: int) -> list:
        request = build_request(task, candidate, ["compile", "timing"])
        response = self._roundtrip(request)
        run = response_to_run(response)
        if run.candidate_samples is None:
            raise BackendUnavailableError("sandbox returned no candidate samples")
        return run.candidate_samples

    def measure_baseline(self, task: TaskSpec, round_idx: int = 0) -> list:
        seed = CandidateProgram(
            candidate_id="__baseline__",
            task_id=task.task_id,
            parent_id=None,
            generation=0,
            island=0,
            full_source=task.reference_source,
            evolve_block="",
            model_id="reference",
            prompt_hash="",
            created_at=utcnow(),
        )
        request = build_request(task, seed, ["compile", "timing"])
        response = self._roundtrip(request)
        run = response_to_run(response)
        if run.baseline_samples is None:
            raise BackendUnavailableError("sandbox returned no baseline samples")
        return run.baseline_samples


def _read_with_timeout(proc: subprocess.Popen, timeout_s: float) -> dict:
    result: dict = {}
    error: list = []

    def reader() -> None:
        try:
            result.update(read_frame(proc.stdout))
        except Exception as exc:  # propagated to caller below
            error.append(exc)

    thread = threading.Thread(target=reader, daemon=True)
    thread.start()
    thread.join(timeout_s)
    if thread.is_alive():
        proc.kill()
        raise BackendUnavailableError(f"sandbox did not answer within {timeout_s}s")
    if error:
        raise error[0]
    return result


def response_to_run(response: dict) -> BackendRun:
    """Map a wire response onto the orchestrator's phase-outcome shape."""
    phases = response.get("phases", {})
    fatal = response.get("fatal")
    run = BackendRun(compile_ok=True, hardware_metadata=response.get("hardware_metadata", {}))

    compile_phase = phases.get("compile")
    if compile_phase is not None:
        run.compile_ok = bool(compile_phase.get("ok"))
        if not run.compile_ok:
            run.error_log = compile_phase.get("log", "")
            return run

    if fatal is not None:
        run.run_ok = False
        run.error_log = "{}: {}\n{}".format(
            fatal.get("phase", "unknown"), fatal.get("message", ""), fatal.get("traceback", "")
        ).rstrip()
        return run

    correctness = phases.get("correctness")
    if correctness is not None:
        run.run_ok = True
        run.outputs_match = bool(correctness.get("ok"))
        run.max_abs_err = correctness.get("max_abs_err")
        if not run.outputs_match:
            run.error_log = (
                f"max_abs_err={correctness.get('max_abs_err')} "
                f"max_rel_err={correctness.get('max_rel_err')} "
                f"cases_run={correctness.get('cases_run')}"
            )
            return run

    hack = phases.get("hack")
    if hack is not None:
        run.kernel_executed = bool(hack.get("kernel_executed"))
        run.hack_evidence = hack.get("evidence", "")
        if not run.kernel_executed:
            run.error_log = run.hack_evidence
            return run

    timing = phases.get("timing")
    if timing is not None:
        run.baseline_samples = timing.get("baseline_samples_ns")
        run.candidate_samples = timing.get("candidate_samples_ns")
    return run
