"""Phase execution: load, compare, trace block execution, and time candidates."""

from __future__ import annotations

import importlib.util
import math
import sys
import tempfile
import threading
import time
import traceback
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .protocol import (
    ALL_PHASES,
    DEFAULT_END_MARKER,
    DEFAULT_PHASE_TIMEOUTS,
    DEFAULT_START_MARKER,
    PROTOCOL_VERSION,
)

MODE_INLINE = "inline_script"
MODE_TENSOR = "tensor_module"
MODE_GPU = "gpu_kernel"


class PhaseTimeout(RuntimeError):
    pass


class CompileFailure(RuntimeError):
    pass


@dataclass
class LoadedProgram:
    module: object
    path: str
    source: str
    block_range: Optional[tuple]  # (first_line, last_line) of the inter-marker region


def _marker_line(source_lines, marker):
    hits = [i for i, line in enumerate(source_lines, start=1) if line.rstrip() == marker.rstrip()]
    return hits


def block_line_range(source: str, start_marker: str, end_marker: str) -> Optional[tuple]:
    """1-indexed line range strictly between the marker lines, or None."""
    lines = source.splitlines()
    starts = _marker_line(lines, start_marker)
    ends = _marker_line(lines, end_marker)
    if len(starts) != 1 or len(ends) != 1 or ends[0] <= starts[0]:
        return None
    return (starts[0] + 1, ends[0] - 1)


def load_program(source: str, tag: str, markers: dict, workdir: Path) -> LoadedProgram:
    """Write the source to its own file and import it as a fresh module."""
    name = f"sandbox_{tag}_{uuid.uuid4().hex}"
    path = workdir / f"{name}.py"
    path.write_text(source, encoding="utf-8")
    spec = importlib.util.spec_from_file_location(name, path)
    module = importlib.util.module_from_spec(spec)
    sys.modules[name] = module
    try:
        spec.loader.exec_module(module)
    except BaseException as exc:
        raise CompileFailure(
            f"{tag} failed to load: {type(exc).__name__}: {exc}\n{traceback.format_exc()}"
        ) from exc
    start = markers.get("start_marker") or DEFAULT_START_MARKER
    end = markers.get("end_marker") or DEFAULT_END_MARKER
    return LoadedProgram(
        module=module,
        path=str(path),
        source=source,
        block_range=block_line_range(source, start, end),
    )


def resolve_entry(program: LoadedProgram, target_class_name: str, prefer_new: bool):
    """Entry callable by the "New"-suffix convention.

    Candidates expose the suffixed name; references expose the base name. Both
    spellings are accepted so inline scripts can share one entry name.
    """
    base = target_class_name[:-3] if target_class_name.endswith("New") else target_class_name
    order = [target_class_name, base] if prefer_new else [base, target_class_name]
    for name in order:
        entry = getattr(program.module, name, None)
        if entry is not None:
            return entry
    raise CompileFailure(
        f"module defines neither {order[0]!r} nor {order[1]!r} (path {program.path})"
    )


# -- numeric comparison --------------------------------------------------------


@dataclass
class CompareStats:
    ok: bool = True
    max_abs_err: float = 0.0
    max_rel_err: float = 0.0

    def merge_fail(self):
        self.ok = False
        self.max_abs_err = math.inf
        self.max_rel_err = math.inf


def _is_tensorlike(value) -> bool:
    return hasattr(value, "detach") and hasattr(value, "cpu")


def _compare_into(ref, cand, abs_tol, rel_tol, stats: CompareStats) -> None:
    if _is_tensorlike(ref) or _is_tensorlike(cand):
        try:
            ref_list = ref.detach().cpu().reshape(-1).tolist()
            cand_list = cand.detach().cpu().reshape(-1).tolist()
        except Exception:
            stats.merge_fail()
            return
        if len(ref_list) != len(cand_list):
            stats.merge_fail()
            return
        for r, c in zip(ref_list, cand_list):
            _compare_into(r, c, abs_tol, rel_tol, stats)
        return
    if isinstance(ref, (list, tuple)) or isinstance(cand, (list, tuple)):
        if not isinstance(ref, (list, tuple)) or not isinstance(cand, (list, tuple)):
            stats.merge_fail()
            return
        if len(ref) != len(cand):
            stats.merge_fail()
            return
        for r, c in zip(ref, cand):
            _compare_into(r, c, abs_tol, rel_tol, stats)
        return
    if isinstance(ref, dict) and isinstance(cand, dict):
        if set(ref) != set(cand):
            stats.merge_fail()
            return
        for key in ref:
            _compare_into(ref[key], cand[key], abs_tol, rel_tol, stats)
        return
    if isinstance(ref, (int, float, bool)) and isinstance(cand, (int, float, bool)):
        r, c = float(ref), float(cand)
        if math.isnan(r) and math.isnan(c):
            return
        diff = abs(c - r)
        stats.max_abs_err = max(stats.max_abs_err, diff)
        denom = max(abs(r), 1e-300)
        stats.max_rel_err = max(stats.max_rel_err, diff / denom)
        if diff > abs_tol + rel_tol * abs(r):
            stats.ok = False
        return
    if ref != cand:  # non-numeric payloads must match exactly
        stats.merge_fail()


def compare_outputs(ref, cand, abs_tol: float, rel_tol: float) -> CompareStats:
    """Elementwise |cand - ref| <= abs_tol + rel_tol * |ref| over nested output."""
    stats = CompareStats()
    _compare_into(ref, cand, abs_tol, rel_tol, stats)
    return stats


# -- block-execution tracing ----------------------------------------------------


class BlockCallTracer:
    """Records calls into functions whose def line lies inside the block region."""

    def __init__(self, path: str, block_range: Optional[tuple]):
        self.path = path
        self.block_range = block_range
        self.calls: set = set()
        self.available = True

    def _trace(self, frame, event, arg):
        if event == "call":
            code = frame.f_code
            if (
                self.block_range is not None
                and code.co_filename == self.path
                and self.block_range[0] <= code.co_firstlineno <= self.block_range[1]
            ):
                self.calls.add(code.co_name)
        return None  # no per-line tracing; nested calls still report

    def __enter__(self):
        try:
            sys.settrace(self._trace)
        except Exception:
            self.available = False
        return self

    def __exit__(self, *exc):
        if self.available:
            sys.settrace(None)
        return False

    def verdict(self) -> dict:
        if not self.available:
            return {"kernel_executed": False, "evidence": "trace unavailable"}
        if not self.calls:
            return {
                "kernel_executed": False,
                "evidence": "no block-defined function executed during checked calls",
            }
        names = ", ".join(sorted(self.calls))
        return {"kernel_executed": True, "evidence": f"executed block-defined callables: {names}"}


# -- execution modes --------------------------------------------------------------


@dataclass
class Workload:
    """Bound callables running one full case for reference and candidate."""

    ref_call: Callable
    cand_call: Callable
    sync: Callable  # device barrier before each timestamp; no-op off-GPU


def _inline_cases(spec: dict) -> list:
    cases = (spec or {}).get("cases") or [{"args": []}]
    normalized = []
    for case in cases:
        if isinstance(case, dict):
            normalized.append((list(case.get("args", [])), dict(case.get("kwargs", {}))))
        else:
            normalized.append((list(case), {}))
    return normalized


def build_inline_workload(reference, candidate, target, spec):
    ref_entry = resolve_entry(reference, target, prefer_new=False)
    cand_entry = resolve_entry(candidate, target, prefer_new=True)
    cases = _inline_cases(spec)

    def run_case(entry, case):
        args, kwargs = case
        return entry(*args, **kwargs)

    return cases, run_case, ref_entry, cand_entry, (lambda: None)


def build_tensor_workload(reference, candidate, target, spec, use_gpu):
    import torch

    device = "cuda" if use_gpu and torch.cuda.is_available() else "cpu"
    seed = int((spec or {}).get("seed", 0))
    case_count = int((spec or {}).get("cases", 3))

    ref_cls = resolve_entry(reference, target, prefer_new=False)
    cand_cls = resolve_entry(candidate, target, prefer_new=True)
    init_fn = getattr(reference.module, "get_init_inputs", lambda: [])
    inputs_fn = getattr(reference.module, "get_inputs", None)
    if inputs_fn is None:
        raise CompileFailure("tensor_module mode requires get_inputs() in the reference")

    torch.manual_seed(seed)
    init_args = list(init_fn())
    ref_model = ref_cls(*init_args).to(device).eval()
    cand_model = cand_cls(*init_args).to(device).eval()

    cases = []
    for i in range(case_count):
        torch.manual_seed(seed + 1 + i)
        case_inputs = [
            t.to(device) if hasattr(t, "to") else t for t in inputs_fn()
        ]
        cases.append((case_inputs, {}))

    def run_case(model, case):
        args, _ = case
        with torch.no_grad():
            return model(*[a.clone() if hasattr(a, "clone") else a for a in args])

    def sync():
        if device == "cuda":
            torch.cuda.synchronize()

    return cases, run_case, ref_model, cand_model, sync


# -- phase driver -------------------------------------------------------------------


def _run_with_timeout(phase: str, timeout_s: float, fn: Callable):
    """Run a phase body in a worker thread; raise PhaseTimeout on overrun.

    A timed-out thread cannot be killed; callers must treat a timeout as fatal
    for the whole (single-request) process.
    """
    box: dict = {}

    def body():
        try:
            box["value"] = fn()
        except BaseException as exc:  # re-raised in the caller
            box["error"] = exc

    thread = threading.Thread(target=body, daemon=True)
    thread.start()
    thread.join(timeout_s)
    if thread.is_alive():
        raise PhaseTimeout(f"{phase} phase timed out after {timeout_s}s")
    if "error" in box:
        raise box["error"]
    return box.get("value")


def run_phases(request: dict) -> dict:
    """Execute the requested phases in order, short-circuiting on failure.

    Raw timing samples are returned untrimmed; outlier rejection belongs to
    the orchestrator.
    """
    plan = request.get("phase_plan") or list(ALL_PHASES)
    tolerance = request.get("tolerance", {})
    abs_tol = float(tolerance.get("absolute_tol", 1e-3))
    rel_tol = float(tolerance.get("relative_tol", 1e-3))
    timing_cfg = request.get("timing", {})
    warmups = int(timing_cfg.get("warmup_count", 3))
    measure_count = int(timing_cfg.get("measure_count", 100))
    mode = request.get("execution_mode", MODE_INLINE)
    markers = request.get("block_markers") or {}
    spec = request.get("test_input_spec") or {}
    timeouts = dict(DEFAULT_PHASE_TIMEOUTS)
    if isinstance(spec, dict):
        timeouts.update(spec.get("phase_timeouts", {}))

    response = {
        "protocol_version": PROTOCOL_VERSION,
        "phases": {},
        "fatal": None,
        "hardware_metadata": {"runner": "sandbox-runner", "mode": mode, "python": sys.version.split()[0]},
    }

    with tempfile.TemporaryDirectory(prefix="sandbox-run-") as tmp:
        workdir = Path(tmp)

        # compile: load both sources into fresh modules
        try:
            def load_both():
                reference = load_program(
                    request["reference_source"], "reference", markers, workdir
                )
                candidate = load_program(
                    request["candidate_source"], "candidate", markers, workdir
                )
                return reference, candidate

            reference, candidate = _run_with_timeout("compile", timeouts["compile"], load_both)
        except CompileFailure as exc:
            if "compile" in plan:
                response["phases"]["compile"] = {"ok": False, "log": str(exc)}
            else:
                response["fatal"] = {
                    "phase": "compile",
                    "message": str(exc),
                    "traceback": "",
                }
            return response
        except PhaseTimeout as exc:
            response["fatal"] = {"phase": "compile", "message": str(exc), "traceback": ""}
            return response
        if "compile" in plan:
            response["phases"]["compile"] = {"ok": True, "log": ""}

        # workload construction happens lazily with the first phase that needs it
        try:
            if mode == MODE_INLINE:
                cases, run_case, ref_entry, cand_entry, sync = build_inline_workload(
                    reference, candidate, request.get("target_class_name", "run"), spec
                )
            elif mode in (MODE_TENSOR, MODE_GPU):
                cases, run_case, ref_entry, cand_entry, sync = build_tensor_workload(
                    reference,
                    candidate,
                    request.get("target_class_name", "ModelNew"),
                    spec,
                    use_gpu=mode == MODE_GPU,
                )
            else:
                response["fatal"] = {
                    "phase": "compile",
                    "message": f"unknown execution_mode {mode!r}",
                    "traceback": "",
                }
                return response
        except CompileFailure as exc:
            response["phases"]["compile"] = {"ok": False, "log": str(exc)}
            return response

        tracer = BlockCallTracer(candidate.path, candidate.block_range)

        if "correctness" in plan or "hack" in plan:
            try:
                def check_all():
                    stats_total = CompareStats()
                    for case in cases:
                        ref_out = run_case(ref_entry, case)
                        with tracer:
                            cand_out = run_case(cand_entry, case)
                        case_stats = compare_outputs(ref_out, cand_out, abs_tol, rel_tol)
                        stats_total.ok = stats_total.ok and case_stats.ok
                        stats_total.max_abs_err = max(
                            stats_total.max_abs_err, case_stats.max_abs_err
                        )
                        stats_total.max_rel_err = max(
                            stats_total.max_rel_err, case_stats.max_rel_err
                        )
                    return stats_total

                stats = _run_with_timeout(
                    "correctness", timeouts["correctness"], check_all
                )
            except PhaseTimeout as exc:
                response["fatal"] = {"phase": "correctness", "message": str(exc), "traceback": ""}
                return response
            except BaseException as exc:
                response["fatal"] = {
                    "phase": "correctness",
                    "message": f"{type(exc).__name__}: {exc}",
                    "traceback": traceback.format_exc(),
                }
                return response
            if "correctness" in plan:
                response["phases"]["correctness"] = {
                    "ok": stats.ok,
                    "max_abs_err": _json_float(stats.max_abs_err),
                    "max_rel_err": _json_float(stats.max_rel_err),
                    "cases_run": len(cases),
                }
                if not stats.ok:
                    return response
            if "hack" in plan:
                response["phases"]["hack"] = tracer.verdict()
                if not response["phases"]["hack"]["kernel_executed"]:
                    return response

        if "timing" in plan:
            try:
                def measure():
                    case = cases[0]
                    for _ in range(warmups):
                        run_case(ref_entry, case)
                        run_case(cand_entry, case)
                    baseline, cand_samples = [], []
                    for _ in range(measure_count):
                        sync()
                        t0 = time.perf_counter_ns()
                        run_case(ref_entry, case)
                        sync()
                        baseline.append(float(time.perf_counter_ns() - t0))
                    for _ in range(measure_count):
                        sync()
                        t0 = time.perf_counter_ns()
                        run_case(cand_entry, case)
                        sync()
                        cand_samples.append(float(time.perf_counter_ns() - t0))
                    return baseline, cand_samples

                baseline, cand_samples = _run_with_timeout(
                    "timing", timeouts["timing"], measure
                )
            except PhaseTimeout as exc:
                response["fatal"] = {"phase": "timing", "message": str(exc), "traceback": ""}
                return response
            except BaseException as exc:
                response["fatal"] = {
                    "phase": "timing",
                    "message": f"{type(exc).__name__}: {exc}",
                    "traceback": traceback.format_exc(),
                }
                return response
            response["phases"]["timing"] = {
                "baseline_samples_ns": baseline,
                "candidate_samples_ns": cand_samples,
            }

    return response


def _json_float(value: float):
    if math.isinf(value):
        return 1e308
    if math.isnan(value):
        return None
    return value
