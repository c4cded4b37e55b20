"""Prompt rendering, EVOLVE-BLOCK extraction/merging, and token budgeting."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from string import Template
from typing import Callable, Optional

from .core import (
    CandidateProgram,
    ERROR_STAGES,
    EvalResult,
    InvalidArgumentError,
    TaskSpec,
)

DEFAULT_START_MARKER = "# ================== EVOLVE-BLOCK-START =================="
DEFAULT_END_MARKER = "# =================== EVOLVE-BLOCK-END ==================="

NO_BLOCK = "no_block"
AMBIGUOUS_BLOCK = "ambiguous_block"
INVERTED_MARKERS = "inverted_markers"

_FENCE_OPEN = re.compile(r"^```[A-Za-z0-9_+.-]*[ \t]*$")


class BlockExtractionError(ValueError):
    """Model output violated the single-block contract."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


class MalformedParentError(ValueError):
    """Parent source does not contain exactly one well-formed block."""


class MissingTemplateFieldError(KeyError):
    """A template placeholder had no value supplied."""


class IrreduciblePromptError(ValueError):
    """The prompt exceeds the token cap even after all droppable parts are gone."""


@dataclass(frozen=True)
class BlockMarkers:
    start_marker: str = DEFAULT_START_MARKER
    end_marker: str = DEFAULT_END_MARKER

    def __post_init__(self) -> None:
        if self.start_marker == self.end_marker:
            raise InvalidArgumentError("markers must differ")
        if self.start_marker in self.end_marker or self.end_marker in self.start_marker:
            raise InvalidArgumentError("markers must not contain each other")


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_text: str
    token_count_estimate: int
    included_previous: tuple = ()
    included_top: tuple = ()


def estimate_tokens(text: str) -> int:
    """Model-agnostic budget estimate: one token per four characters."""
    return math.ceil(len(text) / 4)


def _load_template(name: str) -> Template:
    text = resources.files("evotune.templates").joinpath(name).read_text(encoding="utf-8")
    return Template(text)


def _substitute(template: Template, values: dict) -> str:
    try:
        return template.substitute(values)
    except KeyError as exc:
        raise MissingTemplateFieldError(str(exc)) from exc


# -- marker location ----------------------------------------------------------


def _marker_line_spans(source: str, marker: str) -> list:
    """(start, end) character spans of lines equal to the marker, ignoring trailing whitespace."""
    spans = []
    pos = 0
    for line in source.splitlines(keepends=True):
        stripped = line.rstrip("\r\n").rstrip()
        if stripped == marker.rstrip():
            spans.append((pos, pos + len(line)))
        pos += len(line)
    return spans


def _strip_fence(text: str) -> str:
    """Remove a single markdown code fence when it wraps the entire payload."""
    lines = text.strip().splitlines()
    if len(lines) >= 2 and _FENCE_OPEN.match(lines[0]) and lines[-1].strip() == "```":
        return "\n".join(lines[1:-1])
    return text


def extract_evolve_block(
    generation: str, markers: BlockMarkers = BlockMarkers()
) -> dict:
    """Pull the single EVOLVE-BLOCK out of raw model output.

    Returns ``{"full_program": ..., "block": ...}`` where ``block`` is the
    exact substring between the two marker lines (newline-terminated unless
    empty). Raises :class:`BlockExtractionError` for 0 markers, duplicated
    markers, or an end marker preceding the start.
    """
    body = _strip_fence(generation)
    starts = _marker_line_spans(body, markers.start_marker)
    ends = _marker_line_spans(body, markers.end_marker)

    if len(starts) > 1 or len(ends) > 1:
        raise BlockExtractionError(
            AMBIGUOUS_BLOCK, f"{len(starts)} start / {len(ends)} end markers"
        )
    if not starts or not ends:
        raise BlockExtractionError(NO_BLOCK, f"{len(starts)} start / {len(ends)} end markers")
    if ends[0][0] < starts[0][1]:
        raise BlockExtractionError(INVERTED_MARKERS, "end marker precedes start marker")

    block = body[starts[0][1] : ends[0][0]]
    return {"full_program": body, "block": block}


def merge_block(
    parent_full_source: str, new_block: str, markers: BlockMarkers = BlockMarkers()
) -> str:
    """Replace the parent's inter-marker region with ``new_block``.

    Everything outside the marker lines is preserved byte-for-byte; a newline
    is appended to the block when needed so the end marker stays on its own
    line.
    """
    starts = _marker_line_spans(parent_full_source, markers.start_marker)
    ends = _marker_line_spans(parent_full_source, markers.end_marker)
    if len(starts) != 1 or len(ends) != 1 or ends[0][0] < starts[0][1]:
        raise MalformedParentError(
            f"parent must contain exactly one well-formed block "
            f"({len(starts)} start / {len(ends)} end markers)"
        )
    if new_block and not new_block.endswith("\n"):
        new_block = new_block + "\n"

    child = parent_full_source[: starts[0][1]] + new_block + parent_full_source[ends[0][0] :]

    # Locked-region verification: re-extract and compare prefix/suffix bytes.
    reparsed = extract_evolve_block(child, markers)
    c_starts = _marker_line_spans(reparsed["full_program"], markers.start_marker)
    c_ends = _marker_line_spans(reparsed["full_program"], markers.end_marker)
    same_prefix = reparsed["full_program"][: c_starts[0][1]] == parent_full_source[: starts[0][1]]
    same_suffix = reparsed["full_program"][c_ends[0][0] :] == parent_full_source[ends[0][0] :]
    if not (same_prefix and same_suffix):
        raise MalformedParentError("locked region changed during merge")
    return child


def locked_regions(source: str, markers: BlockMarkers = BlockMarkers()) -> tuple:
    """(prefix, suffix) outside the block, including the marker lines themselves."""
    starts = _marker_line_spans(source, markers.start_marker)
    ends = _marker_line_spans(source, markers.end_marker)
    if len(starts) != 1 or len(ends) != 1 or ends[0][0] < starts[0][1]:
        raise MalformedParentError("source must contain exactly one well-formed block")
    return source[: starts[0][1]], source[ends[0][0] :]


def wrap_in_block(body: str, markers: BlockMarkers = BlockMarkers()) -> str:
    """Seed construction: the whole body becomes the mutable block."""
    if body and not body.endswith("\n"):
        body = body + "\n"
    return f"{markers.start_marker}\n{body}{markers.end_marker}\n"


# -- rendering ----------------------------------------------------------------


def render_system_prompt(
    task: TaskSpec,
    hardware_metadata: Optional[dict] = None,
    markers: BlockMarkers = BlockMarkers(),
) -> str:
    if hardware_metadata:
        device_specs = "\n".join(f"{k}: {v}" for k, v in sorted(hardware_metadata.items()))
    else:
        device_specs = "unknown device"
    return _substitute(
        _load_template("system_prompt.txt"),
        {
            "backend_id": task.backend_id,
            "reference_code": task.reference_source,
            "device_specs": device_specs,
            "start_marker": markers.start_marker,
            "end_marker": markers.end_marker,
        },
    )


def _render_program_section(pairs: list) -> str:
    if not pairs:
        return "(none)"
    parts = []
    for candidate, evaluation in pairs:
        parts.append(
            f"### Program {candidate.candidate_id} "
            f"| score: {evaluation.score:.4f} | stage: {evaluation.stage.value}\n"
            f"{candidate.full_source}"
        )
    return "\n".join(parts)


def render_user_prompt(
    current: CandidateProgram,
    current_eval: EvalResult,
    previous: list,
    top: list,
    target_class: str,
    error_log_limit: Optional[int] = None,
) -> str:
    """Appendix-ordered user prompt: history, current program, metrics, task."""
    if current.candidate_id != current_eval.candidate_id:
        raise InvalidArgumentError("current candidate/eval mismatch")

    error_section = ""
    if current_eval.stage in ERROR_STAGES and current_eval.error_log:
        log = current_eval.error_log
        if error_log_limit is not None and len(log) > error_log_limit:
            log = log[-error_log_limit:]
        indented = "\n".join(f"  {line}" for line in log.splitlines())
        error_section = f"- Runtime Error Message:\n{indented}\n"

    return _substitute(
        _load_template("user_prompt.txt"),
        {
            "target_class": target_class,
            "previous_attempts": _render_program_section(previous),
            "top_programs": _render_program_section(top),
            "current_program": current.full_source,
            "compiled": f"{1.0 if current_eval.compiled else 0.0:.4f}",
            "correctness": f"{1.0 if current_eval.correct else 0.0:.4f}",
            "score": f"{current_eval.score:.4f}",
            "stage": current_eval.stage.value,
            "error_section": error_section,
        },
    )


@dataclass(frozen=True)
class PromptDraft:
    """Structured prompt parts, re-rendered as budget enforcement drops entries."""

    system_text: str
    target_class: str
    current: CandidateProgram
    current_eval: EvalResult
    previous: tuple = ()  # (candidate, eval) pairs, oldest first
    top: tuple = ()  # (candidate, eval) pairs, best first


def _render_bundle(
    draft: PromptDraft,
    estimator: Callable[[str], int],
    error_log_limit: Optional[int] = None,
) -> PromptBundle:
    user_text = render_user_prompt(
        draft.current,
        draft.current_eval,
        list(draft.previous),
        list(draft.top),
        draft.target_class,
        error_log_limit=error_log_limit,
    )
    return PromptBundle(
        system_text=draft.system_text,
        user_text=user_text,
        token_count_estimate=estimator(draft.system_text) + estimator(user_text),
        included_previous=tuple(c.candidate_id for c, _ in draft.previous),
        included_top=tuple(c.candidate_id for c, _ in draft.top),
    )


def enforce_token_budget(
    draft: PromptDraft,
    cap: int = 32768,
    estimator: Callable[[str], int] = estimate_tokens,
    error_log_tail: int = 2000,
) -> PromptBundle:
    """Shrink the prompt until it fits the cap.

    Drop order: oldest previous attempt, then lowest-scored top program, then
    truncate the error log to its final ``error_log_tail`` characters. The
    current program and the reference (in the system text) are never dropped.
    """
    bundle = _render_bundle(draft, estimator)
    while bundle.token_count_estimate > cap and draft.previous:
        draft = replace(draft, previous=draft.previous[1:])
        bundle = _render_bundle(draft, estimator)
    while bundle.token_count_estimate > cap and draft.top:
        worst = min(range(len(draft.top)), key=lambda i: draft.top[i][1].score)
        draft = replace(draft, top=draft.top[:worst] + draft.top[worst + 1 :])
        bundle = _render_bundle(draft, estimator)
    if bundle.token_count_estimate > cap:
        bundle = _render_bundle(draft, estimator, error_log_limit=error_log_tail)
    if bundle.token_count_estimate > cap:
        raise IrreduciblePromptError(
            f"prompt estimate {bundle.token_count_estimate} exceeds cap {cap} "
            "with nothing left to drop"
        )
    return bundle
