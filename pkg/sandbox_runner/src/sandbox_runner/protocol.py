"""Wire protocol: 4-byte big-endian length prefix + UTF-8 JSON frames."""

from __future__ import annotations

import json
import struct

PROTOCOL_VERSION = "1"
_LEN = struct.Struct(">I")

DEFAULT_START_MARKER = "# ================== EVOLVE-BLOCK-START =================="
DEFAULT_END_MARKER = "# =================== EVOLVE-BLOCK-END ==================="

ALL_PHASES = ("compile", "correctness", "hack", "timing")

# Per-phase wall-clock caps (seconds); requests may override via
# test_input_spec["phase_timeouts"].
DEFAULT_PHASE_TIMEOUTS = {"compile": 120.0, "correctness": 120.0, "timing": 300.0}


class ProtocolError(ValueError):
    pass


def write_frame(stream, payload: dict) -> None:
    data = json.dumps(payload).encode("utf-8")
    stream.write(_LEN.pack(len(data)))
    stream.write(data)
    stream.flush()


def read_frame(stream):
    """One decoded frame, or None on clean end-of-stream."""
    header = stream.read(_LEN.size)
    if not header:
        return None
    if len(header) < _LEN.size:
        raise ProtocolError("stream closed while reading frame header")
    (length,) = _LEN.unpack(header)
    data = stream.read(length)
    if len(data) < length:
        raise ProtocolError("stream closed mid-frame")
    try:
        return json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"bad frame payload: {exc}") from exc


def fatal_response(phase: str, message: str, traceback_text: str = "") -> dict:
    return {
        "protocol_version": PROTOCOL_VERSION,
        "phases": {},
        "fatal": {"phase": phase, "message": message, "traceback": traceback_text},
    }


def validate_request(request) -> dict:
    """Check shape and version; raises ProtocolError with the offending detail."""
    if not isinstance(request, dict):
        raise ProtocolError("request must be a JSON object")
    version = request.get("protocol_version")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"protocol version mismatch: got {version!r}, want {PROTOCOL_VERSION!r}")
    for field in ("reference_source", "candidate_source"):
        if not request.get(field):
            raise ProtocolError(f"{field} must be a non-empty string")
    plan = request.get("phase_plan", list(ALL_PHASES))
    unknown = [p for p in plan if p not in ALL_PHASES]
    if unknown:
        raise ProtocolError(f"unknown phases in plan: {unknown}")
    return request
