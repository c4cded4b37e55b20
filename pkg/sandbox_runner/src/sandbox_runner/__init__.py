"""Out-of-process execution backend speaking length-prefixed JSON over stdio."""

from .phases import block_line_range, compare_outputs, run_phases
from .protocol import (
    PROTOCOL_VERSION,
    ProtocolError,
    fatal_response,
    read_frame,
    validate_request,
    write_frame,
)

__version__ = "0.1.0"

__all__ = [
    "PROTOCOL_VERSION",
    "ProtocolError",
    "block_line_range",
    "compare_outputs",
    "fatal_response",
    "read_frame",
    "run_phases",
    "validate_request",
    "write_frame",
]
