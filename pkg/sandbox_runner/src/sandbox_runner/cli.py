"""Runner entry point: ``--serve`` stdio loop and ``--oneshot`` single requests."""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from pathlib import Path

from .phases import run_phases
from .protocol import (
    DEFAULT_PHASE_TIMEOUTS,
    ProtocolError,
    fatal_response,
    read_frame,
    validate_request,
    write_frame,
)


def handle_request(request) -> dict:
    try:
        validate_request(request)
    except ProtocolError as exc:
        return fatal_response("protocol", str(exc))
    try:
        return run_phases(request)
    except Exception as exc:  # machinery failure, not a candidate verdict
        return fatal_response("runner", f"{type(exc).__name__}: {exc}")


def _worker_deadline(request) -> float:
    timeouts = dict(DEFAULT_PHASE_TIMEOUTS)
    spec = request.get("test_input_spec") if isinstance(request, dict) else None
    if isinstance(spec, dict):
        timeouts.update(spec.get("phase_timeouts", {}))
    return sum(float(v) for v in timeouts.values()) + 60.0


def serve(stdin=None, stdout=None) -> int:
    """Frame loop that runs every request in a fresh interpreter process.

    One OS process per request: module and global state never leak between
    candidates, and a wedged candidate only costs its own worker.
    """
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    while True:
        try:
            request = read_frame(stdin)
        except ProtocolError as exc:
            write_frame(stdout, fatal_response("protocol", str(exc)))
            return 1
        if request is None:
            return 0
        try:
            validate_request(request)
        except ProtocolError as exc:
            write_frame(stdout, fatal_response("protocol", str(exc)))
            continue
        write_frame(stdout, _run_in_worker(request))


def _run_in_worker(request) -> dict:
    command = [sys.executable, "-m", "sandbox_runner.cli", "--oneshot-frame"]
    try:
        proc = subprocess.Popen(command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
    except OSError as exc:
        return fatal_response("runner", f"cannot spawn worker: {exc}")
    try:
        write_frame(proc.stdin, request)
        proc.stdin.close()
        deadline = _worker_deadline(request)
        response = _read_worker_frame(proc, deadline)
        proc.wait(timeout=10)
        return response
    except ProtocolError as exc:
        proc.kill()
        return fatal_response("runner", f"worker produced no valid response: {exc}")
    except subprocess.TimeoutExpired:
        proc.kill()
        return fatal_response("runner", "worker did not exit after responding")


def _read_worker_frame(proc, deadline_s: float) -> dict:
    import threading

    box: dict = {}

    def reader():
        try:
            frame = read_frame(proc.stdout)
            box["frame"] = frame if frame is not None else ProtocolError("worker closed stream")
        except ProtocolError as exc:
            box["frame"] = exc

    thread = threading.Thread(target=reader, daemon=True)
    thread.start()
    thread.join(deadline_s)
    if thread.is_alive():
        proc.kill()
        return fatal_response("runner", f"worker exceeded {deadline_s}s deadline")
    result = box.get("frame")
    if isinstance(result, ProtocolError):
        raise result
    return result


def oneshot_frame(stdin=None, stdout=None) -> int:
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    try:
        request = read_frame(stdin)
    except ProtocolError as exc:
        write_frame(stdout, fatal_response("protocol", str(exc)))
        return 0
    if request is None:
        return 1
    write_frame(stdout, handle_request(request))
    return 0


def oneshot_file(path: Path) -> int:
    request = json.loads(Path(path).read_text(encoding="utf-8"))
    response = handle_request(request)
    json.dump(response, sys.stdout)
    sys.stdout.write("\n")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sandbox-runner",
        description="Executes candidate programs against a reference: compile, "
        "numeric comparison, block-execution tracing, and timed measurement.",
    )
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--serve", action="store_true", help="length-prefixed JSON loop on stdio")
    group.add_argument("--oneshot", type=Path, metavar="FILE", help="answer one JSON request file")
    group.add_argument(
        "--oneshot-frame",
        action="store_true",
        help=argparse.SUPPRESS,  # internal: single framed request on stdio
    )
    args = parser.parse_args(argv)
    if args.serve:
        return serve()
    if args.oneshot_frame:
        return oneshot_frame()
    return oneshot_file(args.oneshot)


if __name__ == "__main__":
    sys.exit(main())
