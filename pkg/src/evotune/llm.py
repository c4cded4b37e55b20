"""Completion interface: chat-completions HTTP endpoint or a deterministic scripted mock."""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import requests

from .core import InvalidArgumentError


class ProviderError(RuntimeError):
    """Transport failure that survived the retry budget."""


class CredentialMissingError(ProviderError):
    """Authentication problem; never retried."""


class ScriptExhaustedError(ProviderError):
    """A scripted mock ran out of matching entries."""


@dataclass(frozen=True)
class DecodingConfig:
    temperature: float = 0.6
    top_p: float = 0.95
    max_output_tokens: int = 32768
    model_id: str = "default"

    def __post_init__(self) -> None:
        if not 0 <= self.temperature <= 2:
            raise InvalidArgumentError("temperature must be in [0, 2]")
        if not 0 < self.top_p <= 1:
            raise InvalidArgumentError("top_p must be in (0, 1]")
        if self.max_output_tokens < 1:
            raise InvalidArgumentError("max_output_tokens must be >= 1")

    def to_record(self) -> dict:
        return {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_output_tokens": self.max_output_tokens,
            "model_id": self.model_id,
        }

    @classmethod
    def from_record(cls, record: dict) -> "DecodingConfig":
        return cls(
            temperature=float(record.get("temperature", 0.6)),
            top_p=float(record.get("top_p", 0.95)),
            max_output_tokens=int(record.get("max_output_tokens", 32768)),
            model_id=record.get("model_id", "default"),
        )


@dataclass(frozen=True)
class CompletionRecord:
    prompt_hash: str
    model_id: str
    output_text: str
    input_tokens: int
    output_tokens: int
    latency_s: float
    attempt: int
    truncated: bool = False

    def __post_init__(self) -> None:
        if self.attempt < 1:
            raise InvalidArgumentError("attempt must be >= 1")

    def to_record(self) -> dict:
        return {
            "prompt_hash": self.prompt_hash,
            "model_id": self.model_id,
            "output_text": self.output_text,
            "usage": {"input_tokens": self.input_tokens, "output_tokens": self.output_tokens},
            "latency_s": self.latency_s,
            "attempt": self.attempt,
            "truncated": self.truncated,
        }


def prompt_digest(system: str, user: str) -> str:
    h = hashlib.sha256()
    h.update(system.encode("utf-8"))
    h.update(b"\x00")
    h.update(user.encode("utf-8"))
    return h.hexdigest()


class AuditLog:
    """Append-only JSONL record of every completion call, failures included."""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path else None
        self.records: list = []
        self._lock = threading.Lock()

    def append(self, record: dict) -> None:
        with self._lock:
            self.records.append(record)
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")


# -- providers ----------------------------------------------------------------


@dataclass
class ScriptEntry:
    """One mock behaviour: fires when its match rule hits the incoming call."""

    match: str = "any"  # any | contains | iteration
    match_arg: Optional[object] = None
    response: Optional[str] = None
    error: Optional[str] = None
    truncated: bool = False

    def matches(self, user: str, call_index: int) -> bool:
        if self.match == "any":
            return True
        if self.match == "contains":
            return str(self.match_arg) in user
        if self.match == "iteration":
            return call_index == int(self.match_arg)
        raise InvalidArgumentError(f"unknown match kind {self.match!r}")


class ScriptedMockProvider:
    """Deterministic provider that replays an ordered response script."""

    def __init__(self, script: list):
        if not script:
            raise InvalidArgumentError("script must be non-empty")
        self._script = list(script)
        self._call_index = 0

    @classmethod
    def from_records(cls, records: list) -> "ScriptedMockProvider":
        entries = []
        for rec in records:
            match = rec.get("match", "any")
            entries.append(
                ScriptEntry(
                    match=match if isinstance(match, str) else match[0],
                    match_arg=rec.get("match_arg"),
                    response=rec.get("response"),
                    error=rec.get("error"),
                    truncated=bool(rec.get("truncated", False)),
                )
            )
        return cls(entries)

    def send(self, system: str, user: str, config: DecodingConfig) -> dict:
        self._call_index += 1
        for i, entry in enumerate(self._script):
            if entry.matches(user, self._call_index):
                del self._script[i]
                if entry.error is not None:
                    raise ProviderError(entry.error)
                return {
                    "text": entry.response or "",
                    "input_tokens": len(system + user) // 4,
                    "output_tokens": len(entry.response or "") // 4,
                    "truncated": entry.truncated,
                }
        raise ScriptExhaustedError(f"no script entry matched call {self._call_index}")


class HttpChatProvider:
    """Client for any chat-completions-compatible endpoint."""

    def __init__(
        self,
        endpoint: str,
        credential_env: str = "",
        timeout_s: float = 120.0,
        session: Optional[requests.Session] = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.credential_env = credential_env
        self.timeout_s = timeout_s
        self._session = session or requests.Session()

    def send(self, system: str, user: str, config: DecodingConfig) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.credential_env:
            credential = os.environ.get(self.credential_env, "")
            if not credential:
                raise CredentialMissingError(
                    f"environment variable {self.credential_env} is not set"
                )
            headers["Authorization"] = f"Bearer {credential}"
        payload = {
            "model": config.model_id,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": config.temperature,
            "top_p": config.top_p,
            "max_tokens": config.max_output_tokens,
        }
        try:
            resp = self._session.post(
                f"{self.endpoint}/chat/completions",
                json=payload,
                headers=headers,
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise ProviderError(f"transport failure: {exc}") from exc
        if resp.status_code in (401, 403):
            raise CredentialMissingError(f"provider rejected credentials ({resp.status_code})")
        if resp.status_code >= 400:
            raise ProviderError(f"provider returned {resp.status_code}: {resp.text[:500]}")
        body = resp.json()
        choice = body["choices"][0]
        usage = body.get("usage", {})
        return {
            "text": choice["message"]["content"] or "",
            "input_tokens": int(usage.get("prompt_tokens", 0)),
            "output_tokens": int(usage.get("completion_tokens", 0)),
            "truncated": choice.get("finish_reason") == "length",
        }


class LLMClient:
    """Retrying completion wrapper with an audit trail.

    One blocking call per evolution iteration; instances may be shared across
    tasks because the audit log serializes appends.
    """

    def __init__(
        self,
        provider,
        audit_log: Optional[AuditLog] = None,
        max_attempts: int = 3,
        backoff_base_s: float = 1.0,
        sleep=time.sleep,
    ):
        self.provider = provider
        self.audit_log = audit_log or AuditLog()
        self.max_attempts = max_attempts
        self.backoff_base_s = backoff_base_s
        self._sleep = sleep

    def complete(self, system: str, user: str, config: DecodingConfig) -> CompletionRecord:
        digest = prompt_digest(system, user)
        started = time.perf_counter()
        last_error: Optional[Exception] = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                reply = self.provider.send(system, user, config)
            except (CredentialMissingError, ScriptExhaustedError) as exc:
                self._audit_failure(digest, config, attempt, exc, started)
                raise
            except ProviderError as exc:
                last_error = exc
                if attempt < self.max_attempts:
                    self._sleep(self.backoff_base_s * 2 ** (attempt - 1))
                continue
            record = CompletionRecord(
                prompt_hash=digest,
                model_id=config.model_id,
                output_text=reply["text"],
                input_tokens=reply.get("input_tokens", 0),
                output_tokens=reply.get("output_tokens", 0),
                latency_s=time.perf_counter() - started,
                attempt=attempt,
                truncated=bool(reply.get("truncated", False)),
            )
            self.audit_log.append({"status": "ok", **record.to_record()})
            return record
        failure = ProviderError(f"provider failed after {self.max_attempts} attempts: {last_error}")
        self._audit_failure(digest, config, self.max_attempts, failure, started)
        raise failure

    def _audit_failure(self, digest, config, attempt, exc, started) -> None:
        self.audit_log.append(
            {
                "status": "error",
                "prompt_hash": digest,
                "model_id": config.model_id,
                "error": str(exc),
                "attempt": attempt,
                "latency_s": time.perf_counter() - started,
            }
        )


def scripted_mock(script: list) -> ScriptedMockProvider:
    """Build a mock provider from ScriptEntry objects or plain dict records."""
    if script and isinstance(script[0], dict):
        return ScriptedMockProvider.from_records(script)
    return ScriptedMockProvider(script)
