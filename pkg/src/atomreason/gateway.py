"""Uniform completion interface over HTTP chat services and scripted rule tables."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence

import httpx

from .core import TokenUsage, sum_usage

logger = logging.getLogger(__name__)

DEFAULT_BACKOFF = (1.0, 2.0, 4.0)
DEFAULT_MAX_IN_FLIGHT = 32
ESTIMATE_FACTOR = 1.3


class BackendError(RuntimeError):
    pass


class BackendUnavailable(BackendError):
    pass


class CompletionRejected(BackendError):
    pass


class Timeout(BackendError):
    pass


class ScriptMiss(BackendError):
    pass


def estimate_tokens(text: str) -> int:
    """Whitespace-token count scaled by 1.3, rounded up."""
    return math.ceil(len(text.split()) * ESTIMATE_FACTOR)


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    temperature: float = 1.0
    max_output_tokens: int | None = None
    tag: str = "direct"
    # accounting metadata only; never sent to a backend and never affects matching
    state_index: int | None = None

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_output_tokens is not None and self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    usage: TokenUsage
    backend_id: str
    estimated: bool = False


class Backend(Protocol):
    backend_id: str

    def complete(self, request: CompletionRequest) -> CompletionResponse: ...


class BackendKind(str, enum.Enum):
    HTTP_CHAT = "http_chat"
    SCRIPTED = "scripted"


@dataclass(frozen=True)
class BackendConfig:
    kind: BackendKind = BackendKind.SCRIPTED
    endpoint: str | None = None
    model_name: str | None = None
    api_key_env: str | None = "OPENAI_API_KEY"
    script: str | None = None
    max_attempts: int = 3
    backoff: tuple[float, ...] = DEFAULT_BACKOFF
    timeout: float = 60.0
    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT

    def __post_init__(self) -> None:
        if not isinstance(self.kind, BackendKind):
            object.__setattr__(self, "kind", BackendKind(self.kind))
        if self.kind is BackendKind.HTTP_CHAT:
            missing = [
                name
                for name in ("endpoint", "model_name", "api_key_env")
                if not getattr(self, name)
            ]
            if missing:
                raise ValueError(f"http_chat backend requires {', '.join(missing)}")
        elif not self.script:
            raise ValueError("scripted backend requires a script source")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        # api_key_env is the variable *name*; the secret itself is never stored here
        return {
            "kind": self.kind.value,
            "endpoint": self.endpoint,
            "model_name": self.model_name,
            "api_key_env": self.api_key_env,
            "script": self.script,
            "max_attempts": self.max_attempts,
            "backoff": list(self.backoff),
            "timeout": self.timeout,
            "max_in_flight": self.max_in_flight,
        }


# -- scripted backend -------------------------------------------------------------


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ScriptRule:
    response: str
    prompt_sha256: str | None = None
    contains: tuple[str, ...] = ()
    excludes: tuple[str, ...] = ()
    tag: str | None = None
    usage: TokenUsage | None = None

    def matches_pattern(self, request: CompletionRequest) -> bool:
        if self.prompt_sha256 is not None:
            return False
        if self.tag is not None and self.tag != request.tag:
            return False
        p = request.prompt
        return all(s in p for s in self.contains) and not any(s in p for s in self.excludes)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ScriptRule:
        contains = d.get("contains", ())
        excludes = d.get("excludes", ())
        usage = d.get("usage")
        return cls(
            response=d["response"],
            prompt_sha256=d.get("prompt_sha256"),
            contains=(contains,) if isinstance(contains, str) else tuple(contains),
            excludes=(excludes,) if isinstance(excludes, str) else tuple(excludes),
            tag=d.get("tag"),
            usage=TokenUsage(
                int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)), 1
            )
            if usage
            else None,
        )

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {}
        if self.prompt_sha256:
            d["prompt_sha256"] = self.prompt_sha256
        if self.tag:
            d["tag"] = self.tag
        if self.contains:
            d["contains"] = list(self.contains)
        if self.excludes:
            d["excludes"] = list(self.excludes)
        if self.usage:
            d["usage"] = {
                "prompt_tokens": self.usage.prompt_tokens,
                "completion_tokens": self.usage.completion_tokens,
            }
        d["response"] = self.response
        return d


@dataclass(frozen=True)
class Script:
    rules: tuple[ScriptRule, ...] = ()
    default: str | None = None
    name: str = "script"

    @classmethod
    def from_dict(cls, d: dict[str, Any], name: str = "script") -> Script:
        return cls(
            tuple(ScriptRule.from_dict(r) for r in d.get("rules", ())),
            d.get("default"),
            d.get("name", name),
        )

    @classmethod
    def load(cls, path: str | Path) -> Script:
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")), name=path.stem)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"name": self.name, "rules": [r.to_dict() for r in self.rules]}
        if self.default is not None:
            d["default"] = self.default
        return d


def scripted_lookup(script: Script, request: CompletionRequest) -> CompletionResponse:
    """Resolve a request against a script: exact prompt hash, then first pattern, then default."""
    rule: ScriptRule | None = None
    digest = None
    for r in script.rules:
        if r.prompt_sha256 is not None:
            digest = digest or prompt_hash(request.prompt)
            if r.prompt_sha256 == digest:
                rule = r
                break
    if rule is None:
        rule = next((r for r in script.rules if r.matches_pattern(request)), None)
    if rule is not None:
        text, usage = rule.response, rule.usage
    elif script.default is not None:
        text, usage = script.default, None
    else:
        raise ScriptMiss(f"no rule in {script.name!r} matches a {request.tag!r} prompt")
    if usage is not None:
        return CompletionResponse(text, usage, f"scripted:{script.name}")
    estimated = TokenUsage(estimate_tokens(request.prompt), estimate_tokens(text), 1)
    return CompletionResponse(text, estimated, f"scripted:{script.name}", estimated=True)


class ScriptedBackend:
    def __init__(self, script: Script):
        self.script = script
        self.backend_id = f"scripted:{script.name}"

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        return scripted_lookup(self.script, request)


# -- HTTP chat-completion backend -------------------------------------------------


_RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class HttpChatBackend:
    """Single-turn chat-completion client (one user message, no system prompt)."""

    def __init__(
        self,
        config: BackendConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if config.kind is not BackendKind.HTTP_CHAT:
            raise ValueError("HttpChatBackend needs an http_chat config")
        self.config = config
        self.backend_id = f"http:{config.model_name}"
        self._client = httpx.Client(timeout=config.timeout, transport=transport)
        self._sleep = sleep

    def _api_key(self) -> str:
        key = os.environ.get(self.config.api_key_env or "", "")
        if not key:
            raise BackendUnavailable(f"environment variable {self.config.api_key_env} is not set")
        return key

    def payload(self, request: CompletionRequest) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
        }
        if request.max_output_tokens is not None:
            body["max_tokens"] = request.max_output_tokens
        return body

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        headers = {"Authorization": f"Bearer {self._api_key()}"}
        body = self.payload(request)
        last: BackendError | None = None
        for attempt in range(self.config.max_attempts):
            if attempt:
                delay = self.config.backoff[min(attempt - 1, len(self.config.backoff) - 1)]
                self._sleep(delay)
            try:
                resp = self._client.post(self.config.endpoint, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                last = Timeout(f"request timed out: {type(exc).__name__}")
            except httpx.TransportError as exc:
                last = BackendUnavailable(f"transport failure: {type(exc).__name__}")
            else:
                if resp.status_code in _RETRYABLE_STATUS:
                    last = BackendUnavailable(f"HTTP {resp.status_code}")
                elif resp.status_code >= 400:
                    raise CompletionRejected(f"HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    return self._parse(request, resp.json())
            logger.warning(
                "%s attempt %d/%d failed: %s",
                self.backend_id, attempt + 1, self.config.max_attempts, last,
            )
        assert last is not None
        raise last

    def _parse(self, request: CompletionRequest, data: dict[str, Any]) -> CompletionResponse:
        try:
            choice = data["choices"][0]
            message = choice.get("message") or {}
        except (KeyError, IndexError, TypeError) as exc:
            raise CompletionRejected(f"malformed response: {exc!r}") from None
        if message.get("refusal") or choice.get("finish_reason") == "content_filter":
            raise CompletionRejected(str(message.get("refusal") or "content filtered"))
        text = message.get("content") or ""
        usage = data.get("usage") or {}
        if "prompt_tokens" in usage and "completion_tokens" in usage:
            return CompletionResponse(
                text,
                TokenUsage(int(usage["prompt_tokens"]), int(usage["completion_tokens"]), 1),
                self.backend_id,
            )
        return CompletionResponse(
            text,
            TokenUsage(estimate_tokens(request.prompt), estimate_tokens(text), 1),
            self.backend_id,
            estimated=True,
        )

    def close(self) -> None:
        self._client.close()


def make_backend(config: BackendConfig) -> Backend:
    if config.kind is BackendKind.HTTP_CHAT:
        return HttpChatBackend(config)
    return ScriptedBackend(load_script(config.script or ""))


BUILTIN_SCRIPTS = Path(__file__).parent / "scripts"


def load_script(source: str) -> Script:
    """Load a script by file path, or by the name of a script shipped with the package."""
    path = Path(source)
    if path.is_file():
        return Script.load(path)
    builtin = BUILTIN_SCRIPTS / f"{source}.json"
    if builtin.is_file():
        return Script.load(builtin)
    raise FileNotFoundError(f"script not found: {source}")


# -- gateway ------------------------------------------------------------------------


@dataclass(frozen=True)
class LogEntry:
    tag: str
    usage: TokenUsage
    state_index: int | None
    estimated: bool


class Gateway:
    """Wraps a backend with a global in-flight cap and a race-free call log."""

    def __init__(self, backend: Backend, max_in_flight: int = DEFAULT_MAX_IN_FLIGHT):
        self.backend = backend
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self._log: list[LogEntry] = []
        self._listeners: list[Callable[[CompletionRequest, CompletionResponse], None]] = []

    def add_listener(self, fn: Callable[[CompletionRequest, CompletionResponse], None]) -> None:
        self._listeners.append(fn)

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        with self._slots:
            response = self.backend.complete(request)
        entry = LogEntry(request.tag, response.usage, request.state_index, response.estimated)
        with self._lock:
            self._log.append(entry)
        for fn in self._listeners:
            fn(request, response)
        return response

    @property
    def log(self) -> list[LogEntry]:
        with self._lock:
            return list(self._log)

    def total_usage(self) -> TokenUsage:
        return sum_usage(e.usage for e in self.log)

    def reset(self) -> None:
        with self._lock:
            self._log.clear()


def usage_report(log: Iterable[LogEntry]) -> dict[str, TokenUsage]:
    """Per-tag usage totals, keys in sorted order."""
    buckets: dict[str, list[TokenUsage]] = {}
    for entry in log:
        buckets.setdefault(entry.tag, []).append(entry.usage)
    return {tag: sum_usage(buckets[tag]) for tag in sorted(buckets)}


def complete(backend: Backend | Gateway, request: CompletionRequest) -> CompletionResponse:
    return backend.complete(request)


def scripted_gateway(rules: Sequence[dict[str, Any]], default: str | None = None,
                     max_in_flight: int = DEFAULT_MAX_IN_FLIGHT, name: str = "inline") -> Gateway:
    """Convenience for tests and examples: build a gateway over an inline rule list."""
    script = Script.from_dict({"rules": list(rules), "default": default}, name=name)
    return Gateway(ScriptedBackend(script), max_in_flight)


__all__ = [
    "Backend", "BackendConfig", "BackendError", "BackendKind", "BackendUnavailable",
    "CompletionRejected", "CompletionRequest", "CompletionResponse", "Gateway",
    "HttpChatBackend", "LogEntry", "Script", "ScriptMiss", "ScriptRule", "ScriptedBackend",
    "Timeout", "complete", "estimate_tokens", "load_script", "make_backend", "prompt_hash",
    "scripted_gateway", "scripted_lookup", "usage_report",
]
