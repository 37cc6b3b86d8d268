"""Chat-completion access: HTTP and scripted backends behind one interface.

The scripted backend replays canned replies from match rules, which makes
every pipeline stage testable offline. The HTTP backend speaks the common
``/v1/chat/completions`` wire shape. A small JSONL-backed cache sits in
front of either; deterministic requests (temperature 0, or any request
carrying a ``seed_hint``) are cacheable, free-running samples are not.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

import requests

from .core import CallRecord, Candidate, Query

logger = logging.getLogger(__name__)

DEFAULT_RETRY_LIMIT = 3
DEFAULT_BACKOFF_S = 0.5
DEFAULT_TIMEOUT_S = 120.0


class TransportError(Exception):
    """The backend could not be reached, even after retries."""


class ProtocolError(Exception):
    """The backend answered, but not in the shape we understand."""


class ScriptMiss(Exception):
    """No scripted rule matched the rendered request."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown message role: {self.role!r}")

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ChatRequest:
    """One completion request.

    ``seed_hint`` is an opaque integer a caller sets to make a sampled call
    reproducible; it is forwarded to HTTP backends as ``seed`` and rendered
    into the text scripted rules match on.
    """

    messages: tuple
    temperature: float = 0.0
    max_tokens: int = 1024
    seed_hint: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("a request needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")

    @classmethod
    def user(
        cls,
        content: str,
        temperature: float = 0.0,
        max_tokens: int = 1024,
        seed_hint: Optional[int] = None,
    ) -> "ChatRequest":
        return cls(
            messages=(ChatMessage("user", content),),
            temperature=temperature,
            max_tokens=max_tokens,
            seed_hint=seed_hint,
        )

    def cacheable(self) -> bool:
        return self.temperature == 0.0 or self.seed_hint is not None

    def to_dict(self) -> dict:
        return {
            "messages": [m.to_dict() for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "seed_hint": self.seed_hint,
        }


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: str = "stop"
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_s: float = 0.0


@dataclass(frozen=True)
class BackendSpec:
    """Declarative backend choice: exactly one of HTTP or scripted.

    HTTP needs ``endpoint`` and ``model``; ``auth_env`` optionally names an
    environment variable holding a bearer token. Scripted needs
    ``script_path`` pointing at a rules file.
    """

    kind: str
    endpoint: Optional[str] = None
    model: Optional[str] = None
    auth_env: Optional[str] = None
    script_path: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind == "http":
            if not self.endpoint or not self.model:
                raise ValueError("http backend needs endpoint and model")
            if self.script_path is not None:
                raise ValueError("http backend must not set script_path")
        elif self.kind == "scripted":
            if not self.script_path:
                raise ValueError("scripted backend needs script_path")
            if self.endpoint or self.model or self.auth_env:
                raise ValueError("scripted backend only takes script_path")
        else:
            raise ValueError(f"unknown backend kind: {self.kind!r}")

    def model_id(self) -> str:
        # Content hash, not path: the same rules must produce the same cache
        # keys wherever the file lives, and different rules must not collide.
        if self.kind == "http":
            return self.model
        digest = hashlib.sha256(Path(self.script_path).read_bytes()).hexdigest()
        return f"scripted:{digest[:12]}"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "endpoint": self.endpoint,
            "model": self.model,
            "auth_env": self.auth_env,
            "script_path": self.script_path,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BackendSpec":
        return cls(
            kind=d["kind"],
            endpoint=d.get("endpoint"),
            model=d.get("model"),
            auth_env=d.get("auth_env"),
            script_path=d.get("script_path"),
        )


def render_request_text(request: ChatRequest) -> str:
    """Canonical plain-text view of a request.

    Scripted rules match against this rendering, and prompt hashes are taken
    over it. The seed hint is included so rules can address individual
    samples of an otherwise identical prompt.
    """
    lines = [f"temperature: {request.temperature:g}"]
    if request.seed_hint is not None:
        lines.append(f"seed_hint: {request.seed_hint}")
    for message in request.messages:
        lines.append(f"{message.role}: {message.content}")
    return "\n".join(lines)


def prompt_hash(request: ChatRequest) -> str:
    return hashlib.sha256(render_request_text(request).encode("utf-8")).hexdigest()


def cache_key(request: ChatRequest, backend: Any) -> str:
    """Stable key over everything that determines a cacheable reply."""
    if isinstance(backend, BackendSpec):
        model_id = backend.model_id()
    elif isinstance(backend, str):
        model_id = backend
    else:
        model_id = backend.model_id
    payload = {
        "model": model_id,
        "messages": [m.to_dict() for m in request.messages],
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
        "seed_hint": request.seed_hint,
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def derive_seed(*parts: Any) -> int:
    """Stable non-negative 63-bit seed from arbitrary labelled parts."""
    blob = "|".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big") >> 1


@dataclass(frozen=True)
class ScriptRule:
    """Matches when every ``prompt_contains`` substring occurs in the rendered
    request (or its hash equals ``prompt_hash``). An empty substring list
    matches everything, which makes a final catch-all rule easy."""

    reply: str
    prompt_contains: tuple = ()
    rule_hash: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "prompt_contains", tuple(self.prompt_contains))

    def matches(self, rendered: str, rendered_hash: str) -> bool:
        if self.rule_hash is not None:
            return self.rule_hash == rendered_hash
        return all(s in rendered for s in self.prompt_contains)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScriptRule":
        match = d.get("match", {})
        return cls(
            reply=d["reply"],
            prompt_contains=tuple(match.get("prompt_contains", [])),
            rule_hash=match.get("prompt_hash"),
        )


class ScriptedBackend:
    """Replays canned replies; first matching rule wins."""

    def __init__(self, rules: Sequence[ScriptRule], model_id: str = "scripted"):
        self._rules = list(rules)
        self.model_id = model_id

    @classmethod
    def from_file(cls, path: str) -> "ScriptedBackend":
        rules = []
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rules.append(ScriptRule.from_dict(json.loads(line)))
                except (json.JSONDecodeError, KeyError) as exc:
                    raise ValueError(f"{path}:{line_no}: bad script rule: {exc}") from exc
        return cls(rules, model_id=f"scripted:{path}")

    def complete(self, request: ChatRequest) -> ChatResponse:
        rendered = render_request_text(request)
        rendered_hash = hashlib.sha256(rendered.encode("utf-8")).hexdigest()
        for rule in self._rules:
            if rule.matches(rendered, rendered_hash):
                return ChatResponse(text=rule.reply)
        preview = rendered if len(rendered) <= 400 else rendered[:400] + "..."
        raise ScriptMiss(
            f"no rule matched request (hash {rendered_hash}):\n{preview}"
        )


class HttpBackend:
    """POSTs to ``<endpoint>/chat/completions`` with retry on transient failures.

    Transient means connection errors, HTTP 5xx, and 429; those retry with
    exponential backoff up to ``retry_limit`` extra attempts, then raise
    TransportError. Anything else the server says that we cannot interpret
    raises ProtocolError.
    """

    def __init__(
        self,
        spec: BackendSpec,
        retry_limit: int = DEFAULT_RETRY_LIMIT,
        backoff_s: float = DEFAULT_BACKOFF_S,
        timeout_s: float = DEFAULT_TIMEOUT_S,
        top_p: float = 0.95,
        sleep: Callable[[float], None] = time.sleep,
        session: Optional[requests.Session] = None,
    ):
        if spec.kind != "http":
            raise ValueError("HttpBackend needs an http BackendSpec")
        self._spec = spec
        self._retry_limit = retry_limit
        self._backoff_s = backoff_s
        self._timeout_s = timeout_s
        self._top_p = top_p
        self._sleep = sleep
        self._session = session or requests.Session()
        self.model_id = spec.model_id()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self._spec.auth_env:
            import os

            token = os.environ.get(self._spec.auth_env, "")
            if not token:
                raise ValueError(
                    f"auth_env {self._spec.auth_env!r} is not set in the environment"
                )
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _body(self, request: ChatRequest) -> dict:
        body: dict = {
            "model": self._spec.model,
            "messages": [m.to_dict() for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.temperature > 0:
            body["top_p"] = self._top_p
        if request.seed_hint is not None:
            body["seed"] = request.seed_hint
        return body

    def complete(self, request: ChatRequest) -> ChatResponse:
        url = self._spec.endpoint.rstrip("/") + "/chat/completions"
        body = self._body(request)
        headers = self._headers()
        last_error = "no attempt made"
        for attempt in range(self._retry_limit + 1):
            if attempt:
                self._sleep(self._backoff_s * (2 ** (attempt - 1)))
            started = time.monotonic()
            try:
                http_resp = self._session.post(
                    url, json=body, headers=headers, timeout=self._timeout_s
                )
            except requests.RequestException as exc:
                last_error = f"request failed: {exc}"
                logger.warning("backend attempt %d failed: %s", attempt + 1, exc)
                continue
            if http_resp.status_code >= 500 or http_resp.status_code == 429:
                last_error = f"HTTP {http_resp.status_code}"
                logger.warning(
                    "backend attempt %d got retryable status %d",
                    attempt + 1,
                    http_resp.status_code,
                )
                continue
            if http_resp.status_code != 200:
                raise ProtocolError(
                    f"HTTP {http_resp.status_code}: {http_resp.text[:200]}"
                )
            return self._parse(http_resp, time.monotonic() - started)
        raise TransportError(
            f"backend unreachable after {self._retry_limit + 1} attempts ({last_error})"
        )

    @staticmethod
    def _parse(http_resp: requests.Response, latency_s: float) -> ChatResponse:
        try:
            payload = http_resp.json()
            choice = payload["choices"][0]
            text = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(
                f"malformed completion body: {http_resp.text[:200]}"
            ) from exc
        if not isinstance(text, str):
            raise ProtocolError("completion content is not a string")
        usage = payload.get("usage", {}) or {}
        return ChatResponse(
            text=text,
            finish_reason=choice.get("finish_reason", "stop"),
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            latency_s=latency_s,
        )


def make_backend(spec: BackendSpec, **kwargs: Any):
    if spec.kind == "scripted":
        backend = ScriptedBackend.from_file(spec.script_path)
        backend.model_id = spec.model_id()
        return backend
    return HttpBackend(spec, **kwargs)


def complete(request: ChatRequest, backend: Any) -> ChatResponse:
    """One-shot completion against a BackendSpec or an already-built backend."""
    if isinstance(backend, BackendSpec):
        backend = make_backend(backend)
    return backend.complete(request)


class ResponseCache:
    """Append-only JSONL cache of reply text keyed by cache_key.

    First write wins for a given key; later puts are ignored so concurrent
    duplicate calls cannot flap the stored value.
    """

    def __init__(self, path: Optional[str] = None):
        self._path = Path(path) if path else None
        self._data: dict = {}
        self._lock = threading.Lock()
        if self._path and self._path.exists():
            with open(self._path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    entry = json.loads(line)
                    self._data.setdefault(entry["key"], entry["text"])

    def __len__(self) -> int:
        return len(self._data)

    def get(self, key: str) -> Optional[str]:
        with self._lock:
            return self._data.get(key)

    def put(self, key: str, text: str) -> None:
        with self._lock:
            if key in self._data:
                return
            self._data[key] = text
            if self._path:
                self._path.parent.mkdir(parents=True, exist_ok=True)
                with open(self._path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "text": text}, ensure_ascii=False))
                    fh.write("\n")


# A call log is just an ordered list of CallRecords owned by one run.
CallLog = list


@dataclass
class _Execution:
    response: ChatResponse
    cache_hit: bool
    key: str


class Gateway:
    """Backend plus cache plus a global in-flight limit.

    All pipeline traffic flows through here so runs get a consistent trace:
    every call appends a CallRecord (purpose, cache key, hit flag, request,
    reply) to the caller's log in request order, even when the underlying
    calls ran concurrently.
    """

    def __init__(
        self,
        backend: Any,
        cache: Optional[ResponseCache] = None,
        max_inflight: int = 8,
    ):
        if isinstance(backend, BackendSpec):
            backend = make_backend(backend)
        self._backend = backend
        self._cache = cache
        self._semaphore = threading.BoundedSemaphore(max_inflight)
        self._max_inflight = max_inflight

    @property
    def backend(self) -> Any:
        return self._backend

    def _execute(self, request: ChatRequest) -> _Execution:
        key = cache_key(request, self._backend)
        use_cache = self._cache is not None and request.cacheable()
        if use_cache:
            cached = self._cache.get(key)
            if cached is not None:
                return _Execution(ChatResponse(text=cached), True, key)
        started = time.monotonic()
        with self._semaphore:
            response = self._backend.complete(request)
        if response.latency_s == 0.0:
            response = ChatResponse(
                text=response.text,
                finish_reason=response.finish_reason,
                prompt_tokens=response.prompt_tokens,
                completion_tokens=response.completion_tokens,
                latency_s=time.monotonic() - started,
            )
        if use_cache:
            self._cache.put(key, response.text)
        return _Execution(response, False, key)

    @staticmethod
    def _record(purpose: str, request: ChatRequest, execution: _Execution) -> CallRecord:
        return CallRecord(
            purpose=purpose,
            cache_key=execution.key,
            cache_hit=execution.cache_hit,
            request=request.to_dict(),
            reply=execution.response.text,
            latency_s=execution.response.latency_s,
        )

    def complete(
        self,
        request: ChatRequest,
        purpose: str = "call",
        log: Optional[CallLog] = None,
    ) -> ChatResponse:
        execution = self._execute(request)
        if log is not None:
            log.append(self._record(purpose, request, execution))
        return execution.response

    def complete_many(
        self,
        requests_batch: Sequence[ChatRequest],
        purpose: str = "call",
        log: Optional[CallLog] = None,
    ) -> list:
        """Run a batch concurrently; results and log entries keep batch order.

        Cacheable duplicates inside one batch execute once: the first
        occurrence does the work, the rest are recorded as cache hits. That
        keeps repeat prompts deterministic regardless of thread timing.
        Uncacheable requests always execute individually (they are meant to
        be independent samples). Any failure fails the whole batch, raising
        the error of the earliest failing request.
        """
        if not requests_batch:
            return []
        primary_for_key: dict = {}
        run_indices: list = []
        alias_of: dict = {}
        for idx, request in enumerate(requests_batch):
            if request.cacheable():
                key = cache_key(request, self._backend)
                if key in primary_for_key:
                    alias_of[idx] = primary_for_key[key]
                    continue
                primary_for_key[key] = idx
            run_indices.append(idx)

        executions: dict = {}
        errors: dict = {}
        workers = min(len(run_indices), self._max_inflight) or 1

        def work(i: int) -> None:
            try:
                executions[i] = self._execute(requests_batch[i])
            except Exception as exc:  # re-raised below, earliest index first
                errors[i] = exc

        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, run_indices))

        if errors:
            raise errors[min(errors)]

        responses: list = []
        for idx, request in enumerate(requests_batch):
            if idx in alias_of:
                source = executions[alias_of[idx]]
                execution = _Execution(
                    ChatResponse(text=source.response.text), True, source.key
                )
            else:
                execution = executions[idx]
            if log is not None:
                log.append(self._record(purpose, request, execution))
            responses.append(execution.response)
        return responses

    def sample_candidates(
        self,
        query: Query,
        n: int,
        temperature: float,
        seed: int,
        log: Optional[CallLog] = None,
        max_tokens: int = 1024,
    ) -> list:
        """Draw n candidate responses for a query.

        Each sample gets its own derived seed hint, so the batch is
        reproducible and cacheable while still being n distinct draws.
        All-or-nothing: a failed sample fails the whole batch.
        """
        if n < 2:
            raise ValueError("candidate sampling needs n >= 2")
        batch = [
            ChatRequest.user(
                query.text,
                temperature=temperature,
                max_tokens=max_tokens,
                seed_hint=derive_seed(seed, query.id, f"sample-{i}"),
            )
            for i in range(n)
        ]
        responses = self.complete_many(batch, purpose="sample", log=log)
        return [Candidate(index=i, text=r.text) for i, r in enumerate(responses)]
