"""Pluggable text-generation backends.

Two families: deterministic offline mocks (the test workhorse; they count
their calls so idempotence can be asserted) and an HTTP client speaking
the OpenAI-compatible chat-completions wire protocol. A chat API carries
text only, so the HTTP backend drops the token payload with a logged
warning; payload correctness is asserted against the mocks instead.

Retries: transient failures (timeouts, connection drops, 429, 5xx) back
off exponentially from 0.5 s with x2 growth and +/-20% jitter; other 4xx
statuses fail immediately.
"""
from __future__ import annotations

import json
import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import requests

from .aggregator import TokenSet
from .context import REFERENCE_HEADER, Prompt, prompt_digest
from .errors import (
    ExhaustedRetries,
    HttpStatus,
    MalformedResponse,
    NoNnContext,
    Timeout,
    TransientBackendError,
    UnknownKind,
)

logger = logging.getLogger(__name__)

BACKOFF_BASE_S = 0.5
BACKOFF_FACTOR = 2.0
BACKOFF_JITTER = 0.2
DEFAULT_IN_FLIGHT = 4

ENV_BASE_URL = "GEN_BASE_URL"
ENV_API_KEY = "GEN_API_KEY"
ENV_MODEL = "GEN_MODEL"


@dataclass(eq=False)
class GenerationRequest:
    prompt: Prompt
    max_tokens: int = 512
    temperature: float = 0.0
    model: str = ""
    timeout_s: float = 60.0
    retries: int = 3

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if not np.isfinite(self.temperature) or self.temperature < 0:
            raise ValueError(f"temperature must be finite and >= 0, got {self.temperature}")

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, GenerationRequest)
            and self.prompt == other.prompt
            and self.max_tokens == other.max_tokens
            and self.temperature == other.temperature
            and self.model == other.model
            and self.timeout_s == other.timeout_s
            and self.retries == other.retries
        )


@dataclass
class GeneratedReport:
    text: str
    backend_id: str
    latency_s: float
    token_count: int


class MockBackend:
    """Deterministic offline backend; thread-safe call counter for tests."""

    def __init__(self, kind: str):
        self.kind = kind
        self.backend_id = f"mock:{kind}"
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, request: GenerationRequest) -> str:
        with self._lock:
            self.calls += 1
        if self.kind.startswith("fixed:"):
            return self.kind[len("fixed:"):]
        if self.kind == "echo-nn":
            marker = REFERENCE_HEADER + "\n"
            pos = request.prompt.user_text.find(marker)
            if pos < 0:
                raise NoNnContext("prompt carries no reference-report section")
            return request.prompt.user_text[pos + len(marker):]
        if self.kind == "echo-prompt-hash":
            return prompt_digest(request.prompt)
        raise UnknownKind(f"unknown mock kind {self.kind!r}")


def mock_backend(kind: str) -> MockBackend:
    """Build a mock backend: ``fixed:<text>``, ``echo-nn``, or ``echo-prompt-hash``."""
    if not (kind.startswith("fixed:") or kind in ("echo-nn", "echo-prompt-hash")):
        raise UnknownKind(f"unknown mock kind {kind!r}")
    return MockBackend(kind)


class HttpBackend:
    """OpenAI-compatible chat-completions client.

    POSTs ``{base_url}/chat/completions`` with {model, messages, temperature,
    max_tokens} and reads ``choices[0].message.content``. TokenSets cannot
    cross this wire; they are dropped with a one-time warning.
    """

    def __init__(self, base_url: str, api_key: str = "", model: str = "", session=None):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model = model
        self.backend_id = f"http:{self.base_url}"
        self._session = session or requests.Session()
        self._payload_warned = False

    def complete(self, request: GenerationRequest) -> str:
        if request.prompt.image_payload and not self._payload_warned:
            logger.warning(
                "dropping %d token set(s): the chat wire protocol is text-only",
                len(request.prompt.image_payload),
            )
            self._payload_warned = True
        messages = []
        if request.prompt.system_text:
            messages.append({"role": "system", "content": request.prompt.system_text})
        messages.append({"role": "user", "content": request.prompt.user_text})
        body = {
            "model": request.model or self.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self._session.post(
                f"{self.base_url}/chat/completions",
                json=body,
                headers=headers,
                timeout=request.timeout_s,
            )
        except requests.Timeout as exc:
            raise Timeout(f"request timed out after {request.timeout_s}s") from exc
        except requests.ConnectionError as exc:
            raise TransientBackendError(str(exc)) from exc
        if resp.status_code != 200:
            raise HttpStatus(resp.status_code, resp.text)
        try:
            data = resp.json()
            content = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected response shape: {exc}") from exc
        if not isinstance(content, str):
            raise MalformedResponse(f"content is {type(content).__name__}, not str")
        return content


def http_backend_from_env() -> HttpBackend:
    base_url = os.environ.get(ENV_BASE_URL, "")
    if not base_url:
        raise UnknownKind(f"{ENV_BASE_URL} is not set")
    return HttpBackend(
        base_url=base_url,
        api_key=os.environ.get(ENV_API_KEY, ""),
        model=os.environ.get(ENV_MODEL, ""),
    )


def _is_transient(exc: Exception) -> bool:
    if isinstance(exc, HttpStatus):
        return exc.is_transient()
    return isinstance(exc, TransientBackendError)


def generate(
    request: GenerationRequest,
    backend,
    sleep=time.sleep,
    rng: random.Random | None = None,
) -> GeneratedReport:
    """Run one generation with retry-on-transient-failure semantics.

    ``sleep`` and ``rng`` exist for deterministic tests; an empty backend
    response is surfaced as-is, never hidden.
    """
    rng = rng or random
    attempts = request.retries + 1
    last_exc: Exception | None = None
    start = time.perf_counter()
    for attempt in range(attempts):
        try:
            text = backend.complete(request)
        except Exception as exc:
            if not _is_transient(exc) or attempt == attempts - 1:
                if _is_transient(exc):
                    raise ExhaustedRetries(
                        f"gave up after {attempts} attempt(s): {exc}"
                    ) from exc
                raise
            last_exc = exc
            delay = BACKOFF_BASE_S * BACKOFF_FACTOR**attempt
            delay *= rng.uniform(1.0 - BACKOFF_JITTER, 1.0 + BACKOFF_JITTER)
            logger.debug("transient backend failure (%s); retrying in %.2fs", exc, delay)
            sleep(delay)
            continue
        latency = time.perf_counter() - start
        return GeneratedReport(
            text=text,
            backend_id=backend.backend_id,
            latency_s=latency,
            token_count=len(text.split()),
        )
    raise ExhaustedRetries(f"gave up after {attempts} attempt(s): {last_exc}")


def generate_many(
    requests_: list[GenerationRequest],
    backend,
    max_in_flight: int = DEFAULT_IN_FLIGHT,
) -> list[GeneratedReport | Exception]:
    """Run generations concurrently under a bounded in-flight budget.

    Results keep input order; failures are returned in place rather than
    raised, so callers can persist partial output with an error manifest.
    """
    results: list[GeneratedReport | Exception] = [None] * len(requests_)  # type: ignore[list-item]
    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        futures = {pool.submit(generate, req, backend): i for i, req in enumerate(requests_)}
        for future, i in futures.items():
            try:
                results[i] = future.result()
            except Exception as exc:
                results[i] = exc
    return results


# -- request (de)serialization ----------------------------------------------

def _token_set_to_json(ts: TokenSet) -> dict:
    return {"m": ts.m, "d": ts.d, "tokens": ts.tokens.tolist(), "pooled": ts.pooled.tolist()}


def _token_set_from_json(obj: dict) -> TokenSet:
    return TokenSet(
        m=obj["m"],
        d=obj["d"],
        tokens=np.asarray(obj["tokens"], dtype=np.float64),
        pooled=np.asarray(obj["pooled"], dtype=np.float64),
    )


def request_to_json(request: GenerationRequest) -> str:
    """Full-fidelity JSON for a request, including the token payload."""
    obj = {
        "model": request.model,
        "max_tokens": request.max_tokens,
        "temperature": request.temperature,
        "timeout_s": request.timeout_s,
        "retries": request.retries,
        "prompt": {
            "system_text": request.prompt.system_text,
            "user_text": request.prompt.user_text,
            "image_payload": [_token_set_to_json(ts) for ts in request.prompt.image_payload],
        },
    }
    return json.dumps(obj)


def request_from_json(blob: str) -> GenerationRequest:
    obj = json.loads(blob)
    prompt = Prompt(
        system_text=obj["prompt"]["system_text"],
        user_text=obj["prompt"]["user_text"],
        image_payload=[_token_set_from_json(t) for t in obj["prompt"]["image_payload"]],
    )
    return GenerationRequest(
        prompt=prompt,
        max_tokens=obj["max_tokens"],
        temperature=obj["temperature"],
        model=obj["model"],
        timeout_s=obj["timeout_s"],
        retries=obj["retries"],
    )
