"""Chat-completion client with bounded concurrency, retries and per-request idempotency.

Any backend is a *transport*: a callable ``(PromptRequest, BackendProfile) -> str``
that raises :class:`TransientBackendError` / :class:`PermanentBackendError` /
:class:`BackendTimeout`.  The default transport speaks the common
chat-completions HTTP JSON contract; :mod:`qasynth.mock` provides offline ones.
"""

from __future__ import annotations

import json
import logging
import os
import random
import socket
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

log = logging.getLogger(__name__)

ENV_ENDPOINT = "QASYNTH_ENDPOINT"
ENV_MODEL = "QASYNTH_MODEL"
ENV_API_KEY = "QASYNTH_API_KEY"


class GatewayError(Exception):
    """Base class for backend failures surfaced to callers."""


class TransientBackendError(GatewayError):
    """Retryable failure (connection reset, 429, 5xx)."""


class PermanentBackendError(GatewayError):
    """Non-retryable failure (4xx other than 429, malformed response)."""


class BackendTimeout(GatewayError):
    pass


class BackendUnreachable(GatewayError):
    """All retries exhausted."""


Transport = Callable[["PromptRequest", "BackendProfile"], str]


@dataclass(frozen=True)
class BackendProfile:
    endpoint_url: str
    model_id: str
    temperature: float = 0.6
    top_p: float = 0.95
    top_k: Optional[int] = None
    max_in_flight: int = 8
    timeout: float = 60.0
    retry_budget: int = 3
    backoff_base: float = 0.5
    api_key: Optional[str] = field(default=None, repr=False, compare=False)
    transport: Optional[Transport] = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature must be in [0, 2], got {self.temperature}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.retry_budget < 0:
            raise ValueError("retry_budget must be >= 0")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be positive or None (disabled)")

    @classmethod
    def from_env(cls, **overrides) -> "BackendProfile":
        endpoint = overrides.pop("endpoint_url", None) or os.environ.get(ENV_ENDPOINT)
        model = overrides.pop("model_id", None) or os.environ.get(ENV_MODEL)
        if not endpoint or not model:
            raise ValueError(f"set {ENV_ENDPOINT} and {ENV_MODEL} or pass endpoint_url/model_id")
        overrides.setdefault("api_key", os.environ.get(ENV_API_KEY))
        return cls(endpoint_url=endpoint, model_id=model, **overrides)


@dataclass(frozen=True)
class PromptRequest:
    request_id: str
    user_text: str
    system_text: str = ""
    decode_mode: str = "sampled"  # "sampled" | "greedy"

    def __post_init__(self) -> None:
        if self.decode_mode not in ("sampled", "greedy"):
            raise ValueError(f"decode_mode must be 'sampled' or 'greedy', got {self.decode_mode!r}")


@dataclass(frozen=True)
class CompletionResponse:
    request_id: str
    text: str
    backend_latency: float
    attempt_count: int


@dataclass(frozen=True)
class BatchError:
    """Per-item failure record in a batch result; the batch itself never aborts."""

    request_id: str
    error: str
    error_type: str

    @property
    def ok(self) -> bool:
        return False


BatchItem = Union[CompletionResponse, BatchError]


def sampling_params(request: PromptRequest, profile: BackendProfile) -> dict:
    """Decoding parameters for one request; greedy is sent as temperature 0."""
    if request.decode_mode == "greedy":
        return {"temperature": 0.0, "top_p": 1.0}
    params = {"temperature": profile.temperature, "top_p": profile.top_p}
    if profile.top_k is not None:
        params["top_k"] = profile.top_k
    return params


def build_payload(request: PromptRequest, profile: BackendProfile) -> dict:
    messages = []
    if request.system_text:
        messages.append({"role": "system", "content": request.system_text})
    messages.append({"role": "user", "content": request.user_text})
    return {"model": profile.model_id, "messages": messages, **sampling_params(request, profile)}


def http_transport(request: PromptRequest, profile: BackendProfile) -> str:
    body = json.dumps(build_payload(request, profile)).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    if profile.api_key:
        headers["Authorization"] = f"Bearer {profile.api_key}"
    req = urllib.request.Request(profile.endpoint_url, data=body, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=profile.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
    except urllib.error.HTTPError as exc:
        if exc.code == 429 or exc.code >= 500:
            raise TransientBackendError(f"HTTP {exc.code}") from exc
        raise PermanentBackendError(f"HTTP {exc.code}") from exc
    except (socket.timeout, TimeoutError) as exc:
        raise BackendTimeout(str(exc)) from exc
    except urllib.error.URLError as exc:
        if isinstance(exc.reason, (socket.timeout, TimeoutError)):
            raise BackendTimeout(str(exc.reason)) from exc
        raise TransientBackendError(str(exc.reason)) from exc
    except (ConnectionError, OSError) as exc:
        raise TransientBackendError(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise PermanentBackendError("response is not JSON") from exc
    try:
        return payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise PermanentBackendError("response missing choices[0].message.content") from exc


class Gateway:
    """Shareable client over one backend profile.

    The in-flight semaphore is the only shared mutable state besides the
    response cache that makes ``complete`` idempotent per ``request_id``.
    """

    def __init__(self, profile: BackendProfile, transcript_path: str | Path | None = None):
        self.profile = profile
        self._transport: Transport = profile.transport or http_transport
        self._slots = threading.BoundedSemaphore(profile.max_in_flight)
        self._cache: dict[str, CompletionResponse] = {}
        self._cache_lock = threading.Lock()
        self._transcript_lock = threading.Lock()
        self._transcript = Path(transcript_path) if transcript_path else None
        self._jitter = random.Random()

    def _sleep_backoff(self, attempt: int) -> None:
        base = self.profile.backoff_base
        if base > 0:
            time.sleep(base * (2 ** (attempt - 1)) * (0.5 + self._jitter.random()))

    def complete(self, request: PromptRequest) -> CompletionResponse:
        with self._cache_lock:
            cached = self._cache.get(request.request_id)
        if cached is not None:
            return cached
        attempts = 0
        last: Exception | None = None
        start = time.perf_counter()
        while attempts <= self.profile.retry_budget:
            attempts += 1
            try:
                with self._slots:
                    text = self._transport(request, self.profile)
            except PermanentBackendError:
                raise
            except (TransientBackendError, BackendTimeout) as exc:
                last = exc
                log.debug("request %s attempt %d failed: %s", request.request_id, attempts, exc)
                if attempts <= self.profile.retry_budget:
                    self._sleep_backoff(attempts)
                continue
            resp = CompletionResponse(request.request_id, text, time.perf_counter() - start, attempts)
            with self._cache_lock:
                self._cache.setdefault(request.request_id, resp)
                resp = self._cache[request.request_id]
            self._log_transcript(request, resp)
            return resp
        if isinstance(last, BackendTimeout):
            raise BackendTimeout(f"{request.request_id}: timed out after {attempts} attempts")
        raise BackendUnreachable(f"{request.request_id}: {attempts} attempts failed, last error: {last}")

    def complete_batch(self, requests: Sequence[PromptRequest]) -> list[BatchItem]:
        """Complete all requests; output order equals input order."""
        if not requests:
            return []

        def one(req: PromptRequest) -> BatchItem:
            try:
                return self.complete(req)
            except GatewayError as exc:
                return BatchError(req.request_id, str(exc), type(exc).__name__)

        workers = min(self.profile.max_in_flight, len(requests))
        if workers == 1:
            return [one(r) for r in requests]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, requests))

    def _log_transcript(self, request: PromptRequest, resp: CompletionResponse) -> None:
        if self._transcript is None:
            return
        row = {
            "request_id": request.request_id,
            "decode_mode": request.decode_mode,
            "user_text": request.user_text,
            "text": resp.text,
            "attempt_count": resp.attempt_count,
            "backend_latency": round(resp.backend_latency, 6),
        }
        with self._transcript_lock:
            self._transcript.parent.mkdir(parents=True, exist_ok=True)
            with open(self._transcript, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def as_gateway(backend: "Gateway | BackendProfile") -> Gateway:
    return backend if isinstance(backend, Gateway) else Gateway(backend)


def complete(request: PromptRequest, profile: BackendProfile) -> CompletionResponse:
    return Gateway(profile).complete(request)


def complete_batch(requests: Sequence[PromptRequest], profile: BackendProfile) -> list[BatchItem]:
    return Gateway(profile).complete_batch(requests)
