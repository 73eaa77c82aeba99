"""Uniform interface over chat-completion backends with caching and replay.

Backends produce one completion per (request, sample_index) call; the gateway
realizes multi-sample requests as repeated single-sample calls so that every
sample has a stable digest and its own cache entry. A warm cache therefore
makes any pipeline rerun free of backend traffic.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import requests


class GatewayError(Exception):
    """Base class for backend/cache failures."""


class TransportError(GatewayError):
    """Backend unreachable after bounded retries."""


class ProtocolError(GatewayError):
    """Backend reachable but its response is malformed."""


class FixtureMissError(GatewayError):
    """Scripted backend asked for a request outside its fixture set."""


class CacheError(GatewayError):
    """Cache entry exists but cannot be served."""


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.7
    top_p: float = 1.0
    top_k: Optional[int] = None
    max_tokens: int = 1024
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if not (0 < self.top_p <= 1):
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError(f"top_k must be >= 1 when set, got {self.top_k}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be positive, got {self.max_tokens}")

    @property
    def is_greedy(self) -> bool:
        return self.temperature == 0


GREEDY = SamplingParams(temperature=0.0)

ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatRequest:
    backend_id: str
    model_name: str
    messages: tuple[tuple[str, str], ...]
    params: SamplingParams = SamplingParams()
    n_samples: int = 1

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("messages must be non-empty")
        for role, _ in self.messages:
            if role not in ROLES:
                raise ValueError(f"unknown message role {role!r}")
        if self.messages[-1][0] != "user":
            raise ValueError("last message must have role 'user'")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be positive, got {self.n_samples}")


def user_request(
    backend_id: str,
    model_name: str,
    prompt: str,
    params: SamplingParams = SamplingParams(),
    n_samples: int = 1,
) -> ChatRequest:
    """Single-user-message request, the common case for all pipelines."""
    return ChatRequest(
        backend_id=backend_id,
        model_name=model_name,
        messages=(("user", prompt),),
        params=params,
        n_samples=n_samples,
    )


@dataclass(frozen=True)
class Completion:
    text: str
    sample_index: int
    finish_reason: str = "stop"  # stop | length | error
    from_cache: bool = False
    backend_id: str = ""


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def request_digest(request: ChatRequest, sample_index: Optional[int] = None) -> str:
    """Stable digest over request content plus (optionally) a sample index.

    Digests with sample_index=None key scripted fixtures (one entry per
    request, ordered texts inside); digests with a concrete index key cache
    entries. Serialization is key-sorted, so field order cannot leak in.
    """
    payload = {
        "backend_id": request.backend_id,
        "model_name": request.model_name,
        "messages": [{"role": r, "content": c} for r, c in request.messages],
        "params": {
            "temperature": request.params.temperature,
            "top_p": request.params.top_p,
            "top_k": request.params.top_k,
            "max_tokens": request.params.max_tokens,
            "seed": request.params.seed,
        },
        "sample_index": sample_index,
    }
    return hashlib.sha256(_canonical(payload).encode("utf-8")).hexdigest()


class CompletionCache:
    """Directory of JSON entries named by per-sample digest.

    Writes go through a temp file plus atomic rename, so a partially written
    entry never carries the final name and is never served.
    """

    def __init__(self, root_path: str | Path):
        self.root = Path(root_path)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, digest: str) -> Path:
        return self.root / f"{digest}.json"

    def get(self, digest: str) -> Optional[dict]:
        path = self._path(digest)
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise CacheError(f"unreadable cache entry {path}: {e}") from e

    def put(self, digest: str, entry: dict) -> None:
        path = self._path(digest)
        with self._lock:
            tmp = path.with_suffix(".json.tmp")
            tmp.write_text(_canonical(entry), encoding="utf-8")
            os.replace(tmp, path)


class Backend:
    """One backend = one way to produce a single completion text."""

    def generate(self, request: ChatRequest, sample_index: int) -> str:
        raise NotImplementedError


class ScriptedBackend(Backend):
    """Replays a fixture table mapping request digest -> ordered texts.

    Total over its fixture set; anything outside it is a hard miss, never
    improvised text.
    """

    def __init__(self, fixtures: Optional[dict[str, list[str]]] = None):
        self.fixtures: dict[str, list[str]] = dict(fixtures or {})

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ValueError(f"fixture file {path} must hold a JSON object")
        return cls({str(k): list(v) for k, v in data.items()})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.fixtures, sort_keys=True, indent=2, ensure_ascii=False),
            encoding="utf-8",
        )

    def add(self, request: ChatRequest, texts: Sequence[str]) -> None:
        """Register the ordered sample texts for one request."""
        self.fixtures[request_digest(request)] = list(texts)

    def generate(self, request: ChatRequest, sample_index: int) -> str:
        digest = request_digest(request)
        texts = self.fixtures.get(digest)
        if texts is None:
            raise FixtureMissError(
                f"no fixture for request digest {digest} (backend {request.backend_id})"
            )
        if sample_index >= len(texts):
            raise FixtureMissError(
                f"fixture {digest} has {len(texts)} samples, index {sample_index} requested"
            )
        return texts[sample_index]


class CallableBackend(Backend):
    """Adapter turning a pure function into a backend; handy for simulations."""

    def __init__(self, fn: Callable[[ChatRequest, int], str]):
        self.fn = fn

    def generate(self, request: ChatRequest, sample_index: int) -> str:
        return self.fn(request, sample_index)


class CountingBackend(Backend):
    """Wrapper that counts generate() calls; used to assert replay closure."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.calls = 0
        self._lock = threading.Lock()

    def generate(self, request: ChatRequest, sample_index: int) -> str:
        with self._lock:
            self.calls += 1
        return self.inner.generate(request, sample_index)


class RecordingBackend(Backend):
    """Wrapper that records completions for export as scripted fixtures.

    Record against a cold cache so every sample index is observed; exporting
    with gaps (some indices served from cache) is an error.
    """

    def __init__(self, inner: Backend):
        self.inner = inner
        self.recorded: dict[str, dict[int, str]] = {}

    def generate(self, request: ChatRequest, sample_index: int) -> str:
        text = self.inner.generate(request, sample_index)
        self.recorded.setdefault(request_digest(request), {})[sample_index] = text
        return text

    def fixtures(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for digest, by_index in self.recorded.items():
            indices = sorted(by_index)
            if indices != list(range(len(indices))):
                raise ValueError(
                    f"recorded samples for {digest} are not contiguous: {indices}"
                )
            out[digest] = [by_index[i] for i in indices]
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.fixtures(), sort_keys=True, indent=2, ensure_ascii=False),
            encoding="utf-8",
        )


RETRY_ATTEMPTS = 3
RETRY_BASE_DELAY_S = 1.0


class HttpBackend(Backend):
    """OpenAI-compatible chat-completions client with bounded retries.

    Retries (3 attempts, exponential backoff from 1 s) apply only to transport
    failures and 429/5xx responses; other HTTP errors and malformed bodies are
    protocol errors.
    """

    def __init__(
        self,
        base_url: str,
        auth_env_var: Optional[str] = None,
        timeout_s: float = 120.0,
        post_fn: Optional[Callable] = None,
        sleep_fn: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.auth_env_var = auth_env_var
        self.timeout_s = timeout_s
        self._post = post_fn or requests.post
        self._sleep = sleep_fn

    def payload(self, request: ChatRequest, sample_index: int) -> dict:
        body = {
            "model": request.model_name,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.params.temperature,
            "top_p": request.params.top_p,
            "max_tokens": request.params.max_tokens,
            "n": 1,
        }
        if request.params.top_k is not None:
            body["top_k"] = request.params.top_k
        if request.params.seed is not None:
            # Offset by sample index so repeated single-sample calls differ.
            body["seed"] = request.params.seed + sample_index
        return body

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.auth_env_var:
            key = os.environ.get(self.auth_env_var, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def generate(self, request: ChatRequest, sample_index: int) -> str:
        url = f"{self.base_url}/chat/completions"
        body = self.payload(request, sample_index)
        last_error: Optional[Exception] = None
        for attempt in range(RETRY_ATTEMPTS):
            try:
                resp = self._post(url, json=body, headers=self._headers(), timeout=self.timeout_s)
            except requests.RequestException as e:
                last_error = TransportError(f"{url}: {e}")
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_error = TransportError(f"{url}: HTTP {resp.status_code}")
                elif resp.status_code != 200:
                    raise ProtocolError(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    return self._extract_text(resp)
            if attempt < RETRY_ATTEMPTS - 1:
                self._sleep(RETRY_BASE_DELAY_S * (2**attempt))
        raise TransportError(f"giving up after {RETRY_ATTEMPTS} attempts: {last_error}")

    @staticmethod
    def _extract_text(resp) -> str:
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise ProtocolError(f"malformed chat-completions response: {e}") from e
        if not isinstance(text, str):
            raise ProtocolError(f"completion content is {type(text).__name__}, not str")
        return text


class Gateway:
    """Routes requests to registered backends through the completion cache.

    Safe for concurrent complete() calls; a global semaphore caps in-flight
    backend requests and cache writes are serialized inside the cache.
    """

    def __init__(
        self,
        backends: dict[str, Backend],
        cache: CompletionCache,
        max_in_flight: int = 8,
    ):
        self.backends = dict(backends)
        self.cache = cache
        self._sem = threading.Semaphore(max_in_flight)

    def complete(self, request: ChatRequest) -> list[Completion]:
        backend = self.backends.get(request.backend_id)
        if backend is None:
            raise GatewayError(f"backend {request.backend_id!r} is not registered")
        completions = []
        for i in range(request.n_samples):
            digest = request_digest(request, i)
            entry = self.cache.get(digest)
            if entry is not None:
                completions.append(
                    Completion(
                        text=entry["text"],
                        sample_index=i,
                        finish_reason=entry.get("finish_reason", "stop"),
                        from_cache=True,
                        backend_id=request.backend_id,
                    )
                )
                continue
            with self._sem:
                text = backend.generate(request, i)
            self.cache.put(digest, {"text": text, "finish_reason": "stop"})
            completions.append(
                Completion(
                    text=text,
                    sample_index=i,
                    finish_reason="stop",
                    from_cache=False,
                    backend_id=request.backend_id,
                )
            )
        return completions


# Default sampling used by the pipelines; all overridable through run config.
MATH_SAMPLING = SamplingParams(temperature=0.7, top_k=20)
CODE_SAMPLING_GPT = SamplingParams(temperature=1.0, top_p=1.0)
CODE_SAMPLING_LLAMA = SamplingParams(temperature=0.6, top_p=0.9)
CODE_STUDENT_SAMPLING = GREEDY
