"""One completion call per prompt, over HTTP or a deterministic mock.

Supported kinds:

``openai_compat``  POST /v1/chat/completions
``anthropic``      POST /v1/messages
``ollama_local``   POST /api/chat
``mock``           no network; fixture replay or seeded procedural answers

API keys are read from the environment variable named in the config at call
time and never stored anywhere else.
"""

from __future__ import annotations

import json
import logging
import os
import random
import threading
import time
from dataclasses import asdict, dataclass, replace
from typing import Any, Callable, Mapping

import httpx

from ._util import content_hash
from .errors import (
    AuthError,
    MalformedResponse,
    NetworkError,
    NotApplicable,
    ProviderError,
    RateLimited,
    RetriesExhausted,
    SchemaError,
    ServerError,
)

logger = logging.getLogger(__name__)

KINDS = ("openai_compat", "anthropic", "ollama_local", "mock")
KIND_ALIASES = {"openai": "openai_compat", "ollama": "ollama_local", "claude": "anthropic"}

DEFAULT_BASE_URLS = {
    "openai_compat": "https://api.openai.com",
    "anthropic": "https://api.anthropic.com",
    "ollama_local": "http://localhost:11434",
    "mock": "",
}
DEFAULT_KEY_ENVS = {
    "openai_compat": "OPENAI_API_KEY",
    "anthropic": "ANTHROPIC_API_KEY",
    "ollama_local": "",
    "mock": "",
}
ENDPOINTS = {
    "openai_compat": "/v1/chat/completions",
    "anthropic": "/v1/messages",
    "ollama_local": "/api/chat",
}
ANTHROPIC_VERSION = "2023-06-01"


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    model_id: str
    temperature: float = 0.0
    max_tokens: int = 1024
    base_url: str | None = None
    api_key_env: str | None = None
    request_timeout_s: int = 120
    fixture_path: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown provider kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if not self.model_id:
            raise SchemaError("model_id must be non-empty")
        if self.temperature < 0:
            raise SchemaError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise SchemaError("max_tokens must be >= 1")
        if self.base_url is None:
            object.__setattr__(self, "base_url", DEFAULT_BASE_URLS[self.kind])
        if self.api_key_env is None:
            object.__setattr__(self, "api_key_env", DEFAULT_KEY_ENVS[self.kind])

    @property
    def spec(self) -> str:
        return f"{self.kind}:{self.model_id}"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ModelConfig:
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def parse_model_spec(spec: str, **overrides: Any) -> ModelConfig:
    """``"<kind>:<model_id>"`` -> ModelConfig. The model id may itself contain colons."""
    kind, sep, model_id = spec.partition(":")
    if not sep or not model_id:
        raise SchemaError(f"model must look like <kind>:<model_id>, got {spec!r}")
    kind = KIND_ALIASES.get(kind, kind)
    return ModelConfig(kind=kind, model_id=model_id, **{k: v for k, v in overrides.items() if v is not None})


@dataclass(frozen=True)
class ChatRequest:
    user: str
    system: str | None = None

    def __post_init__(self):
        if not self.user:
            raise ValueError("request user text must be non-empty")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    latency_ms: int = 0
    input_tokens: int | None = None
    output_tokens: int | None = None
    model_echo: str | None = None
    attempts: int = 1

    @property
    def token_usage(self) -> dict[str, int] | None:
        if self.input_tokens is None and self.output_tokens is None:
            return None
        return {"input": self.input_tokens, "output": self.output_tokens}


def prompt_hash(request: ChatRequest) -> str:
    if request.system:
        return content_hash(request.system + "\x00" + request.user)
    return content_hash(request.user)


# -- wire format ------------------------------------------------------------


def _dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def encode_request(config: ModelConfig, request: ChatRequest) -> tuple[str, str]:
    """Return ``(endpoint path, JSON body)`` for an HTTP provider."""
    user = {"role": "user", "content": request.user}
    if config.kind == "openai_compat":
        messages = [{"role": "system", "content": request.system}] if request.system else []
        body = {
            "model": config.model_id,
            "temperature": config.temperature,
            "max_tokens": config.max_tokens,
            "messages": messages + [user],
        }
    elif config.kind == "anthropic":
        body = {"model": config.model_id, "max_tokens": config.max_tokens}
        if request.system:
            body["system"] = request.system
        body["messages"] = [user]
        body["temperature"] = config.temperature
    elif config.kind == "ollama_local":
        messages = [{"role": "system", "content": request.system}] if request.system else []
        body = {
            "model": config.model_id,
            "messages": messages + [user],
            "options": {"temperature": config.temperature, "num_predict": config.max_tokens},
            "stream": False,
        }
    else:
        raise NotApplicable(f"provider kind {config.kind!r} has no wire format")
    return ENDPOINTS[config.kind], _dumps(body)


def _dig(body: Any, path: list[str | int]) -> Any:
    cur = body
    shown = ""
    for key in path:
        shown += f"[{key}]" if isinstance(key, int) else (f".{key}" if shown else key)
        try:
            cur = cur[key]
        except (KeyError, IndexError, TypeError):
            raise MalformedResponse("missing field", path=shown) from None
    return cur


def _opt_int(value: Any) -> int | None:
    return value if isinstance(value, int) and not isinstance(value, bool) else None


def decode_response(kind: str, body: str | bytes | Mapping[str, Any], latency_ms: int = 0) -> ChatResponse:
    if kind not in ENDPOINTS:
        raise NotApplicable(f"provider kind {kind!r} has no wire format")
    if isinstance(body, (str, bytes)):
        try:
            body = json.loads(body)
        except json.JSONDecodeError as exc:
            raise MalformedResponse(f"body is not JSON ({exc.msg})", path="$") from None
    if not isinstance(body, Mapping):
        raise MalformedResponse("body is not a JSON object", path="$")

    if kind == "openai_compat":
        text_path: list[str | int] = ["choices", 0, "message", "content"]
        usage = body.get("usage") or {}
        tokens = (usage.get("prompt_tokens"), usage.get("completion_tokens"))
    elif kind == "anthropic":
        blocks = _dig(body, ["content"])
        idx = next(
            (i for i, b in enumerate(blocks) if isinstance(b, Mapping) and b.get("type", "text") == "text"),
            0,
        ) if isinstance(blocks, list) else 0
        text_path = ["content", idx, "text"]
        usage = body.get("usage") or {}
        tokens = (usage.get("input_tokens"), usage.get("output_tokens"))
    else:
        text_path = ["message", "content"]
        tokens = (body.get("prompt_eval_count"), body.get("eval_count"))

    text = _dig(body, text_path)
    if not isinstance(text, str):
        raise MalformedResponse("text is not a string", path=".".join(map(str, text_path)))
    model = body.get("model")
    return ChatResponse(
        text=text,
        latency_ms=max(0, int(latency_ms)),
        input_tokens=_opt_int(tokens[0]),
        output_tokens=_opt_int(tokens[1]),
        model_echo=model if isinstance(model, str) else None,
    )


# -- retry and rate limiting -----------------------------------------------


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff with full jitter: sleep U(0, min(cap, base * factor**(n-1)))."""

    max_attempts: int = 5
    base_s: float = 1.0
    factor: float = 2.0
    cap_s: float = 30.0

    def delay(self, attempt: int, rng: random.Random) -> float:
        ceiling = min(self.cap_s, self.base_s * self.factor ** (attempt - 1))
        return rng.uniform(0, ceiling)


class RateLimiter:
    """Token bucket shared by all threads using one provider."""

    def __init__(
        self,
        rate: float = 2.0,
        capacity: float | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self.rate
            self._sleep(wait)


Transport = Callable[[str, Mapping[str, str], str, float], "tuple[int, str]"]


class HttpxTransport:
    def __init__(self):
        self._client = httpx.Client()

    def __call__(self, url: str, headers: Mapping[str, str], body: str, timeout: float) -> tuple[int, str]:
        try:
            resp = self._client.post(url, headers=dict(headers), content=body.encode("utf-8"), timeout=timeout)
        except httpx.TimeoutException as exc:
            raise NetworkError(f"timeout talking to {url}: {exc.__class__.__name__}") from None
        except httpx.TransportError as exc:
            raise NetworkError(f"network error talking to {url}: {exc.__class__.__name__}") from None
        return resp.status_code, resp.text

    def close(self) -> None:
        self._client.close()


def classify_status(status: int, text: str = "") -> ProviderError | None:
    if 200 <= status < 300:
        return None
    snippet = text[:200].replace("\n", " ")
    if status in (401, 403):
        return AuthError(f"HTTP {status}: authentication rejected", status)
    if status == 429:
        return RateLimited(f"HTTP 429: {snippet}", status)
    if status >= 500:
        return ServerError(f"HTTP {status}: {snippet}", status)
    return ProviderError(f"HTTP {status}: {snippet}", status)


# -- providers -------------------------------------------------------------


class Provider:
    """Retry loop shared by concrete providers; subclasses implement ``_attempt``."""

    def __init__(
        self,
        config: ModelConfig,
        retry: RetryPolicy | None = None,
        rate_limiter: RateLimiter | None = None,
        sleep: Callable[[float], None] = time.sleep,
        seed: int | None = None,
    ):
        self.config = config
        self.retry = retry or RetryPolicy()
        self.rate_limiter = rate_limiter
        self._sleep = sleep
        self._rng = random.Random(seed)
        self._rng_lock = threading.Lock()

    def _attempt(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError

    def complete(self, request: ChatRequest) -> ChatResponse:
        last: ProviderError | None = None
        for attempt in range(1, self.retry.max_attempts + 1):
            if self.rate_limiter is not None:
                self.rate_limiter.acquire()
            try:
                return replace(self._attempt(request), attempts=attempt)
            except ProviderError as exc:
                if not exc.retryable:
                    raise
                last = exc
                if attempt == self.retry.max_attempts:
                    break
                with self._rng_lock:
                    delay = self.retry.delay(attempt, self._rng)
                logger.info("attempt %d failed (%s); retrying in %.2fs", attempt, exc, delay)
                self._sleep(delay)
        raise RetriesExhausted(last, self.retry.max_attempts)

    def close(self) -> None:
        pass


class HttpProvider(Provider):
    def __init__(self, config: ModelConfig, transport: Transport | None = None, **kwargs: Any):
        if config.kind == "mock":
            raise NotApplicable("use MockProvider for the mock kind")
        kwargs.setdefault("rate_limiter", RateLimiter())
        super().__init__(config, **kwargs)
        self._own_transport = transport is None
        self.transport = transport or HttpxTransport()

    def _headers(self) -> dict[str, str]:
        headers = {"content-type": "application/json"}
        env = self.config.api_key_env
        key = os.environ.get(env) if env else None
        if self.config.kind in ("openai_compat", "anthropic") and not key:
            raise AuthError(f"environment variable {env or '(unset name)'} is not set")
        if self.config.kind == "anthropic":
            headers["x-api-key"] = key
            headers["anthropic-version"] = ANTHROPIC_VERSION
        elif key:
            headers["authorization"] = f"Bearer {key}"
        return headers

    def _attempt(self, request: ChatRequest) -> ChatResponse:
        path, body = encode_request(self.config, request)
        url = self.config.base_url.rstrip("/") + path
        headers = self._headers()
        t0 = time.monotonic()
        status, text = self.transport(url, headers, body, float(self.config.request_timeout_s))
        latency = int((time.monotonic() - t0) * 1000)
        err = classify_status(status, text)
        if err is not None:
            raise err
        return decode_response(self.config.kind, text, latency)

    def close(self) -> None:
        if self._own_transport:
            self.transport.close()


class FixtureMiss(ProviderError):
    pass


MOCK_LABELS = ("Present", "Absent")


def mock_answer(seed: str, prompt: str) -> str:
    """Seeded procedural answer: a JSON object with score, label, count, quotes, rationale.

    Quotes are word windows from the last paragraph of the prompt, which is
    where built templates put the material.
    """
    rng = random.Random(content_hash(seed + "\x00" + prompt))
    material = prompt.strip().rsplit("\n\n", 1)[-1].split()
    label = rng.choice(MOCK_LABELS)
    count = 0 if label == "Absent" else rng.randint(1, 4)
    quotes = []
    for _ in range(min(count, 2)):
        if not material:
            break
        width = rng.randint(1, min(6, len(material)))
        start = rng.randint(0, len(material) - width)
        quotes.append(" ".join(material[start:start + width]))
    answer = {
        "score": rng.randint(1, 6),
        "label": label,
        "count": count,
        "quotes": quotes,
        "rationale": f"mock rationale {rng.getrandbits(32):08x}",
    }
    return json.dumps(answer, ensure_ascii=False)


class MockProvider(Provider):
    """No-network provider.

    With ``fixtures`` (prompt hash -> text) answers are replayed and a miss is
    an error; otherwise :func:`mock_answer` is used with the model id as seed.
    ``fault`` may raise a ProviderError for a given request to simulate failures.
    """

    def __init__(
        self,
        config: ModelConfig,
        fixtures: Mapping[str, str] | None = None,
        fault: Callable[[ChatRequest], None] | None = None,
        **kwargs: Any,
    ):
        kwargs.setdefault("retry", RetryPolicy(base_s=0.0))
        super().__init__(config, **kwargs)
        if fixtures is None and config.fixture_path:
            with open(config.fixture_path, encoding="utf-8") as fh:
                fixtures = json.load(fh)
        self.fixtures = dict(fixtures) if fixtures is not None else None
        self.fault = fault
        self.calls = 0
        self._calls_lock = threading.Lock()

    def _attempt(self, request: ChatRequest) -> ChatResponse:
        with self._calls_lock:
            self.calls += 1
        if self.fault is not None:
            self.fault(request)
        if self.fixtures is not None:
            key = prompt_hash(request)
            if key not in self.fixtures:
                raise FixtureMiss(f"no fixture for prompt hash {key[:12]}")
            text = self.fixtures[key]
        else:
            text = mock_answer(self.config.model_id, request.user)
        return ChatResponse(
            text=text,
            latency_ms=0,
            input_tokens=len(request.user.split()),
            output_tokens=len(text.split()),
            model_echo=self.config.model_id,
        )


def make_provider(config: ModelConfig, rate: float | None = None, **kwargs: Any) -> Provider:
    if config.kind == "mock":
        return MockProvider(config, **kwargs)
    if rate is not None:
        kwargs["rate_limiter"] = RateLimiter(rate) if rate > 0 else None
    return HttpProvider(config, **kwargs)


def complete(config: ModelConfig, request: ChatRequest, **kwargs: Any) -> ChatResponse:
    provider = make_provider(config, **kwargs)
    try:
        return provider.complete(request)
    finally:
        provider.close()
