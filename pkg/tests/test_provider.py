import json
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from atomcode.errors import (
    AuthError,
    MalformedResponse,
    NotApplicable,
    ProviderError,
    RetriesExhausted,
    SchemaError,
)
from atomcode.provider import (
    ChatRequest,
    HttpProvider,
    MockProvider,
    ModelConfig,
    RateLimiter,
    RetryPolicy,
    classify_status,
    decode_response,
    encode_request,
    make_provider,
    parse_model_spec,
    prompt_hash,
)

from .conftest import FIXTURES

WIRE = FIXTURES / "wire"
CASES = json.loads((WIRE / "cases.json").read_text())
KINDS = list(CASES["models"])


def wire_config(kind, **kw):
    return ModelConfig(kind, CASES["models"][kind], temperature=CASES["temperature"], max_tokens=CASES["max_tokens"], **kw)


def wire_request(case):
    spec = CASES["requests"][case]
    return ChatRequest(user=spec["user"], system=spec["system"])


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("case", ["user", "system"])
def test_encode_matches_golden(kind, case):
    path, body = encode_request(wire_config(kind), wire_request(case))
    assert path == CASES["paths"][kind]
    assert body.encode("utf-8") == (WIRE / f"{kind}.{case}.request.json").read_bytes()


def test_openai_single_user_message():
    _, body = encode_request(wire_config("openai_compat"), wire_request("user"))
    assert json.loads(body)["messages"] == [{"role": "user", "content": "hi"}]


def test_anthropic_system_is_top_level():
    _, body = encode_request(wire_config("anthropic"), wire_request("system"))
    d = json.loads(body)
    assert d["system"] == "You are a careful qualitative coder."
    assert [m["role"] for m in d["messages"]] == ["user"]


def test_mock_has_no_wire_body():
    with pytest.raises(NotApplicable):
        encode_request(ModelConfig("mock", "m"), ChatRequest("x"))


@pytest.mark.parametrize("kind", KINDS)
def test_decode_golden(kind):
    resp = decode_response(kind, (WIRE / f"{kind}.response.json").read_text(), latency_ms=7)
    assert resp.text == "ok"
    assert [resp.input_tokens, resp.output_tokens] == CASES["usage"][kind]
    assert resp.latency_ms == 7


@pytest.mark.parametrize(
    "kind, body, path",
    [
        ("openai_compat", {"id": "x"}, "choices"),
        ("openai_compat", {"choices": []}, "choices[0]"),
        ("anthropic", {"content": [{"type": "text"}]}, "content[0].text"),
        ("ollama_local", {"message": {}}, "message.content"),
    ],
)
def test_decode_malformed(kind, body, path):
    with pytest.raises(MalformedResponse) as info:
        decode_response(kind, json.dumps(body))
    assert path in info.value.path
    with pytest.raises(MalformedResponse):
        decode_response(kind, "not json")


def test_model_config_validation():
    with pytest.raises(SchemaError):
        ModelConfig("gpt", "x")
    with pytest.raises(SchemaError):
        ModelConfig("mock", "")
    with pytest.raises(SchemaError):
        ModelConfig("mock", "m", temperature=-1)
    cfg = parse_model_spec("openai:gpt-4o-mini", temperature=0.2)
    assert (cfg.kind, cfg.model_id, cfg.temperature) == ("openai_compat", "gpt-4o-mini", 0.2)
    assert parse_model_spec("ollama:llama3.1:8b").model_id == "llama3.1:8b"
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# -- fault injection ---------------------------------------------------------


class ScriptedTransport:
    """Returns the next status from ``statuses``; 200 yields the golden success body."""

    def __init__(self, kind, statuses):
        self.kind = kind
        self.statuses = list(statuses)
        self.calls = []

    def __call__(self, url, headers, body, timeout):
        self.calls.append((url, dict(headers), body))
        status = self.statuses.pop(0)
        if status == 200:
            return 200, (WIRE / f"{self.kind}.response.json").read_text()
        return status, '{"error": "injected"}'


def http_provider(kind, statuses, monkeypatch, **kw):
    monkeypatch.setenv("OPENAI_API_KEY", "sk-test-secret")
    monkeypatch.setenv("ANTHROPIC_API_KEY", "sk-ant-secret")
    transport = ScriptedTransport(kind, statuses)
    sleeps = []
    provider = HttpProvider(wire_config(kind), transport=transport, sleep=sleeps.append, rate_limiter=None, seed=0, **kw)
    return provider, transport, sleeps


@pytest.mark.parametrize("kind", KINDS)
def test_429_429_200_succeeds_on_third_attempt(kind, monkeypatch):
    provider, transport, sleeps = http_provider(kind, [429, 429, 200], monkeypatch)
    resp = provider.complete(wire_request("user"))
    assert resp.text == "ok"
    assert resp.attempts == 3
    assert len(transport.calls) == 3
    assert len(sleeps) == 2
    assert 0 <= sleeps[0] <= 1.0 and 0 <= sleeps[1] <= 2.0


def test_500_six_times_exhausts(monkeypatch):
    provider, transport, sleeps = http_provider("openai_compat", [500] * 6, monkeypatch)
    with pytest.raises(RetriesExhausted) as info:
        provider.complete(wire_request("user"))
    assert info.value.attempts == 5
    assert info.value.last.status == 500
    assert len(transport.calls) == 5
    assert transport.statuses == [500]


@given(st.sampled_from([400, 401, 403, 404, 409, 422]), st.lists(st.sampled_from([200, 429, 500]), max_size=3))
def test_non_retryable_never_retried(status, tail):
    transport = ScriptedTransport("ollama_local", [status] + tail)
    provider = HttpProvider(wire_config("ollama_local"), transport=transport, sleep=lambda s: None, rate_limiter=None)
    with pytest.raises(ProviderError) as info:
        provider.complete(wire_request("user"))
    assert not isinstance(info.value, RetriesExhausted)
    assert not info.value.retryable
    assert len(transport.calls) == 1


def test_classify_status():
    assert classify_status(200) is None
    assert isinstance(classify_status(401), AuthError)
    assert classify_status(429).retryable and classify_status(503).retryable
    assert not classify_status(404).retryable


def test_backoff_bounds():
    policy = RetryPolicy()
    rng = random.Random(1)
    for attempt in range(1, 12):
        d = policy.delay(attempt, rng)
        assert 0 <= d <= min(30.0, 2 ** (attempt - 1))


def test_missing_key_is_auth_error(monkeypatch):
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    transport = ScriptedTransport("openai_compat", [200])
    provider = HttpProvider(wire_config("openai_compat"), transport=transport, rate_limiter=None)
    with pytest.raises(AuthError):
        provider.complete(wire_request("user"))
    assert transport.calls == []


def test_headers_and_no_key_leak(monkeypatch, caplog):
    provider, transport, _ = http_provider("anthropic", [429, 200], monkeypatch)
    with caplog.at_level("DEBUG"):
        provider.complete(wire_request("user"))
    url, headers, body = transport.calls[0]
    assert url == "https://api.anthropic.com/v1/messages"
    assert headers["x-api-key"] == "sk-ant-secret"
    assert "sk-ant-secret" not in body
    assert "sk-ant-secret" not in caplog.text
    assert "secret" not in json.dumps(provider.config.to_dict())


# -- mock --------------------------------------------------------------------


@given(st.text(min_size=1, max_size=200).filter(str.strip))
def test_mock_deterministic(prompt):
    cfg = ModelConfig("mock", "seed-a")
    a = MockProvider(cfg).complete(ChatRequest(prompt)).text
    b = MockProvider(cfg).complete(ChatRequest(prompt)).text
    assert a == b
    d = json.loads(a)
    assert 1 <= d["score"] <= 6 and d["label"] in ("Present", "Absent")


def test_mock_seed_matters():
    texts = {MockProvider(ModelConfig("mock", f"s{i}")).complete(ChatRequest("same prompt")).text for i in range(10)}
    assert len(texts) > 1


def test_mock_fixture_mode():
    req = ChatRequest("Code this: consent form")
    provider = MockProvider(ModelConfig("mock", "m"), fixtures={prompt_hash(req): "LABEL: Present"})
    assert provider.complete(req).text == "LABEL: Present"
    with pytest.raises(ProviderError):
        provider.complete(ChatRequest("unknown"))


def test_mock_fixture_file(tmp_path):
    req = ChatRequest("x")
    path = tmp_path / "fx.json"
    path.write_text(json.dumps({prompt_hash(req): "y"}))
    assert make_provider(ModelConfig("mock", "m", fixture_path=str(path))).complete(req).text == "y"


# -- rate limiter ---------------------------------------------------------------


class FakeClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now

    def sleep(self, s):
        self.now += s


def test_rate_limiter_paces_requests():
    clock = FakeClock()
    limiter = RateLimiter(rate=2.0, clock=clock, sleep=clock.sleep)
    stamps = []
    for _ in range(7):
        limiter.acquire()
        stamps.append(clock.now)
    # burst capacity of two, then one token every half second
    assert stamps[:2] == [0.0, 0.0]
    assert stamps[-1] == pytest.approx(2.5)
    with pytest.raises(ValueError):
        RateLimiter(rate=0)
