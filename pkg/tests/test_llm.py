import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hospitalsim.errors import EmptyTextError, MockScriptMissError, ServiceError, TransportError
from hospitalsim.llm import (
    BackendConfig,
    ChatMessage,
    ChatRequest,
    MockBackend,
    MockRule,
    OpenAIBackend,
    load_mock_rules,
    mock_embed,
    user_request,
)

# Frozen output of the documented hash-embedding recipe for "fever", dim 16,
# seed 0, computed with an independent reimplementation of the docstring.
FEVER_VECTOR = np.array([
    0.0, 0.0, 0.0, 0.0, 0.0,
    -0.3779644730092272, 0.3779644730092272, 0.0, 0.0, 0.0, 0.0,
    -0.3779644730092272, 0.0, 0.0, 0.0, -0.7559289460184544,
])


def oracle_embed(text, dim=16, seed=0, n=3):
    import hashlib

    norm = " ".join(text.casefold().split())
    padded = f" {norm} "
    grams = [padded[i:i + n] for i in range(len(padded) - n + 1)] if len(padded) >= n else [padded]
    key = seed.to_bytes(8, "little")
    vec = np.zeros(dim)
    for gram in grams:
        h = int.from_bytes(
            hashlib.blake2b(gram.encode(), digest_size=8, key=key).digest(), "big"
        )
        vec[h % dim] += 1.0 if (h >> 63) & 1 == 0 else -1.0
    if not vec.any():
        vec[0] = 1.0
    return vec / np.linalg.norm(vec)


def test_chat_request_invariants():
    with pytest.raises(ValueError):
        ChatRequest(messages=[])
    with pytest.raises(ValueError):
        ChatRequest(messages=[ChatMessage("assistant", "hi")])
    with pytest.raises(ValueError):
        ChatMessage("narrator", "hi")
    req = user_request("hello", tag="t", system="sys")
    assert [m.role for m in req.messages] == ["system", "user"]


def test_mock_embed_frozen_value():
    vec = mock_embed("fever", dim=16, seed=0)
    assert vec.shape == (16,)
    assert np.linalg.norm(vec) > 0
    assert np.array_equal(vec, FEVER_VECTOR)
    assert np.array_equal(vec, oracle_embed("fever"))


def test_mock_embed_determinism():
    backend = MockBackend()
    a = backend.embed("abc")
    b = backend.embed("abc")
    assert np.array_equal(a.values, b.values)
    assert a.dim == 16


@settings(max_examples=60, deadline=None)
@given(st.text(min_size=1).filter(lambda s: s.strip()))
def test_mock_embed_determinism_property(text):
    assert np.array_equal(mock_embed(text), mock_embed(text))
    assert np.linalg.norm(mock_embed(text)) == pytest.approx(1.0)


def test_shared_ngrams_raise_similarity():
    a = mock_embed("persistent cough lasting weeks")
    b = mock_embed("persistent cough and chills")
    c = mock_embed("xylophone quartz bumblebee")
    sim_ab = float(np.dot(a, b))
    sim_ac = float(np.dot(a, c))
    assert sim_ab > sim_ac


def test_empty_text_rejected():
    with pytest.raises(EmptyTextError):
        MockBackend().embed("   ")


def test_mock_chat_rules_and_miss():
    backend = MockBackend([
        MockRule(tag="diagnosis", contains="Herpes", reply="Diagnosis: Herpes Zoster"),
        MockRule(tag="diagnosis", reply="Diagnosis: unknown"),
    ])
    assert backend.chat(user_request("patient shows Herpes signs", tag="diagnosis")) \
        == "Diagnosis: Herpes Zoster"
    assert backend.chat(user_request("other", tag="diagnosis")) == "Diagnosis: unknown"
    with pytest.raises(MockScriptMissError, match="triage"):
        backend.chat(user_request("anything", tag="triage"))


def test_mock_rules_from_file(tmp_path):
    path = tmp_path / "script.yaml"
    path.write_text(
        "rules:\n"
        "  - tag: diagnosis\n"
        "    contains: Herpes\n"
        "    reply: 'Answer: Herpes Zoster'\n"
        "  - regex: 'fever.*cough'\n"
        "    reply: 'Answer: Influenza B'\n",
        encoding="utf-8",
    )
    rules = load_mock_rules(path)
    backend = MockBackend(rules)
    assert "Herpes" in backend.chat(user_request("Herpes rash", tag="diagnosis"))
    assert "Influenza" in backend.chat(user_request("fever then cough", tag="anything"))


def _chat_body(content="ok"):
    return {"choices": [{"message": {"content": content}}], "usage": {"total_tokens": 3}}


def test_retry_contract_two_429_then_success():
    import httpx

    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        if calls["n"] <= 2:
            return httpx.Response(429, json={"error": "rate limited"})
        return httpx.Response(200, json=_chat_body())

    sleeps = []
    backend = OpenAIBackend(
        BackendConfig(max_retries=3, retry_initial=0.5, retry_multiplier=2.0),
        transport=httpx.MockTransport(handler),
        sleeper=sleeps.append,
    )
    assert backend.chat(user_request("hi", tag="t")) == "ok"
    assert calls["n"] == 3
    assert sleeps == [0.5, 1.0]  # backoff grows by the multiplier


def test_retries_exhausted_raises_transport_error():
    import httpx

    def handler(request):
        return httpx.Response(503, text="upstream down")

    backend = OpenAIBackend(
        BackendConfig(max_retries=2),
        transport=httpx.MockTransport(handler),
        sleeper=lambda s: None,
    )
    with pytest.raises(TransportError):
        backend.chat(user_request("hi", tag="t"))


def test_non_retryable_service_error_surfaces_body():
    import httpx

    def handler(request):
        return httpx.Response(400, text="bad request body excerpt")

    backend = OpenAIBackend(
        BackendConfig(), transport=httpx.MockTransport(handler), sleeper=lambda s: None
    )
    with pytest.raises(ServiceError, match="bad request"):
        backend.chat(user_request("hi", tag="t"))


def test_embedding_dim_passthrough():
    import httpx

    def handler(request):
        return httpx.Response(200, json={"data": [{"embedding": [0.1, 0.2, 0.3, 0.4, 0.5]}]})

    backend = OpenAIBackend(
        BackendConfig(), transport=httpx.MockTransport(handler), sleeper=lambda s: None
    )
    vec = backend.embed("anything")
    assert vec.dim == 5
