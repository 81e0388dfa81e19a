"""Text generation and embedding gateway.

One abstraction with two backends: an HTTP client for OpenAI-compatible
inference services and a deterministic scripted mock for tests and offline
runs. Every prompt in the package flows through `Backend.chat`; every
vector through `Backend.embed`.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import yaml

from .errors import (
    EmptyTextError,
    GatewayError,
    MockScriptMissError,
    ServiceError,
    TransportError,
)

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")


@dataclass
class ChatRequest:
    """Carrier for one chat call; `tag` names the pipeline stage for logging
    and mock routing."""

    messages: list[ChatMessage]
    temperature: float = 0.0
    max_output_tokens: int = 1024
    tag: str = ""

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("first message role must be system or user")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")

    def joined_content(self) -> str:
        return "\n".join(m.content for m in self.messages)


def user_request(content: str, tag: str, system: str | None = None, **kw) -> ChatRequest:
    msgs = []
    if system:
        msgs.append(ChatMessage("system", system))
    msgs.append(ChatMessage("user", content))
    return ChatRequest(messages=msgs, tag=tag, **kw)


@dataclass
class EmbeddingVector:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("embedding must be one-dimensional")

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass
class BackendConfig:
    base_url: str = "https://api.openai.com/v1"
    api_key_env: str = "OPENAI_API_KEY"
    chat_model: str = "gpt-4o-mini"
    embedding_model: str = "text-embedding-ada-002"
    timeout: float = 30.0
    max_retries: int = 3
    retry_initial: float = 0.5
    retry_multiplier: float = 2.0
    max_in_flight: int = 4

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


class Backend(Protocol):
    encoder_name: str

    def chat(self, req: ChatRequest) -> str: ...

    def embed(self, text: str) -> EmbeddingVector: ...


def _require_text(text: str) -> str:
    if not text or not text.strip():
        raise EmptyTextError("cannot embed empty text")
    return text


# -- deterministic mock ------------------------------------------------------

def mock_embed(text: str, dim: int = 16, seed: int = 0, ngram: int = 3) -> np.ndarray:
    """Deterministic hash embedding.

    Algorithm (fixed; tests recompute it independently):
      1. casefold, collapse whitespace runs to single spaces, strip
      2. pad with one leading and one trailing space
      3. take every character n-gram of length `ngram` (the whole padded
         string if it is shorter)
      4. for each n-gram: h = blake2b(ngram_utf8, digest_size=8,
         key=seed as 8 little-endian bytes) read as a big-endian integer;
         bucket = h % dim; sign = +1 if bit 63 of h is clear else -1;
         add sign to vector[bucket]
      5. if every bucket cancelled to zero, set vector[0] = 1
      6. L2-normalize
    """
    norm_text = " ".join(text.casefold().split())
    if not norm_text:
        raise EmptyTextError("cannot embed empty text")
    padded = f" {norm_text} "
    if len(padded) >= ngram:
        grams = [padded[i : i + ngram] for i in range(len(padded) - ngram + 1)]
    else:
        grams = [padded]
    key = seed.to_bytes(8, "little")
    vec = np.zeros(dim, dtype=np.float64)
    for gram in grams:
        digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=key).digest()
        h = int.from_bytes(digest, "big")
        sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
        vec[h % dim] += sign
    if not vec.any():
        vec[0] = 1.0
    return vec / np.linalg.norm(vec)


@dataclass
class MockRule:
    """One scripted chat rule; first matching rule wins.

    `reply` is either the canned output or a callable taking the full
    ChatRequest (callables are only available to rules built in code).
    """

    reply: str | Callable[[ChatRequest], str]
    tag: str | None = None
    contains: str | None = None
    regex: str | None = None

    def matches(self, req: ChatRequest) -> bool:
        if self.tag is not None and req.tag != self.tag:
            return False
        content = req.joined_content()
        if self.contains is not None and self.contains not in content:
            return False
        if self.regex is not None and re.search(self.regex, content) is None:
            return False
        return True


class MockBackend:
    """Pure scripted backend: chat follows an ordered rule list, embeddings
    are the deterministic hash of the text. No state, safe to share."""

    def __init__(self, rules: list[MockRule] | None = None, embed_dim: int = 16,
                 embed_seed: int = 0):
        self.rules = list(rules or [])
        self.embed_dim = embed_dim
        self.embed_seed = embed_seed
        self.encoder_name = f"mock-ngram3-d{embed_dim}-s{embed_seed}"

    def chat(self, req: ChatRequest) -> str:
        for rule in self.rules:
            if rule.matches(req):
                reply = rule.reply
                return reply(req) if callable(reply) else reply
        raise MockScriptMissError(req.tag)

    def embed(self, text: str) -> EmbeddingVector:
        _require_text(text)
        return EmbeddingVector(mock_embed(text, dim=self.embed_dim, seed=self.embed_seed))


def load_mock_rules(path: str | Path) -> list[MockRule]:
    """Load scripted rules from a YAML file: a top-level `rules` list of
    {tag, contains, regex, reply} mappings."""
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict) or "rules" not in raw:
        raise GatewayError(f"{path}: expected a mapping with a 'rules' list")
    rules = []
    for i, entry in enumerate(raw["rules"]):
        if "reply" not in entry:
            raise GatewayError(f"{path}: rule {i} has no reply")
        rules.append(
            MockRule(
                reply=str(entry["reply"]),
                tag=entry.get("tag"),
                contains=entry.get("contains"),
                regex=entry.get("regex"),
            )
        )
    return rules


# -- OpenAI-compatible HTTP backend -------------------------------------------

_RETRYABLE_STATUS = {429, 500, 502, 503, 504}


class OpenAIBackend:
    """Client for OpenAI-compatible `/chat/completions` and `/embeddings`
    endpoints, with bounded retries and exponential backoff.

    Concurrent use is capped by a semaphore of `config.max_in_flight`.
    `transport` and `sleeper` exist for tests (httpx.MockTransport, no-op
    sleep).
    """

    def __init__(self, config: BackendConfig, transport=None,
                 sleeper: Callable[[float], None] = time.sleep):
        import httpx

        self.config = config
        self.encoder_name = config.embedding_model
        self._sleep = sleeper
        self._gate = threading.Semaphore(config.max_in_flight)
        self._client = httpx.Client(
            base_url=config.base_url.rstrip("/"),
            timeout=config.timeout,
            transport=transport,
        )

    def _headers(self) -> dict:
        key = os.environ.get(self.config.api_key_env, "")
        return {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}

    def _post(self, path: str, payload: dict, tag: str) -> dict:
        import httpx

        cfg = self.config
        delay = cfg.retry_initial
        attempts = cfg.max_retries + 1
        last_exc: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                self._sleep(delay)
                delay *= cfg.retry_multiplier
            start = time.perf_counter()
            try:
                with self._gate:
                    resp = self._client.post(path, json=payload, headers=self._headers())
            except httpx.TransportError as exc:
                last_exc = exc
                logger.warning("transport error on %s (attempt %d/%d): %s",
                               path, attempt + 1, attempts, exc)
                continue
            latency = time.perf_counter() - start
            if resp.status_code == 200:
                body = resp.json()
                usage = body.get("usage", {})
                logger.debug("%s tag=%s latency=%.3fs tokens=%s",
                             path, tag, latency, usage or "n/a")
                return body
            if resp.status_code in _RETRYABLE_STATUS:
                last_exc = ServiceError(resp.status_code, resp.text[:200])
                logger.warning("retryable status %d on %s (attempt %d/%d)",
                               resp.status_code, path, attempt + 1, attempts)
                continue
            raise ServiceError(resp.status_code, resp.text[:200])
        raise TransportError(f"{path}: giving up after {attempts} attempts: {last_exc}")

    def chat(self, req: ChatRequest) -> str:
        payload = {
            "model": self.config.chat_model,
            "messages": [{"role": m.role, "content": m.content} for m in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        body = self._post("/chat/completions", payload, req.tag)
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError) as exc:
            raise ServiceError(200, f"malformed completion body: {exc}") from exc

    def embed(self, text: str) -> EmbeddingVector:
        _require_text(text)
        payload = {"model": self.config.embedding_model, "input": text}
        body = self._post("/embeddings", payload, "embed")
        try:
            values = body["data"][0]["embedding"]
        except (KeyError, IndexError) as exc:
            raise ServiceError(200, f"malformed embedding body: {exc}") from exc
        return EmbeddingVector(np.asarray(values, dtype=np.float64))
