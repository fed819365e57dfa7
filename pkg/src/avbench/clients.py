"""Multimodal language-model clients.

Every client exposes ``send(image, text) -> str`` where ``image`` is a
:class:`~avbench.media.CompositeImage` or ``None``. The mocks are pure
functions of ``(image digest, text)``. :class:`CachedClient` adds a
digest-keyed response cache and retry with exponential backoff around any
client; :class:`HttpClient` talks to an OpenAI-style chat-completions
endpoint.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol

from .taxonomy import category_names

logger = logging.getLogger(__name__)

REFUSAL = "I'm sorry, I can't assist with that."
REFORMAT_MARKER = "Answer to reformat:"


class TransportError(RuntimeError):
    """The request did not reach the model or got no usable reply."""


class MLLMClient(Protocol):
    name: str

    def send(self, image, text: str) -> str:
        ...


def image_digest(image) -> str:
    if image is None:
        return "none"
    return hashlib.sha256(image.digest_bytes()).hexdigest()


def request_key(image, text: str) -> str:
    h = hashlib.sha256()
    h.update(image_digest(image).encode())
    h.update(b"\0")
    h.update(text.encode("utf-8"))
    return h.hexdigest()


@dataclass
class EchoClient:
    """Returns the prompt it was given, prefixed with a fixed string."""

    prefix: str = "Echo: "
    name: str = "mock-echo"

    def send(self, image, text: str) -> str:
        return self.prefix + text


@dataclass
class ScriptedClient:
    """Replies looked up by image digest, falling back to ``default``.

    ``by_image`` maps image digests to a free-text answer for the first
    (image-bearing) call. Text-only calls are routed to ``reformatter``.
    """

    by_image: Mapping[str, str] = field(default_factory=dict)
    default: str = REFUSAL
    reformatter: Callable[[str], str] | None = None
    name: str = "mock-scripted"

    def send(self, image, text: str) -> str:
        if image is None:
            fmt = self.reformatter or LexiconReformatter()
            return fmt(text)
        return self.by_image.get(image_digest(image), self.default)


# Paraphrase -> category id. Stands in for a model that rewrites free text
# into canonical names; longest phrases are tried first.
DEFAULT_LEXICON: dict[str, int] = {
    "eye contact": 0,
    "looks away": 0,
    "averts gaze": 0,
    "avoids gaze": 0,
    "does not respond": 1,
    "doesn't respond": 1,
    "not responding": 1,
    "unresponsive": 1,
    "ignores the adult": 1,
    "ignores questions": 1,
    "echolalia": 2,
    "repeats phrases": 2,
    "repeats words": 2,
    "unusual speech": 2,
    "idiosyncratic language": 2,
    "irrelevant answer": 2,
    "hitting another": 3,
    "hits another": 3,
    "kicking": 3,
    "biting": 3,
    "aggression": 3,
    "aggressive": 3,
    "throws objects at": 3,
    "hits himself": 4,
    "hits herself": 4,
    "hits themself": 4,
    "head banging": 4,
    "bangs head": 4,
    "self-injury": 4,
    "self-injurious": 4,
    "covers ears": 5,
    "covering ears": 5,
    "sensitive to noise": 5,
    "sensory": 5,
    "lining up": 6,
    "lines up": 6,
    "arranges toys in a row": 6,
    "spinning": 7,
    "spins": 7,
    "twirling": 7,
    "hand flapping": 8,
    "flapping": 8,
    "repetitive arm movements": 8,
    "wrist twisting": 8,
    "no autism-related behaviors": 9,
    "typical play": 9,
    "nothing unusual": 9,
}
# verbatim names always count
DEFAULT_LEXICON.update({name.casefold(): i for i, name in enumerate(category_names())})


@dataclass
class LexiconReformatter:
    """Maps free text to a comma-separated canonical label line.

    Only the text after :data:`REFORMAT_MARKER` (if present) is read, so the
    instruction block itself never contributes labels. Text with no known
    phrase becomes ``"Unknown"``.
    """

    lexicon: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_LEXICON))

    def __call__(self, text: str) -> str:
        _, marker, answer = text.partition(REFORMAT_MARKER)
        body = (answer if marker else text).casefold()
        found = set()
        for phrase in sorted(self.lexicon, key=len, reverse=True):
            if phrase in body:
                found.add(self.lexicon[phrase])
                body = body.replace(phrase, " ")
        if not found:
            return "Unknown"
        names = category_names()
        return ", ".join(names[c] for c in sorted(found))


class FlakyClient:
    """Fails the first ``failures`` calls; test helper for retry logic."""

    def __init__(self, inner, failures: int):
        self.inner = inner
        self.failures = failures
        self.calls = 0
        self.name = f"flaky({getattr(inner, 'name', 'client')})"

    def send(self, image, text):
        self.calls += 1
        if self.calls <= self.failures:
            raise TransportError(f"simulated failure {self.calls}")
        return self.inner.send(image, text)


class CachedClient:
    """Digest-keyed cache plus retries around another client.

    Identical ``(image, text)`` requests are answered from the cache without
    touching the wrapped client. When ``path`` is given the cache is a
    line-delimited JSON file that is loaded on start and appended to by this
    single writer.
    """

    def __init__(self, inner, path=None, attempts: int = 3, backoff: float = 0.5,
                 sleep: Callable[[float], None] = time.sleep):
        self.inner = inner
        self.name = getattr(inner, "name", "client")
        self.attempts = attempts
        self.backoff = backoff
        self.sleep = sleep
        self.path = Path(path) if path is not None else None
        self.calls = 0
        self._cache: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self._cache[rec["key"]] = rec["response"]

    def __len__(self) -> int:
        return len(self._cache)

    def send(self, image, text: str) -> str:
        key = request_key(image, text)
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        last = None
        for attempt in range(self.attempts):
            try:
                self.calls += 1
                response = self.inner.send(image, text)
                break
            except TransportError as exc:
                last = exc
                logger.warning("attempt %d/%d failed: %s", attempt + 1, self.attempts, exc)
                if attempt + 1 < self.attempts:
                    self.sleep(self.backoff * 2 ** attempt)
        else:
            raise TransportError(f"gave up after {self.attempts} attempts: {last}")
        with self._lock:
            self._cache[key] = response
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "response": response}, ensure_ascii=False) + "\n")
        return response


@dataclass
class HttpClient:
    """OpenAI-style ``/chat/completions`` client (temperature 0 by default).

    The bearer token is read from the environment variable named by
    ``token_env`` at request time.
    """

    endpoint: str
    model: str
    token_env: str = "AVBENCH_API_TOKEN"
    temperature: float = 0.0
    timeout: float = 120.0
    max_tokens: int = 1024
    name: str = "http"

    def payload(self, image, text: str) -> dict:
        content: list[dict] = [{"type": "text", "text": text}]
        if image is not None:
            from PIL import Image

            buf = io.BytesIO()
            Image.fromarray(image.pixels).save(buf, format="PNG")
            url = "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode()
            content.append({"type": "image_url", "image_url": {"url": url}})
        return {"model": self.model, "temperature": self.temperature, "max_tokens": self.max_tokens,
                "messages": [{"role": "user", "content": content}]}

    def send(self, image, text: str) -> str:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        req = urllib.request.Request(self.endpoint, data=json.dumps(self.payload(image, text)).encode(),
                                     headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            raise TransportError(str(exc)) from exc
        except json.JSONDecodeError as exc:
            raise TransportError(f"non-JSON reply: {exc}") from exc
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected reply shape: {str(body)[:200]}") from exc


def normalize_whitespace(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip()
