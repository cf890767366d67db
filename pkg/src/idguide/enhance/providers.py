"""Text-model and image-generator backends.

Two text backends ship: :class:`MockTextProvider` (deterministic, offline) and
:class:`HTTPChatProvider` (any OpenAI-style chat-completions endpoint).  The
image side only ships :class:`CopyImageGenerator`; real generators plug in by
implementing :class:`ImageGenerator`.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol

import httpx

log = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "IDGUIDE_API_KEY"


class ProviderError(RuntimeError):
    def __init__(self, message: str, attempts: int = 1):
        super().__init__(f"{message} (after {attempts} attempt{'s' if attempts != 1 else ''})")
        self.attempts = attempts


@dataclass(frozen=True)
class ProviderRequest:
    kind: str  # "PE" or "IE"
    instruction: str
    text: str
    image: bytes | None = None


@dataclass(frozen=True)
class ProviderResponse:
    text: str
    provider_name: str
    latency_ms: int = 0
    cached: bool = False


class TextProvider(Protocol):
    name: str

    def complete(self, request: ProviderRequest) -> str: ...


class ImageGenerator(Protocol):
    name: str

    def generate(self, reference: bytes, prompt: str) -> bytes: ...


FACIAL_CLAUSES = (
    "a person in her 20s with long black hair",
    "a man in his 30s with short brown hair and a mustache",
    "a woman in her 40s with curly red hair",
    "a young man with a round face and dark eyes",
    "an older man with grey hair and a neat beard",
    "a woman in her 30s with freckles and a wide smile",
)


class MockTextProvider:
    """Offline provider with fixed, input-determined answers.

    PE requests get ``"<prompt> who is <clause>."`` with the clause chosen by the
    image digest; IE requests get ``"A person shown as <prompt>."``.  Pass
    ``responder`` to override either behaviour.
    """

    def __init__(self, responder: Callable[[ProviderRequest], str] | None = None, name: str = "mock"):
        self.name = name
        self.calls = 0
        self._responder = responder

    def complete(self, request: ProviderRequest) -> str:
        self.calls += 1
        if self._responder is not None:
            return self._responder(request)
        text = request.text.strip().rstrip(".")
        if request.kind == "PE":
            digest = hashlib.sha256(request.image or b"").digest()
            return f"{text} who is {FACIAL_CLAUSES[digest[0] % len(FACIAL_CLAUSES)]}."
        subject = text[0].lower() + text[1:] if text else text
        return f"A person shown as {subject}."


class HTTPChatProvider:
    """Chat-completions client; the API key is read from the environment only.

    Decoding parameters in ``params`` (temperature, max_tokens, ...) are passed
    through untouched; nothing is defaulted.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        timeout: float = 60.0,
        params: Mapping[str, Any] | None = None,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self.params = dict(params or {})
        self.api_key_env = api_key_env
        self.name = f"http:{model}"
        self._client = client or httpx.Client(timeout=timeout)

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any], client: httpx.Client | None = None) -> "HTTPChatProvider":
        if any("key" in k.lower() and k != "api_key_env" for k in cfg):
            raise ValueError("API keys are read from the environment, never from config files")
        return cls(
            endpoint=cfg["endpoint"],
            model=cfg["model"],
            timeout=float(cfg.get("timeout", 60.0)),
            params=cfg.get("params"),
            api_key_env=cfg.get("api_key_env", DEFAULT_API_KEY_ENV),
            client=client,
        )

    def _payload(self, request: ProviderRequest) -> dict[str, Any]:
        content: list[dict[str, Any]] = [{"type": "text", "text": request.instruction}]
        if request.image is not None:
            b64 = base64.b64encode(request.image).decode()
            content.append({"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}})
        return {"model": self.model, "messages": [{"role": "user", "content": content}], **self.params}

    def complete(self, request: ProviderRequest) -> str:
        key = os.environ.get(self.api_key_env)
        if not key:
            raise ProviderError(f"environment variable {self.api_key_env} is not set")
        try:
            resp = self._client.post(
                self.endpoint,
                json=self._payload(request),
                headers={"Authorization": f"Bearer {key}"},
                timeout=self.timeout,
            )
            resp.raise_for_status()
            text = resp.json()["choices"][0]["message"]["content"]
        except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
            raise ProviderError(f"{self.name}: {exc}") from exc
        if not text or not text.strip():
            raise ProviderError(f"{self.name}: empty completion")
        return text.strip()


class CopyImageGenerator:
    """Returns the reference unchanged; stands in for a real identity-preserving generator."""

    name = "copy"

    def __init__(self) -> None:
        self.calls = 0

    def generate(self, reference: bytes, prompt: str) -> bytes:
        self.calls += 1
        return reference


@dataclass
class RetryPolicy:
    attempts: int = 3
    base_delay: float = 0.5
    sleep: Callable[[float], None] = field(default=time.sleep, repr=False)


def call_with_retry(fn: Callable[[], Any], policy: RetryPolicy, what: str) -> tuple[Any, int]:
    """Run ``fn`` with exponential backoff; returns ``(result, attempts_used)``."""
    last: Exception | None = None
    for attempt in range(1, policy.attempts + 1):
        try:
            return fn(), attempt
        except ProviderError as exc:
            last = exc
            log.warning("%s failed on attempt %d/%d: %s", what, attempt, policy.attempts, exc)
            if attempt < policy.attempts:
                policy.sleep(policy.base_delay * 2 ** (attempt - 1))
    raise ProviderError(f"{what}: {last}", attempts=policy.attempts)


def text_provider_from_config(cfg: Mapping[str, Any] | str | None) -> TextProvider:
    if cfg is None or cfg == "mock" or (isinstance(cfg, Mapping) and cfg.get("kind", "mock") == "mock"):
        return MockTextProvider()
    if isinstance(cfg, str):
        cfg = json.loads(Path(cfg).read_text())
        return text_provider_from_config(cfg)
    if cfg.get("kind") == "http":
        return HTTPChatProvider.from_config({k: v for k, v in cfg.items() if k != "kind"})
    raise ValueError(f"unknown text provider kind {cfg.get('kind')!r}")


def image_generator_from_config(cfg: Mapping[str, Any] | str | None) -> ImageGenerator:
    if cfg is None or cfg == "mock" or cfg == "copy" or (isinstance(cfg, Mapping) and cfg.get("kind", "copy") in ("copy", "mock")):
        return CopyImageGenerator()
    raise ValueError(f"unknown image generator {cfg!r}; only 'copy' ships in-process")
