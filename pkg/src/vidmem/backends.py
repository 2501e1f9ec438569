"""Model backends: a text-reasoning LLM and a clip-captioning MLLM.

Both are reached through an OpenAI-compatible ``/v1/chat/completions`` endpoint in
production; tests and simulations swap in scripted subclasses.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable

import requests

from .errors import BackendError, CaptionError, MediaError
from .memory import TimePeriod, VideoMeta

log = logging.getLogger(__name__)

API_KEY_ENV = "LUCY_API_KEY"


class CallCounter:
    """Thread-safe invocation counter."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._count = 0

    def increment(self) -> int:
        with self._lock:
            self._count += 1
            return self._count

    @property
    def value(self) -> int:
        with self._lock:
            return self._count


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = 0.0
    max_tokens: int | None = None


@dataclass(frozen=True)
class ClipRequest:
    video: VideoMeta
    period: TimePeriod
    fps: Fraction
    instruction: str

    def __post_init__(self) -> None:
        if self.period.end_s > self.video.duration_s:
            raise ValueError(f"{self.period} exceeds video duration {self.video.duration_s}")


class TextBackend:
    """Reasoning backend. Subclasses implement ``_complete``."""

    def __init__(self) -> None:
        self.counter = CallCounter()

    @property
    def calls(self) -> int:
        return self.counter.value

    def complete(self, prompt: str, params: DecodeParams | None = None) -> str:
        self.counter.increment()
        return self._complete(prompt, params or DecodeParams())

    def _complete(self, prompt: str, params: DecodeParams) -> str:
        raise NotImplementedError


class CaptionBackend:
    """Captioning backend. Subclasses implement ``_caption``."""

    def __init__(self) -> None:
        self.counter = CallCounter()

    @property
    def calls(self) -> int:
        return self.counter.value

    def caption(self, req: ClipRequest) -> str:
        self.counter.increment()
        try:
            text = self._caption(req)
        except (CaptionError, MediaError):
            raise
        except Exception as exc:
            raise CaptionError(f"captioning {req.period} failed: {exc}", req.period) from exc
        if not text or not text.strip():
            raise CaptionError(f"empty caption for {req.period}", req.period)
        return text

    def _caption(self, req: ClipRequest) -> str:
        raise NotImplementedError


class FunctionTextBackend(TextBackend):
    """Wrap a plain ``prompt -> str`` callable."""

    def __init__(self, fn: Callable[[str], str]) -> None:
        super().__init__()
        self.fn = fn

    def _complete(self, prompt: str, params: DecodeParams) -> str:
        return self.fn(prompt)


class FunctionCaptionBackend(CaptionBackend):
    def __init__(self, fn: Callable[[ClipRequest], str]) -> None:
        super().__init__()
        self.fn = fn

    def _caption(self, req: ClipRequest) -> str:
        return self.fn(req)


# ---------------------------------------------------------------- HTTP


@dataclass
class HttpSettings:
    base_url: str
    model: str
    timeout_s: float = 120.0
    max_retries: int = 3
    backoff_s: float = 1.0
    api_key: str | None = None
    session: Any = field(default=None, repr=False)

    def token(self) -> str | None:
        return self.api_key if self.api_key is not None else os.environ.get(API_KEY_ENV)


def chat_completion(settings: HttpSettings, messages: list[dict], temperature: float = 0.0,
                    max_tokens: int | None = None) -> str:
    """POST a chat completion, retrying 5xx and transport errors with exponential backoff."""
    url = settings.base_url.rstrip("/") + "/v1/chat/completions"
    headers = {"Content-Type": "application/json"}
    token = settings.token()
    if token:
        headers["Authorization"] = f"Bearer {token}"
    payload: dict[str, Any] = {"model": settings.model, "messages": messages, "temperature": temperature}
    if max_tokens is not None:
        payload["max_tokens"] = max_tokens
    http = settings.session or requests

    last: Exception | None = None
    for attempt in range(settings.max_retries + 1):
        if attempt:
            time.sleep(settings.backoff_s * 2 ** (attempt - 1))
        try:
            resp = http.post(url, json=payload, headers=headers, timeout=settings.timeout_s)
        except requests.RequestException as exc:
            last = exc
            log.warning("chat completion transport error (attempt %d): %s", attempt + 1, exc)
            continue
        if resp.status_code >= 500:
            last = BackendError(f"HTTP {resp.status_code}: {resp.text[:500]}")
            log.warning("chat completion HTTP %d (attempt %d)", resp.status_code, attempt + 1)
            continue
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:500]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"unexpected response shape: {resp.text[:500]}") from exc
    raise BackendError(f"chat completion failed after {settings.max_retries + 1} attempts: {last}")


class HttpTextBackend(TextBackend):
    def __init__(self, settings: HttpSettings) -> None:
        super().__init__()
        self.settings = settings

    def _complete(self, prompt: str, params: DecodeParams) -> str:
        messages = [{"role": "user", "content": prompt}]
        return chat_completion(self.settings, messages, params.temperature, params.max_tokens)


class HttpCaptionBackend(CaptionBackend):
    """Sends the instruction followed by base64 JPEG frames sampled at the request fps."""

    def __init__(self, settings: HttpSettings, frame_source: Callable[..., Any],
                 params: DecodeParams | None = None) -> None:
        super().__init__()
        self.settings = settings
        self.frame_source = frame_source
        self.params = params or DecodeParams()

    def build_messages(self, req: ClipRequest) -> list[dict]:
        frames = self.frame_source(req.video, req.period, req.fps)
        parts: list[dict] = [{"type": "text", "text": req.instruction}]
        parts += [{"type": "image_url", "image_url": {"url": url}} for url in frames.data_urls()]
        return [{"role": "user", "content": parts}]

    def _caption(self, req: ClipRequest) -> str:
        return chat_completion(self.settings, self.build_messages(req), self.params.temperature,
                               self.params.max_tokens)
