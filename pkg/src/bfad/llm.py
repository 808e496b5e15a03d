"""Prompt construction, chat-completion client, and verdict parsing."""

from __future__ import annotations

import enum
import json
import logging
import os
import random
import re
import threading
import time
import uuid
from dataclasses import dataclass

import httpx

from bfad.extraction import ExtractedView, estimate_tokens
from bfad.registry import CriticalFunctionRegistry

log = logging.getLogger(__name__)

SYSTEM_PROMPT = (
    "You are tasked with analyzing PHP scripts. Your objective is to classify the provided PHP code "
    "as either a WebShell or a legitimate script. A WebShell is typically a malicious script intended "
    "to exploit the server by executing unauthorized commands or providing backdoor access."
)
USER_INSTRUCTION = (
    "Analyze the provided PHP code to determine whether it constitutes a WebShell or a legitimate script. "
    "Provide your verdict as WebShell or benign."
)
NO_EXAMPLES = "(none)"


class VerdictLabel(str, enum.Enum):
    WEBSHELL = "webshell"
    BENIGN = "benign"
    UNPARSEABLE = "unparseable"

    def __str__(self) -> str:
        return self.value


class LlmError(RuntimeError):
    pass


class LlmTransportError(LlmError):
    pass


class LlmAuthError(LlmError):
    pass


class LlmProtocolError(LlmError):
    pass


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_text: str
    estimated_tokens: int

    def messages(self) -> list[dict[str, str]]:
        return [
            {"role": "system", "content": self.system_text},
            {"role": "user", "content": self.user_text},
        ]


@dataclass(frozen=True)
class Verdict:
    label: VerdictLabel
    raw_response: str
    latency_ms: int
    model_id: str
    error: str | None = None


@dataclass(frozen=True)
class LlmConfig:
    endpoint_url: str = "http://localhost:8000/v1"
    model_id: str = "gpt-4"
    api_key_env_var: str = "OPENAI_API_KEY"
    temperature: float = 0.0
    max_output_tokens: int = 256
    request_timeout_s: float = 60.0
    max_retries: int = 3
    max_concurrent_requests: int = 4
    backoff_base_s: float = 0.5
    backoff_max_s: float = 30.0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0 or self.max_concurrent_requests <= 0:
            raise ValueError("max_output_tokens and max_concurrent_requests must be positive")
        if self.request_timeout_s <= 0 or self.max_retries < 0:
            raise ValueError("request_timeout_s must be positive and max_retries non-negative")


def build_prompt(
    view: ExtractedView | None,
    demonstration: str | None = None,
    global_snippets: str | None = None,
    estimator=estimate_tokens,
) -> PromptBundle:
    """Fill the critical-code, source-code and examples slots of the detection prompt.

    ``global_snippets`` replaces the view's backfill text in the source-code slot
    when given; passing the whole file there with no view gives the plain
    full-file prompt.
    """
    critical = view.critical_text if view else ""
    source = global_snippets if global_snippets is not None else (view.backfill_text if view else "")
    if not critical and not source:
        raise ValueError("nothing to analyze")
    examples = demonstration if demonstration else NO_EXAMPLES
    user = (
        f"{USER_INSTRUCTION}\n\n"
        f"[Critical Code]\n{critical}\n\n"
        f"[Source Code]\n{source}\n\n"
        f"[Examples]\n{examples}\n\n"
        "Output:"
    )
    return PromptBundle(SYSTEM_PROMPT, user, estimator(SYSTEM_PROMPT + "\n" + user))


_SLOT = re.compile(r"\[(Critical Code|Source Code|Examples)\]\n")


def prompt_slots(user_text: str) -> dict[str, str]:
    """Split a rendered user prompt back into its three slot bodies."""
    marks = list(_SLOT.finditer(user_text))
    slots = {}
    for i, m in enumerate(marks):
        end = marks[i + 1].start() if i + 1 < len(marks) else user_text.rfind("\n\nOutput:")
        slots[m.group(1)] = user_text[m.end() : end].removesuffix("\n\n")
    return slots


def parse_verdict(response_text: str) -> VerdictLabel:
    """Keyword verdict: whichever of "webshell"/"benign" occurs last wins."""
    lowered = response_text.lower()
    w, b = lowered.rfind("webshell"), lowered.rfind("benign")
    if w < 0 and b < 0:
        return VerdictLabel.UNPARSEABLE
    return VerdictLabel.WEBSHELL if w > b else VerdictLabel.BENIGN


class ChatClassifier:
    """Sends prompts to ``{endpoint_url}/chat/completions`` and parses verdicts.

    Safe to share across threads; at most ``max_concurrent_requests`` requests
    are in flight at once.
    """

    def __init__(self, config: LlmConfig, transport: httpx.BaseTransport | None = None, seed: int | None = None):
        self.config = config
        self._client = httpx.Client(timeout=config.request_timeout_s, transport=transport)
        self._slots = threading.BoundedSemaphore(config.max_concurrent_requests)
        self._rng = random.Random(seed)
        self._rng_lock = threading.Lock()

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> ChatClassifier:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _headers(self) -> dict[str, str]:
        headers = {"X-Request-ID": uuid.uuid4().hex}
        key = os.environ.get(self.config.api_key_env_var) if self.config.api_key_env_var else None
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _backoff(self, attempt: int) -> float:
        ceiling = min(self.config.backoff_max_s, self.config.backoff_base_s * 2**attempt)
        with self._rng_lock:
            return self._rng.uniform(0, ceiling)

    def _post(self, body: dict) -> httpx.Response:
        url = self.config.endpoint_url.rstrip("/") + "/chat/completions"
        last: str = ""
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                time.sleep(self._backoff(attempt - 1))
            try:
                with self._slots:
                    resp = self._client.post(url, json=body, headers=self._headers())
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
                log.debug("request failed (attempt %d): %s", attempt + 1, last)
                continue
            if resp.status_code in (401, 403):
                raise LlmAuthError(f"endpoint rejected credentials (HTTP {resp.status_code})")
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise LlmProtocolError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            return resp
        raise LlmTransportError(f"gave up after {self.config.max_retries + 1} attempts: {last}")

    def complete(self, bundle: PromptBundle) -> str:
        body = {
            "model": self.config.model_id,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
            "messages": bundle.messages(),
        }
        resp = self._post(body)
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise LlmProtocolError(f"malformed chat completion response: {exc!r}") from exc
        if not isinstance(content, str):
            raise LlmProtocolError("chat completion content is not a string")
        return content

    def classify(self, bundle: PromptBundle) -> Verdict:
        started = time.perf_counter()
        text = self.complete(bundle)
        latency = int(round((time.perf_counter() - started) * 1000))
        return Verdict(parse_verdict(text), text, latency, self.config.model_id)


def classify(bundle: PromptBundle, config: LlmConfig, transport: httpx.BaseTransport | None = None) -> Verdict:
    with ChatClassifier(config, transport) as client:
        return client.classify(bundle)


_STUB_CALL_TEMPLATE = r"(?<![\w$>:\\])({names})\s*\("


class StubChatTransport(httpx.BaseTransport):
    """Offline chat-completions endpoint for tests and ``--stub`` runs.

    Answers "WebShell" when the prompt's critical-code slot holds at least
    ``threshold`` calls to registry functions, "benign" otherwise.
    """

    def __init__(self, registry: CriticalFunctionRegistry, threshold: int = 3):
        names = "|".join(sorted((re.escape(n) for n in registry), key=len, reverse=True))
        self._call = re.compile(_STUB_CALL_TEMPLATE.format(names=names), re.IGNORECASE)
        self.threshold = threshold
        self._lock = threading.Lock()
        self.in_flight = 0
        self.max_in_flight = 0
        self.requests = 0

    def count_calls(self, critical_code: str) -> int:
        return len(self._call.findall(critical_code))

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        with self._lock:
            self.in_flight += 1
            self.requests += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
        try:
            body = json.loads(request.content)
            user = next(m["content"] for m in body["messages"] if m["role"] == "user")
            critical = prompt_slots(user).get("Critical Code", "")
            verdict = "WebShell" if self.count_calls(critical) >= self.threshold else "benign"
            payload = {
                "id": request.headers.get("X-Request-ID", ""),
                "object": "chat.completion",
                "model": body.get("model", "stub"),
                "choices": [{"index": 0, "message": {"role": "assistant", "content": verdict}, "finish_reason": "stop"}],
            }
            return httpx.Response(200, json=payload)
        finally:
            with self._lock:
                self.in_flight -= 1
