"""LLM access: a chat-completions client, a scripted mock, and the test parser."""
from __future__ import annotations

import json
import logging
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import httpx

from .mdp import TEMPLATE_NAMES
from .prompts import detect_template, is_valid_test_input

log = logging.getLogger(__name__)

API_KEY_ENV = "PPOLLM_API_KEY"


class BackendError(RuntimeError):
    """Transport failure that survived every retry."""


class EmptyResponseError(ValueError):
    """The model answered but nothing in it parsed as a test."""

    def __init__(self, raw: str):
        super().__init__("response contained no parseable tests")
        self.raw = raw


@dataclass(frozen=True)
class TestCase:
    input: str
    expected_output: str = ""

    __test__ = False  # keep pytest from collecting this

    def __post_init__(self):
        if not is_valid_test_input(self.input):
            raise ValueError("test input contains bytes outside printable ASCII, tab and newline")

    def to_json(self) -> dict:
        return {"input": self.input, "expectedOutput": self.expected_output}


@dataclass
class LlmResponse:
    tests: list[TestCase]
    raw: str
    usage: dict[str, int] = field(default_factory=dict)
    dropped: int = 0


_FENCE = re.compile(r"```[A-Za-z0-9_+-]*[ \t]*\r?\n?(.*?)```", re.DOTALL)


def strip_fences(text: str) -> str:
    m = _FENCE.search(text)
    return m.group(1) if m else text


def _load_json(text: str) -> Any:
    body = strip_fences(text).strip()
    try:
        return json.loads(body)
    except (json.JSONDecodeError, RecursionError):
        pass
    # tolerate prose around a single JSON value
    for opener, closer in (("[", "]"), ("{", "}")):
        start, end = body.find(opener), body.rfind(closer)
        if 0 <= start < end:
            try:
                return json.loads(body[start:end + 1])
            except (json.JSONDecodeError, RecursionError):
                continue
    return None


def _entry_to_test(entry: Any) -> TestCase | None:
    if not isinstance(entry, dict):
        return None
    inp = entry.get("input")
    out = entry.get("expectedOutput", entry.get("expected_output", ""))
    if not isinstance(inp, str):
        return None
    if out is None:
        out = ""
    if not isinstance(out, str):
        out = json.dumps(out)
    if not is_valid_test_input(inp):
        return None
    return TestCase(inp, out)


def parse_tests(raw: str, expected_count: int | None = None) -> LlmResponse:
    """Parse a model reply into tests, dropping bad entries one by one.

    Accepts a bare array of ``{input, expectedOutput}`` objects or an object
    holding such an array under ``"tests"``. Raises ``EmptyResponseError``
    when nothing survives.
    """
    data = _load_json(raw)
    if isinstance(data, dict):
        data = data.get("tests")
    entries = data if isinstance(data, list) else []
    tests = []
    dropped = 0
    for entry in entries:
        test = _entry_to_test(entry)
        if test is None:
            dropped += 1
        else:
            tests.append(test)
    if not tests:
        raise EmptyResponseError(raw)
    if expected_count is not None:
        tests = tests[:expected_count]
    return LlmResponse(tests=tests, raw=raw, dropped=dropped)


class Backend(Protocol):
    def complete(self, prompt: str) -> tuple[str, dict[str, int]]: ...


def generate(backend: Backend, prompt: str, expected_count: int) -> LlmResponse:
    if not prompt:
        raise ValueError("prompt must be non-empty")
    raw, usage = backend.complete(prompt)
    response = parse_tests(raw, expected_count)
    response.usage = usage
    return response


@dataclass
class ChatConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4o-mini"
    temperature: float = 0.7
    timeout: float = 60.0
    max_retries: int = 3
    api_key_env: str = API_KEY_ENV


class ChatCompletionsBackend:
    """OpenAI-compatible chat-completions client, one user message per call."""

    def __init__(self, config: ChatConfig, client: httpx.Client | None = None,
                 sleep=time.sleep):
        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout)
        self._sleep = sleep

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, prompt: str) -> tuple[str, dict[str, int]]:
        payload = {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        last: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self._sleep(2 ** (attempt - 1))
            try:
                resp = self._client.post(
                    self.config.endpoint, json=payload, headers=self._headers(),
                    timeout=self.config.timeout,
                )
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise httpx.HTTPStatusError(
                        f"server returned {resp.status_code}", request=resp.request, response=resp
                    )
                resp.raise_for_status()
                body = resp.json()
                text = body["choices"][0]["message"]["content"] or ""
                usage = {k: int(v) for k, v in (body.get("usage") or {}).items()
                         if isinstance(v, int)}
                return text, usage
            except httpx.HTTPStatusError as exc:
                last = exc
                if exc.response.status_code < 500 and exc.response.status_code != 429:
                    break
            except (httpx.TransportError, ValueError, KeyError, IndexError, TypeError) as exc:
                last = exc
            log.warning("LLM call failed (attempt %d): %s", attempt + 1, last)
        raise BackendError(f"chat completion failed: {last}")


class MockBackend:
    """Replays canned replies keyed ``"NAME:ordinal"``.

    ``NAME`` is the template detected from the prompt's first line, or
    ``TOT``/``VERIFY`` for the optimizer prompts. Ordinals count calls per
    name from zero. ``"NAME:*"`` is a fallback, and ``"*:*"`` one for the
    eight templates only. A value is
    either a list of test objects or a raw reply string.
    """

    def __init__(self, script: dict[str, Any]):
        self.script = dict(script)
        self.calls: dict[str, int] = {}

    @classmethod
    def from_file(cls, path: str | Path) -> MockBackend:
        data = json.loads(Path(path).read_text())
        if not isinstance(data, dict):
            raise ValueError("mock script must be a JSON object keyed 'TEMPLATE:ordinal'")
        return cls(data)

    def _key_for(self, prompt: str) -> str:
        name = detect_template(prompt)
        if name:
            return name
        first = prompt.split("\n", 1)[0]
        if first.startswith("[TOT]"):
            return "TOT"
        if first.startswith("[VERIFY]"):
            return "VERIFY"
        return "UNKNOWN"

    def complete(self, prompt: str) -> tuple[str, dict[str, int]]:
        name = self._key_for(prompt)
        ordinal = self.calls.get(name, 0)
        self.calls[name] = ordinal + 1
        keys = [f"{name}:{ordinal}", f"{name}:*"]
        if name in TEMPLATE_NAMES:
            keys.append("*:*")
        for key in keys:
            if key in self.script:
                value = self.script[key]
                return (value if isinstance(value, str) else json.dumps(value)), {}
        # template prompts expect a JSON batch; optimizer prompts expect text
        return ("[]" if name in TEMPLATE_NAMES else ""), {}


def mock_generate(backend: MockBackend, prompt: str, expected_count: int | None = None) -> LlmResponse:
    """Scripted generation; unknown keys give an empty batch rather than an error."""
    raw, _ = backend.complete(prompt)
    try:
        return parse_tests(raw, expected_count)
    except EmptyResponseError:
        return LlmResponse(tests=[], raw=raw)
