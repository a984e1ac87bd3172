"""
The LLM-call boundary.

Two deterministic mocks isolate pipeline correctness from model behaviour:
  MOCK_ORACLE        answers the STEER target with its expected keyword
  MOCK_CONTAMINATOR  answers for whichever agent owns the most keyword mass
                     in the prompt (attention capture by token mass)
HTTP posts an OpenAI-compatible chat-completion request for live runs.
"""

from __future__ import annotations

import logging
import re
import threading
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Any, Protocol

import requests
from django.conf import settings

from core.constants import (
    BACKEND_MAX_ATTEMPTS,
    BACKEND_TIMEOUT_S,
    DEFAULT_MAX_OUTPUT_TOKENS,
    DEFAULT_TEMPERATURE,
    SYSTEM_PROMPT,
)
from core.context_builder import BuiltContext, SectionKind
from core.exceptions import BackendUnavailable, MissingApiKey, ProtocolViolation
from core.metrics import keyword_hits

logger = logging.getLogger(__name__)


class BackendKind(Enum):
    MOCK_ORACLE = "mock-oracle"
    MOCK_CONTAMINATOR = "mock-contaminator"
    HTTP = "http"


@dataclass(frozen=True)
class CompletionParams:
    model_name: str = "mock"
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    temperature: float = DEFAULT_TEMPERATURE
    endpoint: str = ""


@dataclass(frozen=True)
class AgentVocab:
    """``current``: keywords of the decision being steered; ``all``: every keyword."""

    current: tuple[str, ...]
    all: tuple[str, ...]


KeywordTable = Mapping[str, AgentVocab]


class Backend(Protocol):
    kind: BackendKind
    max_attempts: int

    def complete(
        self, prompt: BuiltContext, params: CompletionParams, scenario_vocab: KeywordTable
    ) -> str: ...


_DIRECTIVE_RE = re.compile(r"^STEER (\S+)", re.MULTILINE)


def directive_target(prompt_text: str) -> str:
    match = _DIRECTIVE_RE.search(prompt_text)
    if match is None:
        raise ProtocolViolation("prompt carries no STEER directive")
    return match.group(1)


def _answer(keyword: str) -> str:
    return f"Recommended decision: {keyword}."


def _user_ack(prompt: BuiltContext) -> str | None:
    """Mocks answer registry-mode user turns with a status acknowledgement."""
    if any(s.kind is SectionKind.USER for s in prompt.sections):
        tracked = sum(s.kind is SectionKind.REGISTRY_ENTRY for s in prompt.sections)
        return f"Acknowledged; {tracked} agents tracked."
    return None


# ---------------------------------------------------------------------------
# Mocks
# ---------------------------------------------------------------------------


class OracleBackend:
    kind = BackendKind.MOCK_ORACLE
    max_attempts = 1

    def complete(
        self, prompt: BuiltContext, params: CompletionParams, scenario_vocab: KeywordTable
    ) -> str:
        if (ack := _user_ack(prompt)) is not None:
            return ack
        target = directive_target(prompt.full_text)
        vocab = scenario_vocab.get(target)
        if vocab is None or not (vocab.current or vocab.all):
            raise ProtocolViolation(f"no keywords known for STEER target {target!r}")
        return _answer((vocab.current or vocab.all)[0])


def keyword_mass(text: str, scenario_vocab: KeywordTable) -> dict[str, int]:
    """Keyword occurrences per owning agent (shared keywords count for each owner)."""
    return {
        agent_id: sum(keyword_hits(text, kw) for kw in vocab.all)
        for agent_id, vocab in scenario_vocab.items()
    }


class ContaminatorBackend:
    kind = BackendKind.MOCK_CONTAMINATOR
    max_attempts = 1

    def complete(
        self, prompt: BuiltContext, params: CompletionParams, scenario_vocab: KeywordTable
    ) -> str:
        if (ack := _user_ack(prompt)) is not None:
            return ack
        if not scenario_vocab:
            raise ProtocolViolation("empty keyword table")
        text = prompt.full_text
        mass = keyword_mass(text, scenario_vocab)
        winner = max(sorted(mass), key=lambda agent_id: mass[agent_id])
        vocab = scenario_vocab[winner]
        if vocab.current:
            return _answer(vocab.current[0])
        counts = [(keyword_hits(text, kw), -i, kw) for i, kw in enumerate(vocab.all)]
        return _answer(max(counts)[2])


# ---------------------------------------------------------------------------
# HTTP (OpenAI-compatible chat completions)
# ---------------------------------------------------------------------------

_local = threading.local()


def _get_http_session() -> requests.Session:
    """
    One persistent requests Session per thread. Batch trials call the
    backend from worker threads and a Session is not thread-safe.
    """
    session = getattr(_local, "session", None)
    if session is None:
        session = _local.session = requests.Session()
    return session


class HttpBackend:
    kind = BackendKind.HTTP
    max_attempts = BACKEND_MAX_ATTEMPTS

    def __init__(self, api_key: str | None = None, endpoint: str | None = None):
        self.api_key = api_key if api_key is not None else settings.DACS_API_KEY
        self.endpoint = endpoint or settings.DACS_ENDPOINT
        if not self.api_key:
            raise MissingApiKey("DACS_API_KEY is not set")

    def chat(self, messages: Sequence[dict[str, str]], params: CompletionParams) -> str:
        base = (params.endpoint or self.endpoint).rstrip("/")
        body: dict[str, Any] = {
            "model": params.model_name,
            "messages": list(messages),
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        }
        headers = {
            "Content-Type": "application/json",
            "Authorization": f"Bearer {self.api_key}",
        }
        try:
            response = _get_http_session().post(
                f"{base}/chat/completions", json=body, headers=headers, timeout=BACKEND_TIMEOUT_S
            )
        except requests.RequestException as exc:
            raise BackendUnavailable(f"transport error: {exc}") from exc

        if response.status_code != 200:
            raise BackendUnavailable(f"HTTP {response.status_code}: {response.text[:500]}")
        try:
            return response.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable("malformed chat-completion body") from exc

    def complete(
        self, prompt: BuiltContext, params: CompletionParams, scenario_vocab: KeywordTable
    ) -> str:
        messages = [
            {"role": "system", "content": SYSTEM_PROMPT},
            {"role": "user", "content": prompt.full_text},
        ]
        logger.debug("[BACKEND] POST %d-token prompt to %s", prompt.token_count, self.endpoint)
        return self.chat(messages, params)


def make_backend(kind: BackendKind, params: CompletionParams | None = None) -> Backend:
    if kind is BackendKind.MOCK_ORACLE:
        return OracleBackend()
    if kind is BackendKind.MOCK_CONTAMINATOR:
        return ContaminatorBackend()
    return HttpBackend(endpoint=params.endpoint if params else None)
