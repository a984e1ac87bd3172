"""
Orchestrator prompt assembly under a hard token budget T.

  build_focus_context    -> F(a_i) || R_{-i}      (DACS, FOCUS mode)
  build_registry_context -> R                      (REGISTRY / USER_INTERACT)
  build_flat_context     -> F(a_1) || ... || F(a_N) (flat baseline)

Sections are joined with newlines, which carry no tokens under the default
tokenizer, so section counts add up to the context count.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable
from dataclasses import dataclass, field, replace
from enum import Enum

from core.constants import DEFAULT_BUDGET_T, REGISTRY_ENTRY_CAP, SECTION_SEPARATOR
from core.exceptions import FocusContextOverflow, ProtocolViolation, UnknownAgent
from core.protocols import SteeringRequest
from core.registry import Registry, RegistryEntry, render_entry, render_entry_without_summary
from core.tokenizer import TokenCount, count_tokens, truncate_to

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FocusRecord:
    """F(a_i): everything the orchestrator needs to steer one agent."""

    agent_id: str
    task_description: str
    steering_history: tuple[tuple[str, str], ...] = ()
    partial_output_summary: str = ""

    def with_exchange(self, question: str, response: str) -> FocusRecord:
        return replace(
            self, steering_history=self.steering_history + ((question, response),)
        )

    def with_summary(self, summary: str) -> FocusRecord:
        return replace(self, partial_output_summary=summary)


@dataclass(frozen=True)
class BuilderConfig:
    budget_T: TokenCount = DEFAULT_BUDGET_T
    registry_entry_cap: TokenCount = REGISTRY_ENTRY_CAP

    def __post_init__(self):
        if self.budget_T < 1:
            raise ValueError("budget_T must be >= 1")


class SectionKind(Enum):
    FOCUS = "FOCUS"
    REGISTRY_ENTRY = "REGISTRY_ENTRY"
    FLAT = "FLAT"
    USER = "USER"
    DIRECTIVE = "DIRECTIVE"


@dataclass(frozen=True)
class Section:
    kind: SectionKind
    agent_id: str | None
    token_count: TokenCount

    @property
    def label(self) -> str:
        if self.agent_id is None:
            return self.kind.value
        return f"{self.kind.value}({self.agent_id})"


@dataclass(frozen=True)
class BuiltContext:
    full_text: str
    token_count: TokenCount
    budget_T: TokenCount
    sections: tuple[Section, ...] = field(default_factory=tuple)

    def labels(self) -> list[str]:
        return [s.label for s in self.sections]


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def render_focus(record: FocusRecord, entry: RegistryEntry | None = None) -> str:
    """
    F(a_i) as prompt text. With the agent's registry entry, the header also
    carries its status and urgency, so the section never holds less than the
    agent's registry line.
    """
    header = f"[FOCUS {record.agent_id}]"
    if entry is not None:
        header = f"[FOCUS {record.agent_id} {entry.status.value} urgency={entry.urgency.name}]"
    lines = [header, f"Task: {record.task_description}"]
    for n, (question, response) in enumerate(record.steering_history, start=1):
        lines.append(f"Q{n}: {question}")
        lines.append(f"A{n}: {response}")
    lines.append(f"Summary: {record.partial_output_summary}")
    return "\n".join(lines)


def _one_line(text: str) -> str:
    return " ".join(text.split())


def steering_directive(req: SteeringRequest) -> str:
    """The single line naming the agent to steer; identical in both conditions."""
    return (
        f"STEER {req.agent_id} [urgency={req.urgency.name}] "
        f"question: {_one_line(req.question)} | context: {_one_line(req.context)}"
    )


def user_turn(message: str) -> str:
    return f"USER: {_one_line(message)}"


# ---------------------------------------------------------------------------
# Assembly helpers
# ---------------------------------------------------------------------------

_Part = tuple[SectionKind, str | None, str]


def _assemble(parts: Iterable[_Part], cfg: BuilderConfig) -> BuiltContext:
    texts: list[str] = []
    sections: list[Section] = []
    for kind, agent_id, text in parts:
        if not text:
            continue
        texts.append(text)
        sections.append(Section(kind, agent_id, count_tokens(text)))
    full_text = SECTION_SEPARATOR.join(texts)
    return BuiltContext(
        full_text=full_text,
        token_count=count_tokens(full_text),
        budget_T=cfg.budget_T,
        sections=tuple(sections),
    )


def _victim_order(entries: list[RegistryEntry]) -> list[RegistryEntry]:
    return sorted(entries, key=lambda e: (int(e.urgency), e.agent_id))


def _fit_registry(
    head: list[_Part],
    entries: list[RegistryEntry],
    tail: list[_Part],
    cfg: BuilderConfig,
) -> BuiltContext:
    """
    Place ``entries`` between ``head`` and ``tail`` and degrade them until the
    whole fits: summaries of the lowest-urgency entries go first, then whole
    entries in the same order. ``head`` and ``tail`` are never touched.
    """
    rendered: dict[str, str] = {
        e.agent_id: render_entry(e, cfg.registry_entry_cap) for e in entries
    }

    def build() -> BuiltContext:
        middle: list[_Part] = [
            (SectionKind.REGISTRY_ENTRY, e.agent_id, rendered[e.agent_id])
            for e in entries
            if e.agent_id in rendered
        ]
        return _assemble([*head, *middle, *tail], cfg)

    ctx = build()
    if ctx.token_count <= cfg.budget_T:
        return ctx

    victims = _victim_order(entries)
    for entry in victims:
        rendered[entry.agent_id] = render_entry_without_summary(entry, cfg.registry_entry_cap)
        ctx = build()
        if ctx.token_count <= cfg.budget_T:
            logger.debug("[BUILDER] dropped summaries down to %s", entry.agent_id)
            return ctx
    for entry in victims:
        del rendered[entry.agent_id]
        ctx = build()
        if ctx.token_count <= cfg.budget_T:
            logger.debug("[BUILDER] dropped entries down to %s", entry.agent_id)
            return ctx
    return ctx


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_focus_context(
    target: str,
    focus: FocusRecord,
    registry: Registry,
    cfg: BuilderConfig,
    directive: str | None = None,
) -> BuiltContext:
    """
    F(target) followed by the registry lines of every other agent.

    F(target) (and the directive, when given) is never truncated; if it alone
    exceeds the budget the call is infeasible.
    """
    if target not in registry:
        raise UnknownAgent(target)
    if focus.agent_id != target:
        raise ProtocolViolation(
            f"FocusRecord belongs to {focus.agent_id!r}, not {target!r}"
        )

    head: list[_Part] = [(SectionKind.FOCUS, target, render_focus(focus, registry.get(target)))]
    tail: list[_Part] = (
        [(SectionKind.DIRECTIVE, target, directive)] if directive else []
    )
    fixed = _assemble([*head, *tail], cfg)
    if fixed.token_count > cfg.budget_T:
        raise FocusContextOverflow(target, fixed.token_count, cfg.budget_T)

    others = [e for e in registry if e.agent_id != target]
    return _fit_registry(head, others, tail, cfg)


def build_registry_context(
    registry: Registry,
    cfg: BuilderConfig,
    user_message: str | None = None,
) -> BuiltContext:
    """R in full (plus the user's turn in USER_INTERACT mode)."""
    tail: list[_Part] = []
    if user_message:
        turn = user_turn(message=user_message)
        tail = [(SectionKind.USER, None, turn)]
        # A user turn larger than T on its own would make every context invalid.
        if _assemble(tail, cfg).token_count > cfg.budget_T:
            tail = [(SectionKind.USER, None, truncate_to(turn, cfg.budget_T))]
    return _fit_registry([], list(registry), tail, cfg)


def build_flat_context(
    target: str,
    all_focus: Iterable[FocusRecord],
    registry: Registry,
    cfg: BuilderConfig,
    directive: str | None = None,
) -> BuiltContext:
    """
    Every agent's F(a_j) concatenated (agent_id order) plus the steering line.

    Over budget, the other agents' histories are dropped oldest exchange
    first, then their whole sections; the target's section goes last and
    is never cut.
    """
    records = {rec.agent_id: rec for rec in all_focus}
    if target not in records or target not in registry:
        raise UnknownAgent(target)
    directive = directive or f"STEER {target}"

    def render(record: FocusRecord) -> str:
        return render_focus(record, registry.entries.get(record.agent_id))

    tail: list[_Part] = [(SectionKind.DIRECTIVE, target, directive)]

    fixed = _assemble([(SectionKind.FLAT, target, render(records[target])), *tail], cfg)
    if fixed.token_count > cfg.budget_T:
        raise FocusContextOverflow(target, fixed.token_count, cfg.budget_T)

    def build(current: dict[str, FocusRecord]) -> BuiltContext:
        parts: list[_Part] = [
            (SectionKind.FLAT, agent_id, render(current[agent_id]))
            for agent_id in sorted(current)
        ]
        return _assemble([*parts, *tail], cfg)

    current = dict(records)
    ctx = build(current)
    if ctx.token_count <= cfg.budget_T:
        return ctx

    others = [agent_id for agent_id in sorted(records) if agent_id != target]
    depth = max((len(records[a].steering_history) for a in others), default=0)
    for index in range(depth):
        for agent_id in others:
            rec = current[agent_id]
            if index >= len(records[agent_id].steering_history):
                continue
            current[agent_id] = replace(rec, steering_history=rec.steering_history[1:])
            ctx = build(current)
            if ctx.token_count <= cfg.budget_T:
                return ctx
    for agent_id in others:
        del current[agent_id]
        ctx = build(current)
        if ctx.token_count <= cfg.budget_T:
            return ctx
    return ctx


def predicted_focus_tokens(F: TokenCount, r: TokenCount, N: int) -> TokenCount:
    """|C_focus| = |F| + (N - 1) * |r|."""
    if N < 1:
        raise ValueError("N must be >= 1")
    return F + (N - 1) * r
