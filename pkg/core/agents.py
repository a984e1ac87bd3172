"""
Simulated agents: scripted stubs driven by scenario files, and a live
LLM agent that asks for guidance through ``[[STEER: ...]]`` markers.

Both expose the same surface to the trial loop (``step``, ``on_answer``,
``on_abandon``), so a marker-driven agent reaches the orchestrator through
exactly the request path a scripted stub uses.
"""

from __future__ import annotations

import itertools
import json
import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple, Protocol

import numpy as np
from rest_framework import serializers
from rest_framework.settings import api_settings

from core.constants import (
    LLM_AGENT_MAX_REQUESTS,
    LLM_AGENT_MAX_STEPS,
    REGISTRY_SUMMARY_CAP,
)
from core.exceptions import MalformedMarker, ScenarioInvalid, UnknownScenario, UnreadableFile
from core.metrics import contains_keyword
from core.protocols import Heartbeat, SteeringRequest
from core.registry import AgentStatus, Urgency
from core.tokenizer import truncate_to

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Scenario types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecisionPoint:
    step: int
    question: str
    context_excerpt: str
    urgency: Urgency
    blocking: bool
    expected_keywords: tuple[str, ...]
    default_path: str
    judge_context: str = ""


@dataclass(frozen=True)
class ScenarioAgent:
    agent_id: str
    domain_label: str
    task_description: str
    decisions: tuple[DecisionPoint, ...]

    @property
    def keywords(self) -> tuple[str, ...]:
        """Every expected keyword of the agent, first-seen order, no repeats."""
        return tuple(dict.fromkeys(kw for d in self.decisions for kw in d.expected_keywords))


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    agents: tuple[ScenarioAgent, ...]
    total_steps: int
    user_messages: tuple[tuple[int, str], ...] = ()

    @property
    def N(self) -> int:
        return len(self.agents)

    @property
    def D(self) -> float:
        return self.n_interactions / self.N if self.agents else 0.0

    @property
    def n_interactions(self) -> int:
        return sum(len(agent.decisions) for agent in self.agents)

    def agent(self, agent_id: str) -> ScenarioAgent:
        for agent in self.agents:
            if agent.agent_id == agent_id:
                return agent
        raise KeyError(agent_id)

    def keyword_table(self) -> dict[str, tuple[str, ...]]:
        return {agent.agent_id: agent.keywords for agent in self.agents}


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------


class DecisionPointSerializer(serializers.Serializer):
    step = serializers.IntegerField(min_value=1)
    question = serializers.CharField(trim_whitespace=False)
    context_excerpt = serializers.CharField(allow_blank=True, trim_whitespace=False)
    urgency = serializers.ChoiceField(choices=[u.name for u in Urgency])
    blocking = serializers.BooleanField()
    expected_keywords = serializers.ListField(
        child=serializers.CharField(), allow_empty=False
    )
    default_path = serializers.CharField(allow_blank=True)
    judge_context = serializers.CharField(allow_blank=True, required=False, default="")


class ScenarioAgentSerializer(serializers.Serializer):
    agent_id = serializers.CharField()
    domain_label = serializers.CharField()
    task_description = serializers.CharField()
    decisions = DecisionPointSerializer(many=True)

    def validate_decisions(self, value):
        steps = [d["step"] for d in value]
        duplicates = sorted({s for s in steps if steps.count(s) > 1})
        if duplicates:
            raise serializers.ValidationError(f"duplicate decision step(s): {duplicates}")
        return sorted(value, key=lambda d: d["step"])


class UserMessageSerializer(serializers.Serializer):
    tick = serializers.IntegerField(min_value=0)
    text = serializers.CharField()


class ScenarioSerializer(serializers.Serializer):
    scenario_id = serializers.CharField()
    total_steps = serializers.IntegerField(min_value=1)
    agents = ScenarioAgentSerializer(many=True, allow_empty=False)
    user_messages = UserMessageSerializer(many=True, required=False, default=list)


def _first_error(errors: Any, path: str) -> tuple[str, str] | None:
    if isinstance(errors, Mapping):
        for key, value in errors.items():
            if key == api_settings.NON_FIELD_ERRORS_KEY:
                sub = path
            elif isinstance(key, int):
                sub = f"{path}[{key}]"
            else:
                sub = f"{path}.{key}" if path else str(key)
            found = _first_error(value, sub)
            if found:
                return found
        return None
    if isinstance(errors, list):
        if errors and all(isinstance(e, str) for e in errors):
            return (path or "$", str(errors[0]))
        for index, item in enumerate(errors):
            if item:
                found = _first_error(item, f"{path}[{index}]")
                if found:
                    return found
        return None
    if isinstance(errors, str):
        return (path or "$", errors)
    return None


def parse_scenario(data: Any) -> Scenario:
    """Validate raw scenario data and build the immutable Scenario."""
    serializer = ScenarioSerializer(data=data)
    if not serializer.is_valid():
        field_path, message = _first_error(serializer.errors, "") or ("$", "invalid scenario")
        raise ScenarioInvalid(field_path, message)
    raw = serializer.validated_data

    seen: set[str] = set()
    agents: list[ScenarioAgent] = []
    for index, item in enumerate(raw["agents"]):
        agent_id = item["agent_id"]
        if agent_id in seen:
            raise ScenarioInvalid(f"agents[{index}].agent_id", f"duplicate agent_id {agent_id!r}")
        seen.add(agent_id)
        decisions = []
        for d_index, d in enumerate(item["decisions"]):
            if d["step"] > raw["total_steps"]:
                raise ScenarioInvalid(
                    f"agents[{index}].decisions[{d_index}].step",
                    f"step {d['step']} exceeds total_steps {raw['total_steps']}",
                )
            decisions.append(
                DecisionPoint(
                    step=d["step"],
                    question=d["question"],
                    context_excerpt=d["context_excerpt"],
                    urgency=Urgency[d["urgency"]],
                    blocking=d["blocking"],
                    expected_keywords=tuple(d["expected_keywords"]),
                    default_path=d["default_path"],
                    judge_context=d.get("judge_context", ""),
                )
            )
        agents.append(
            ScenarioAgent(
                agent_id=agent_id,
                domain_label=item["domain_label"],
                task_description=item["task_description"],
                decisions=tuple(decisions),
            )
        )

    return Scenario(
        scenario_id=raw["scenario_id"],
        agents=tuple(agents),
        total_steps=raw["total_steps"],
        user_messages=tuple(
            sorted((m["tick"], m["text"]) for m in raw.get("user_messages", []))
        ),
    )


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UnknownScenario(f"No scenario file at {path}") from None
    except json.JSONDecodeError as exc:
        raise ScenarioInvalid("$", f"not valid JSON: {exc}") from exc
    except (OSError, UnicodeDecodeError) as exc:
        raise UnreadableFile(path, str(exc)) from exc
    scenario = parse_scenario(data)
    logger.debug(
        "[SCENARIO] loaded %s: N=%d, %d interactions", scenario.scenario_id, scenario.N,
        scenario.n_interactions,
    )
    return scenario


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


class KeywordLeak(NamedTuple):
    agent_id: str
    field: str
    keyword: str


@dataclass(frozen=True)
class ScenarioDiagnostics:
    scenario_id: str
    n_agents: int
    decisions_per_agent: dict[str, int]
    mean_decisions: float
    n_interactions: int
    keyword_overlap: dict[str, list[str]]
    registry_leaks: list[KeywordLeak] = field(default_factory=list)
    cross_mentions: list[KeywordLeak] = field(default_factory=list)

    @property
    def disjoint(self) -> bool:
        return not self.keyword_overlap

    def as_dict(self) -> dict[str, Any]:
        return {
            "scenario_id": self.scenario_id,
            "n_agents": self.n_agents,
            "decisions_per_agent": self.decisions_per_agent,
            "mean_decisions": self.mean_decisions,
            "n_interactions": self.n_interactions,
            "disjoint": self.disjoint,
            "keyword_overlap": self.keyword_overlap,
            "registry_leaks": [leak._asdict() for leak in self.registry_leaks],
            "cross_mentions": [leak._asdict() for leak in self.cross_mentions],
        }


def diagnose_scenario(scenario: Scenario) -> ScenarioDiagnostics:
    """
    Report keyword overlap between agents (not enforced; homogeneous scenarios
    share vocabulary on purpose), keywords that leak into registry-visible
    text, and questions that mention another agent's keywords.
    """
    table = scenario.keyword_table()
    folded = {agent_id: {kw.casefold() for kw in kws} for agent_id, kws in table.items()}

    overlap: dict[str, list[str]] = {}
    for a, b in itertools.combinations(sorted(folded), 2):
        shared = sorted(folded[a] & folded[b])
        if shared:
            overlap[f"{a}/{b}"] = shared

    every_keyword = sorted({kw for kws in table.values() for kw in kws})
    leaks: list[KeywordLeak] = []
    mentions: list[KeywordLeak] = []
    for agent in scenario.agents:
        visible = [("task_description", agent.task_description)] + [
            (f"decisions[{i}].default_path", d.default_path) for i, d in enumerate(agent.decisions)
        ]
        for field_name, text in visible:
            leaks.extend(
                KeywordLeak(agent.agent_id, field_name, kw)
                for kw in every_keyword
                if contains_keyword(text, [kw])
            )
        foreign = sorted(
            {kw for other, kws in table.items() if other != agent.agent_id for kw in kws}
            - set(agent.keywords)
        )
        for i, d in enumerate(agent.decisions):
            for field_name, text in (("question", d.question), ("context_excerpt", d.context_excerpt)):
                mentions.extend(
                    KeywordLeak(agent.agent_id, f"decisions[{i}].{field_name}", kw)
                    for kw in foreign
                    if contains_keyword(text, [kw])
                )

    return ScenarioDiagnostics(
        scenario_id=scenario.scenario_id,
        n_agents=scenario.N,
        decisions_per_agent={a.agent_id: len(a.decisions) for a in scenario.agents},
        mean_decisions=scenario.D,
        n_interactions=scenario.n_interactions,
        keyword_overlap=overlap,
        registry_leaks=leaks,
        cross_mentions=mentions,
    )


# ---------------------------------------------------------------------------
# Simulated agents
# ---------------------------------------------------------------------------


class AgentStep(NamedTuple):
    heartbeat: Heartbeat
    request: SteeringRequest | None = None


class SimAgent(Protocol):
    agent_id: str
    task_description: str

    @property
    def status(self) -> AgentStatus: ...

    @property
    def partial_output_summary(self) -> str: ...

    def step(self, tick: int) -> AgentStep: ...

    def on_answer(self, request: SteeringRequest, response_text: str) -> None: ...

    def on_abandon(self, request: SteeringRequest) -> None: ...

    def decision_for(self, request: SteeringRequest) -> DecisionPoint | None: ...


def schedule_decisions(
    agent: ScenarioAgent, rng: np.random.Generator
) -> list[tuple[int, DecisionPoint]]:
    """
    Shuffle the agent's decisions across its fixed, sorted step slots.
    Every decision fires exactly once; only the firing order changes.
    """
    slots = sorted(d.step for d in agent.decisions)
    order = rng.permutation(len(agent.decisions))
    return [(slot, agent.decisions[int(i)]) for slot, i in zip(slots, order, strict=True)]


class ScriptedAgent:
    """
    Fires its next decision at the first tick at or after the decision's slot
    where it has no request outstanding. A non-blocking request lets the
    agent carry on along the decision's default path while the request waits.
    """

    def __init__(self, agent: ScenarioAgent, schedule: list[tuple[int, DecisionPoint]]):
        self.agent = agent
        self.agent_id = agent.agent_id
        self.task_description = agent.task_description
        self.schedule = schedule
        self._next = 0
        self._outstanding: dict[tuple[str, int], DecisionPoint] = {}
        self._blocked_on: tuple[str, int] | None = None
        self._status = AgentStatus.RUNNING if schedule else AgentStatus.COMPLETE
        self._summary = "Starting work."
        self._urgency = Urgency.LOW
        self._resolved = 0

    @property
    def status(self) -> AgentStatus:
        return self._status

    @property
    def partial_output_summary(self) -> str:
        return self._summary

    @property
    def pending(self) -> list[DecisionPoint]:
        return list(self._outstanding.values())

    def decision_for(self, request: SteeringRequest) -> DecisionPoint | None:
        return self._outstanding.get(request.key)

    def step(self, tick: int) -> AgentStep:
        request = None
        if (
            self._status is not AgentStatus.COMPLETE
            and not self._outstanding
            and self._next < len(self.schedule)
            and tick >= self.schedule[self._next][0]
        ):
            request = self._fire(tick)
        return AgentStep(self._heartbeat(tick), request)

    def _fire(self, tick: int) -> SteeringRequest:
        _, decision = self.schedule[self._next]
        self._next += 1
        request = SteeringRequest(
            agent_id=self.agent_id,
            context=decision.context_excerpt,
            question=decision.question,
            blocking=decision.blocking,
            urgency=decision.urgency,
            issued_tick=tick,
        )
        self._outstanding[request.key] = decision
        self._urgency = decision.urgency
        if decision.blocking:
            self._blocked_on = request.key
            self._status = AgentStatus.BLOCKED
            self._summary = f"Waiting for guidance on decision {self._next} of {len(self.schedule)}."
        else:
            self._status = AgentStatus.WAITING
            self._summary = f"Continuing on default path: {decision.default_path}"
        return request

    def _heartbeat(self, tick: int) -> Heartbeat:
        return Heartbeat(
            agent_id=self.agent_id,
            status=self._status,
            task=self.task_description,
            last_output_summary=self._summary,
            urgency=self._urgency,
            tick=tick,
        )

    def _resolve(self, request: SteeringRequest, summary: str) -> None:
        if request.key not in self._outstanding:
            raise KeyError(f"{self.agent_id} has no outstanding request {request.key}")
        del self._outstanding[request.key]
        self._resolved += 1
        self._summary = summary
        if self._blocked_on == request.key:
            self._blocked_on = None
        if self._next >= len(self.schedule) and not self._outstanding:
            self._status = AgentStatus.COMPLETE
            self._urgency = Urgency.LOW
        elif self._blocked_on is None:
            self._status = AgentStatus.WAITING if self._outstanding else AgentStatus.RUNNING

    def on_answer(self, request: SteeringRequest, response_text: str) -> None:
        # The answer itself stays out of the summary: summaries reach registry lines.
        self._resolve(request, f"Applied guidance; {self._resolved + 1} of {len(self.schedule)} decisions settled.")

    def on_abandon(self, request: SteeringRequest) -> None:
        decision = self._outstanding.get(request.key)
        fallback = decision.default_path if decision else "default path"
        self._resolve(request, f"No guidance received; took default path: {fallback}")


# ---------------------------------------------------------------------------
# Markers and live agents
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Steer:
    question: str


@dataclass(frozen=True)
class Done:
    pass


MarkerEvent = Steer | Done | None

_STEER_OPEN = "[[STEER:"
_DONE = "[[DONE]]"


def extract_marker(agent_output: str) -> MarkerEvent:
    """
    ``[[STEER: question]]`` -> Steer(question), ``[[DONE]]`` -> Done, else None.
    A STEER marker anywhere wins over DONE.
    """
    start = agent_output.find(_STEER_OPEN)
    if start != -1:
        end = agent_output.find("]]", start + len(_STEER_OPEN))
        if end == -1:
            raise MalformedMarker("unterminated [[STEER: marker")
        question = agent_output[start + len(_STEER_OPEN):end].strip()
        if not question:
            raise MalformedMarker("empty [[STEER: ]] question")
        return Steer(question)
    if _DONE in agent_output:
        return Done()
    return None


def enforce_llm_agent_limits(
    request_count: int,
    step_count: int,
    max_requests: int = LLM_AGENT_MAX_REQUESTS,
    max_steps: int = LLM_AGENT_MAX_STEPS,
) -> bool:
    """True while the agent may take another step."""
    if request_count < 0 or step_count < 0:
        raise ValueError("counts must be >= 0")
    return request_count < max_requests and step_count < max_steps


CompletionFn = Callable[[list[dict[str, str]]], str]


def _marker_context(output: str) -> str:
    before = output.split(_STEER_OPEN, 1)[0]
    return truncate_to(" ".join(before.split()), REGISTRY_SUMMARY_CAP)


class LLMAgent:
    """
    Conversation loop around a completion function, one call per tick while
    RUNNING. STEER markers become MEDIUM blocking requests; DONE, or the
    request/step limits, complete the agent.
    """

    def __init__(
        self,
        agent: ScenarioAgent,
        complete_fn: CompletionFn,
        max_requests: int = LLM_AGENT_MAX_REQUESTS,
        max_steps: int = LLM_AGENT_MAX_STEPS,
    ):
        self.agent = agent
        self.agent_id = agent.agent_id
        self.task_description = agent.task_description
        self.complete_fn = complete_fn
        self.max_requests = max_requests
        self.max_steps = max_steps
        self.messages: list[dict[str, str]] = [
            {
                "role": "system",
                "content": (
                    f"You are agent {agent.agent_id} ({agent.domain_label}). "
                    f"Task: {agent.task_description} "
                    "When you need a decision from the orchestrator, write "
                    "[[STEER: <your question>]]. When finished, write [[DONE]]."
                ),
            }
        ]
        self.request_count = 0
        self.step_count = 0
        self._status = AgentStatus.RUNNING
        self._summary = "Starting work."
        self._requests: dict[tuple[str, int], int] = {}

    @property
    def status(self) -> AgentStatus:
        return self._status

    @property
    def partial_output_summary(self) -> str:
        return self._summary

    def decision_for(self, request: SteeringRequest) -> DecisionPoint | None:
        """The n-th request is scored against the agent's n-th scripted decision."""
        index = self._requests.get(request.key)
        if index is None or not self.agent.decisions:
            return None
        return self.agent.decisions[min(index, len(self.agent.decisions) - 1)]

    def step(self, tick: int) -> AgentStep:
        request = None
        if self._status is AgentStatus.RUNNING:
            if not enforce_llm_agent_limits(
                self.request_count, self.step_count, self.max_requests, self.max_steps
            ):
                self._complete("Stopped at the step or request limit.")
            else:
                request = self._advance(tick)
        return AgentStep(self._heartbeat(tick), request)

    def _advance(self, tick: int) -> SteeringRequest | None:
        self.messages.append({"role": "user", "content": f"Step {tick}. Continue the task."})
        output = self.complete_fn(list(self.messages))
        self.step_count += 1
        self.messages.append({"role": "assistant", "content": output})
        self._summary = f"Completed step {self.step_count}."

        match extract_marker(output):
            case Steer(question=question):
                request = SteeringRequest(
                    agent_id=self.agent_id,
                    context=_marker_context(output),
                    question=question,
                    blocking=True,
                    urgency=Urgency.MEDIUM,
                    issued_tick=tick,
                )
                self._requests[request.key] = self.request_count
                self.request_count += 1
                self._status = AgentStatus.BLOCKED
                self._summary = f"Waiting for guidance (request {self.request_count})."
                return request
            case Done():
                self._complete("Reported the task finished.")
        return None

    def _complete(self, summary: str) -> None:
        self._status = AgentStatus.COMPLETE
        self._summary = summary
        logger.debug("[TRIAL] %s complete after %d steps", self.agent_id, self.step_count)

    def _heartbeat(self, tick: int) -> Heartbeat:
        return Heartbeat(
            agent_id=self.agent_id,
            status=self._status,
            task=self.task_description,
            last_output_summary=self._summary,
            urgency=Urgency.MEDIUM if self._status is AgentStatus.BLOCKED else Urgency.LOW,
            tick=tick,
        )

    def on_answer(self, request: SteeringRequest, response_text: str) -> None:
        self.messages.append({"role": "user", "content": f"Orchestrator guidance: {response_text}"})
        self._status = AgentStatus.RUNNING
        self._summary = f"Received guidance for request {self._requests.get(request.key, 0) + 1}."

    def on_abandon(self, request: SteeringRequest) -> None:
        self.messages.append(
            {"role": "user", "content": "No guidance available; proceed with your best judgement."}
        )
        self._status = AgentStatus.RUNNING
