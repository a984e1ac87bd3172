"""
Trial execution: one scenario, one condition, one seeded trial.

Every trial runs on logical ticks. Per tick: scheduled user messages arrive,
agents step in agent_id order (heartbeats refresh the registry, requests
reach the orchestrator), then the orchestrator does its work:

  DACS  one unit per tick through the state machine (a focus session or a
        user answer), so HIGH requests can interrupt a session in FOCUS
  FLAT  every pending request is answered in queue order with the flat
        context; no modes, no batching

Each backend call becomes one line in ``<scenario>_<condition>_t<i>.jsonl``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from collections import deque
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
from django.conf import settings

from core.agents import LLMAgent, Scenario, ScriptedAgent, SimAgent, schedule_decisions
from core.backend import (
    AgentVocab,
    Backend,
    BackendKind,
    CompletionParams,
    HttpBackend,
    KeywordTable,
    make_backend,
)
from core.constants import (
    DEFAULT_SEED,
    DEFAULT_TRIALS,
    DEFAULT_WORKERS,
    LOW_BATCH_MAX_AGE,
    LOW_BATCH_SIZE,
    TRIAL_TICK_SLACK,
)
from core.context_builder import BuilderConfig, BuiltContext, FocusRecord, build_registry_context
from core.exceptions import DacsError, EmptyTrial, ProtocolViolation, TrialFailed
from core.metrics import InteractionScore, score_accuracy, score_contamination, trial_summary
from core.orchestrator import (
    AnswerUser,
    DiscardStale,
    Mode,
    Orchestrator,
    SteeringRequestArrived,
    Tick,
    TraceRecord,
    UserInteractDone,
    UserMessage,
    call_backend,
    run_steering_session,
)
from core.protocols import Heartbeat, PendingQueue, SteeringRequest
from core.registry import AgentStatus, Registry, Urgency, upsert_entry

logger = logging.getLogger(__name__)


class Condition(Enum):
    DACS = "dacs"
    FLAT = "flat"


class AgentMode(Enum):
    SCRIPTED = "scripted"
    LLM = "llm"


class RecordMode(Enum):
    REGISTRY = "REGISTRY"
    FOCUS = "FOCUS"
    USER_INTERACT = "USER_INTERACT"
    FLAT_CALL = "FLAT_CALL"


@dataclass(frozen=True)
class RunConfig:
    scenario_id: str
    condition: Condition
    output_dir: Path
    trials: int = DEFAULT_TRIALS
    seed: int = DEFAULT_SEED
    backend: BackendKind = BackendKind.MOCK_ORACLE
    budget_T: int = field(default_factory=lambda: settings.DACS_DEFAULT_BUDGET)
    model_name: str = "mock"
    endpoint: str = ""
    workers: int = DEFAULT_WORKERS
    agent_mode: AgentMode = AgentMode.SCRIPTED
    scenario_dir: Path | None = None
    low_batch_size: int = LOW_BATCH_SIZE
    low_batch_max_age: int = LOW_BATCH_MAX_AGE

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def builder(self) -> BuilderConfig:
        return BuilderConfig(budget_T=self.budget_T)

    @property
    def params(self) -> CompletionParams:
        return CompletionParams(model_name=self.model_name, endpoint=self.endpoint)

    @property
    def scenario_name(self) -> str:
        return Path(self.scenario_id).stem

    @property
    def log_dir(self) -> Path:
        return Path(self.output_dir) / "logs"

    def log_path(self, trial_index: int) -> Path:
        return self.log_dir / f"{self.scenario_name}_{self.condition.value}_t{trial_index}.jsonl"

    def as_record(self) -> dict[str, Any]:
        record = asdict(self)
        record.update(
            condition=self.condition.value,
            backend=self.backend.value,
            agent_mode=self.agent_mode.value,
            output_dir=str(self.output_dir),
            scenario_dir=str(self.scenario_dir) if self.scenario_dir else None,
        )
        return record


@dataclass(frozen=True)
class TrialRecord:
    trial_id: int
    scenario_id: str
    condition: str
    step: int
    mode: RecordMode
    focused_agent: str | None
    context_tokens: int
    prompt_text: str
    response_text: str
    accurate: bool | None
    contaminated: bool | None
    tick: int

    def as_record(self) -> dict[str, Any]:
        return asdict(self) | {"mode": self.mode.value}

    def to_json(self) -> str:
        return json.dumps(self.as_record(), sort_keys=True, ensure_ascii=False)


@dataclass(frozen=True)
class SummaryRow:
    scenario_id: str
    condition: str
    trial_id: int
    accuracy: float
    contamination: float
    avg_context_tokens: float
    n_interactions: int
    seed: int

    def __post_init__(self):
        if not (0.0 <= self.accuracy <= 1.0 and 0.0 <= self.contamination <= 1.0):
            raise ValueError("accuracy and contamination must lie in [0, 1]")

    def as_row(self) -> list[Any]:
        return [
            self.scenario_id,
            self.condition,
            self.trial_id,
            self.accuracy,
            self.contamination,
            self.avg_context_tokens,
            self.n_interactions,
            self.seed,
        ]


class TrialResult(NamedTuple):
    summary: SummaryRow
    log_path: Path
    records: list[TrialRecord]
    trace: list[TraceRecord]


def derive_trial_seed(seed: int, trial_index: int) -> int:
    """First 8 bytes (big-endian) of sha256("<seed>:<trial_index>")."""
    digest = hashlib.sha256(f"{seed}:{trial_index}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# Trial state
# ---------------------------------------------------------------------------


@dataclass
class _Trial:
    cfg: RunConfig
    trial_index: int
    scenario: Scenario
    backend: Backend
    agents: dict[str, SimAgent]
    sleep: Callable[[float], None]
    log: Any
    registry: Registry = field(default_factory=Registry)
    focus: dict[str, FocusRecord] = field(default_factory=dict)
    records: list[TrialRecord] = field(default_factory=list)
    scores: list[InteractionScore] = field(default_factory=list)
    flat_queue: PendingQueue = field(default_factory=PendingQueue)
    user_text: str | None = None
    orchestrator: Orchestrator | None = None

    def __post_init__(self):
        self.keywords = self.scenario.keyword_table()
        for agent_id, agent in self.agents.items():
            self.focus[agent_id] = FocusRecord(agent_id, agent.task_description)
            self.registry = upsert_entry(
                self.registry,
                Heartbeat(
                    agent_id=agent_id,
                    status=agent.status,
                    task=agent.task_description,
                    last_output_summary=agent.partial_output_summary,
                    urgency=Urgency.LOW,
                    tick=0,
                ),
            )
        if self.cfg.condition is Condition.DACS:
            self.orchestrator = Orchestrator(
                status_of=lambda agent_id: self.agents[agent_id].status,
                low_batch_size=self.cfg.low_batch_size,
                low_batch_max_age=self.cfg.low_batch_max_age,
            )

    # -- bookkeeping -------------------------------------------------------

    def vocab(self, target: str, current: tuple[str, ...]) -> KeywordTable:
        return {
            agent_id: AgentVocab(current=current if agent_id == target else (), all=kws)
            for agent_id, kws in self.keywords.items()
        }

    def write(self, record: TrialRecord) -> None:
        self.records.append(record)
        self.log.write(record.to_json() + "\n")

    def dispatch(self, actions) -> None:
        for action in actions:
            match action:
                case AnswerUser(text=text):
                    self.user_text = text
                case DiscardStale(request=req):
                    logger.debug("[TRIAL] discarding stale request from %s", req.agent_id)
                    self.agents[req.agent_id].on_abandon(req)

    def done(self, pending_user: deque) -> bool:
        if pending_user or any(a.status is not AgentStatus.COMPLETE for a in self.agents.values()):
            return False
        if self.orchestrator is not None:
            return self.orchestrator.is_idle() and self.user_text is None
        return not self.flat_queue

    # -- per tick ----------------------------------------------------------

    def deliver_user_message(self, text: str, tick: int) -> None:
        if self.orchestrator is not None:
            self.dispatch(self.orchestrator.handle_event(UserMessage(text, tick)))
        else:
            self.answer_user(text, tick)

    def step_agents(self, tick: int) -> None:
        for agent_id in sorted(self.agents):
            agent = self.agents[agent_id]
            step = agent.step(tick)
            self.registry = upsert_entry(self.registry, step.heartbeat)
            self.focus[agent_id] = self.focus[agent_id].with_summary(agent.partial_output_summary)
            if step.request is None:
                continue
            if self.orchestrator is not None:
                self.dispatch(
                    self.orchestrator.handle_event(SteeringRequestArrived(step.request, tick))
                )
            else:
                self.flat_queue.enqueue(step.request)

    def work(self, tick: int) -> None:
        orch = self.orchestrator
        if orch is None:
            while (req := self.flat_queue.dequeue_next()) is not None:
                self.steer(req, tick, flat=True)
            return

        self.dispatch(orch.handle_event(Tick(tick)))
        if orch.state.mode is Mode.FOCUS:
            outcome_event = self.steer(orch.active, tick, flat=False)
            self.dispatch(orch.handle_event(outcome_event))
        elif orch.state.mode is Mode.USER_INTERACT:
            text, self.user_text = self.user_text, None
            self.answer_user(text or "", tick)
            self.dispatch(orch.handle_event(UserInteractDone(tick)))

    def steer(self, req: SteeringRequest, tick: int, *, flat: bool):
        agent = self.agents[req.agent_id]
        decision = agent.decision_for(req)
        expected = decision.expected_keywords if decision else ()
        outcome = run_steering_session(
            req,
            self.focus[req.agent_id],
            self.registry,
            self.cfg.builder,
            self.backend,
            tick=tick,
            vocab=self.vocab(req.agent_id, expected),
            params=self.cfg.params,
            flat_records=list(self.focus.values()) if flat else None,
            sleep=self.sleep,
        )
        text = outcome.response.response_text if outcome.response else ""
        if outcome.response is not None:
            agent.on_answer(req, text)
        else:
            agent.on_abandon(req)
        self.focus[req.agent_id] = outcome.focus.with_summary(agent.partial_output_summary)

        accurate = contaminated = None
        if decision is not None:
            others = {a: kws for a, kws in self.keywords.items() if a != req.agent_id}
            accurate = bool(text) and score_accuracy(text, expected)
            contaminated = bool(text) and score_contamination(text, others)
            self.scores.append(
                InteractionScore(
                    agent_id=req.agent_id,
                    accurate=accurate,
                    contaminated=contaminated,
                    context_tokens=outcome.context.token_count,
                    step=decision.step,
                )
            )
        self.write(
            self.record(
                RecordMode.FLAT_CALL if flat else RecordMode.FOCUS,
                req.agent_id, outcome.context, text, accurate, contaminated, tick,
            )
        )
        return outcome.event

    def answer_user(self, text: str, tick: int) -> None:
        ctx = build_registry_context(self.registry, self.cfg.builder, user_message=text)
        response, _ = call_backend(
            self.backend, ctx, self.cfg.params, self.vocab("", ()), sleep=self.sleep, label="user"
        )
        self.write(
            self.record(RecordMode.USER_INTERACT, None, ctx, response or "", None, None, tick)
        )

    def record(
        self,
        mode: RecordMode,
        agent_id: str | None,
        ctx: BuiltContext,
        response: str,
        accurate: bool | None,
        contaminated: bool | None,
        tick: int,
    ) -> TrialRecord:
        return TrialRecord(
            trial_id=self.trial_index,
            scenario_id=self.scenario.scenario_id,
            condition=self.cfg.condition.value,
            step=len(self.records) + 1,
            mode=mode,
            focused_agent=agent_id,
            context_tokens=ctx.token_count,
            prompt_text=ctx.full_text,
            response_text=response,
            accurate=accurate,
            contaminated=contaminated,
            tick=tick,
        )


# ---------------------------------------------------------------------------
# Public
# ---------------------------------------------------------------------------


def build_agents(
    cfg: RunConfig,
    scenario: Scenario,
    trial_seed: int,
    complete_fn: Callable[[list[dict[str, str]]], str] | None = None,
) -> dict[str, SimAgent]:
    rng = np.random.default_rng(trial_seed)
    agents: dict[str, SimAgent] = {}
    for spec in sorted(scenario.agents, key=lambda a: a.agent_id):
        if cfg.agent_mode is AgentMode.LLM:
            agents[spec.agent_id] = LLMAgent(spec, complete_fn)
        else:
            agents[spec.agent_id] = ScriptedAgent(spec, schedule_decisions(spec, rng))
    return agents


def _default_complete_fn(cfg: RunConfig) -> Callable[[list[dict[str, str]]], str]:
    if cfg.backend is not BackendKind.HTTP:
        raise ProtocolViolation("LLM agents need the http backend or an explicit completion function")
    client = HttpBackend(endpoint=cfg.endpoint or None)
    return lambda messages: client.chat(messages, cfg.params)


def run_trial(
    cfg: RunConfig,
    trial_index: int,
    *,
    scenario: Scenario | None = None,
    backend: Backend | None = None,
    complete_fn: Callable[[list[dict[str, str]]], str] | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> TrialResult:
    """
    Run one trial and write its log. Any harness error marks the trial
    failed: the partial log stays on disk and ``TrialFailed`` is raised.
    """
    if scenario is None:
        from core.selectors import get_scenario

        scenario = get_scenario(scenario_id=cfg.scenario_id, scenario_dir=cfg.scenario_dir)
    backend = backend or make_backend(cfg.backend, cfg.params)
    if cfg.agent_mode is AgentMode.LLM and complete_fn is None:
        complete_fn = _default_complete_fn(cfg)

    trial_seed = derive_trial_seed(cfg.seed, trial_index)
    log_path = cfg.log_path(trial_index)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    pending_user = deque(scenario.user_messages)
    budget = max(scenario.total_steps, scenario.n_interactions + len(pending_user))
    max_ticks = budget * TRIAL_TICK_SLACK

    logger.info(
        "[TRIAL] %s %s t%d (seed %d) starting",
        scenario.scenario_id, cfg.condition.value, trial_index, trial_seed,
    )
    with log_path.open("w", encoding="utf-8") as log:
        trial = _Trial(
            cfg=cfg,
            trial_index=trial_index,
            scenario=scenario,
            backend=backend,
            agents=build_agents(cfg, scenario, trial_seed, complete_fn),
            sleep=sleep,
            log=log,
        )
        try:
            for tick in range(1, max_ticks + 1):
                while pending_user and pending_user[0][0] <= tick:
                    trial.deliver_user_message(pending_user.popleft()[1], tick)
                trial.step_agents(tick)
                trial.work(tick)
                if trial.done(pending_user):
                    break
            else:
                raise ProtocolViolation(f"trial did not settle within {max_ticks} ticks")
            summary = trial_summary(trial.scores)
        except EmptyTrial as exc:
            raise TrialFailed(str(exc), log_path) from exc
        except DacsError as exc:
            logger.error("[TRIAL] %s t%d failed: %s", scenario.scenario_id, trial_index, exc)
            raise TrialFailed(f"{type(exc).__name__}: {exc}", log_path) from exc

    row = SummaryRow(
        scenario_id=scenario.scenario_id,
        condition=cfg.condition.value,
        trial_id=trial_index,
        accuracy=summary.accuracy,
        contamination=summary.contamination,
        avg_context_tokens=summary.avg_context_tokens,
        n_interactions=len(trial.scores),
        seed=cfg.seed,
    )
    logger.info(
        "[TRIAL] %s %s t%d done: acc=%.3f contam=%.3f tokens=%.1f n=%d",
        row.scenario_id, row.condition, trial_index, row.accuracy, row.contamination,
        row.avg_context_tokens, row.n_interactions,
    )
    trace = trial.orchestrator.trace if trial.orchestrator is not None else []
    return TrialResult(summary=row, log_path=log_path, records=trial.records, trace=trace)
