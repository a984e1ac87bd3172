"""
Orchestrator state machine: REGISTRY, FOCUS(agent) and USER_INTERACT.

  REGISTRY      + non-LOW request      -> FOCUS(a_i)
  FOCUS(a_i)    + complete/abandoned   -> REGISTRY
  FOCUS(a_i)    + HIGH from a_j != a_i -> save a_i, FOCUS(a_j)
  REGISTRY      + user message         -> USER_INTERACT
  USER_INTERACT + done                 -> REGISTRY

Each time REGISTRY is re-entered the next unit of work is picked in this
order: queued user messages, the most recent saved session still worth
resuming, the front non-LOW request, then a LOW batch already flushed.
LOW requests are flushed into batches on ``Tick`` only.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, NamedTuple

from core.backend import Backend, CompletionParams, KeywordTable
from core.constants import BACKEND_BACKOFF_BASE_S, LOW_BATCH_MAX_AGE, LOW_BATCH_SIZE
from core.context_builder import (
    BuilderConfig,
    BuiltContext,
    FocusRecord,
    build_flat_context,
    build_focus_context,
    steering_directive,
)
from core.exceptions import BackendUnavailable, ProtocolViolation
from core.protocols import PendingQueue, SteeringRequest, SteeringResponse
from core.registry import AgentStatus, Registry, Urgency

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------


class Mode(Enum):
    REGISTRY = "REGISTRY"
    FOCUS = "FOCUS"
    USER_INTERACT = "USER_INTERACT"


@dataclass(frozen=True)
class OrchestratorState:
    mode: Mode = Mode.REGISTRY
    agent_id: str | None = None

    def __post_init__(self):
        if (self.mode is Mode.FOCUS) != (self.agent_id is not None):
            raise ProtocolViolation("FOCUS names exactly one agent; other modes name none")

    @classmethod
    def registry(cls) -> OrchestratorState:
        return cls(Mode.REGISTRY)

    @classmethod
    def focus(cls, agent_id: str) -> OrchestratorState:
        return cls(Mode.FOCUS, agent_id)

    @classmethod
    def user_interact(cls) -> OrchestratorState:
        return cls(Mode.USER_INTERACT)

    def __str__(self) -> str:
        return f"FOCUS({self.agent_id})" if self.mode is Mode.FOCUS else self.mode.value


@dataclass(frozen=True)
class SavedSession:
    agent_id: str
    request: SteeringRequest
    partial_exchange: str | None = None


# ---------------------------------------------------------------------------
# Events
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SteeringRequestArrived:
    request: SteeringRequest
    tick: int


@dataclass(frozen=True)
class SteeringComplete:
    agent_id: str
    tick: int


@dataclass(frozen=True)
class SteeringAbandoned:
    agent_id: str
    tick: int


@dataclass(frozen=True)
class UserMessage:
    text: str
    tick: int


@dataclass(frozen=True)
class UserInteractDone:
    tick: int


@dataclass(frozen=True)
class Tick:
    tick: int


Event = (
    SteeringRequestArrived
    | SteeringComplete
    | SteeringAbandoned
    | UserMessage
    | UserInteractDone
    | Tick
)


# ---------------------------------------------------------------------------
# Actions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnterFocus:
    agent_id: str
    request: SteeringRequest


@dataclass(frozen=True)
class SaveSession:
    agent_id: str


@dataclass(frozen=True)
class ResumeSession:
    agent_id: str
    request: SteeringRequest


@dataclass(frozen=True)
class QueueRequest:
    request: SteeringRequest


@dataclass(frozen=True)
class QueueUserMessage:
    text: str


@dataclass(frozen=True)
class AnswerUser:
    text: str


@dataclass(frozen=True)
class ProcessLowBatch:
    requests: tuple[SteeringRequest, ...]


@dataclass(frozen=True)
class DiscardStale:
    request: SteeringRequest


Action = (
    EnterFocus
    | SaveSession
    | ResumeSession
    | QueueRequest
    | QueueUserMessage
    | AnswerUser
    | ProcessLowBatch
    | DiscardStale
)


def describe(item: Event | Action) -> str:
    """Compact, deterministic text form used in traces."""
    name = type(item).__name__
    agent_id = getattr(item, "agent_id", None)
    request = getattr(item, "request", None)
    if agent_id is None and request is not None:
        agent_id = request.agent_id
    if isinstance(item, ProcessLowBatch):
        return f"{name}({','.join(r.agent_id for r in item.requests)})"
    if isinstance(item, SteeringRequestArrived):
        return f"{name}({agent_id},{item.request.urgency.name})"
    return f"{name}({agent_id})" if agent_id else name


class TraceRecord(NamedTuple):
    tick: int
    state_before: str
    event: str
    actions: tuple[str, ...]
    state_after: str

    def as_record(self) -> dict[str, Any]:
        return self._asdict() | {"actions": list(self.actions)}


# ---------------------------------------------------------------------------
# Resume
# ---------------------------------------------------------------------------


class Resumption(NamedTuple):
    request: SteeringRequest | None
    from_stack: bool
    discarded: tuple[SteeringRequest, ...]


def _is_stale(
    session: SavedSession,
    status_of: Callable[[str], AgentStatus] | None,
    latest_issued: Mapping[str, int],
) -> bool:
    if status_of is not None and status_of(session.agent_id) is AgentStatus.COMPLETE:
        return True
    # Superseded: the agent has issued a newer request since this one.
    issued = session.request.issued_tick
    return latest_issued.get(session.agent_id, issued) > issued


def resume_pending(
    saved: list[SavedSession],
    queue: PendingQueue,
    *,
    status_of: Callable[[str], AgentStatus] | None = None,
    latest_issued: Mapping[str, int] | None = None,
) -> Resumption:
    """
    Pop the most recent saved session that is still pending (``saved`` is a
    stack, top at the end). Stale sessions on the way are discarded. With
    nothing to resume, fall through to the front non-LOW queued request.
    """
    latest_issued = latest_issued or {}
    discarded: list[SteeringRequest] = []
    while saved:
        session = saved.pop()
        if _is_stale(session, status_of, latest_issued):
            discarded.append(session.request)
            continue
        return Resumption(session.request, True, tuple(discarded))
    return Resumption(queue.dequeue_non_low(), False, tuple(discarded))


# ---------------------------------------------------------------------------
# Machine
# ---------------------------------------------------------------------------


@dataclass
class Orchestrator:
    """
    Single-threaded FSM. ``handle_event`` mutates the queue, the saved-session
    stack and the user inbox in place and returns the emitted actions.
    """

    status_of: Callable[[str], AgentStatus] | None = None
    low_batch_size: int = LOW_BATCH_SIZE
    low_batch_max_age: int = LOW_BATCH_MAX_AGE
    state: OrchestratorState = field(default_factory=OrchestratorState.registry)
    queue: PendingQueue = field(default_factory=PendingQueue)
    saved: list[SavedSession] = field(default_factory=list)
    inbox: deque[str] = field(default_factory=deque)
    low_batch: deque[SteeringRequest] = field(default_factory=deque)
    active: SteeringRequest | None = None
    latest_issued: dict[str, int] = field(default_factory=dict)
    trace: list[TraceRecord] = field(default_factory=list)
    max_depth: int = 0

    # -- public ------------------------------------------------------------

    def handle_event(self, event: Event) -> list[Action]:
        before = str(self.state)
        actions: list[Action] = []
        match event:
            case SteeringRequestArrived(request=req):
                self._on_request(req, actions)
            case SteeringComplete(agent_id=agent_id) | SteeringAbandoned(agent_id=agent_id):
                self._on_session_end(event, agent_id, actions)
            case UserMessage(text=text):
                self._on_user_message(text, actions)
            case UserInteractDone():
                if self.state.mode is not Mode.USER_INTERACT:
                    raise ProtocolViolation(f"UserInteractDone while in {self.state}")
                self.state = OrchestratorState.registry()
                self._dispatch_next(actions)
            case Tick(tick=tick):
                self._on_tick(tick, actions)
            case _:
                raise ProtocolViolation(f"unknown event {event!r}")

        record = TraceRecord(
            tick=event.tick,
            state_before=before,
            event=describe(event),
            actions=tuple(describe(a) for a in actions),
            state_after=str(self.state),
        )
        self.trace.append(record)
        if actions or before != record.state_after:
            logger.debug(
                "[FSM] t=%d %s --%s--> %s %s",
                record.tick, before, record.event, record.state_after, list(record.actions),
            )
        return actions

    @property
    def focused_agent(self) -> str | None:
        return self.state.agent_id

    def is_idle(self) -> bool:
        return (
            self.state.mode is Mode.REGISTRY
            and not self.queue
            and not self.saved
            and not self.inbox
            and not self.low_batch
        )

    # -- transitions -------------------------------------------------------

    def _on_request(self, req: SteeringRequest, actions: list[Action]) -> None:
        self.latest_issued[req.agent_id] = max(
            req.issued_tick, self.latest_issued.get(req.agent_id, req.issued_tick)
        )
        mode = self.state.mode

        if mode is Mode.REGISTRY and req.urgency > Urgency.LOW:
            self._enter_focus(req, actions)
            return

        if (
            mode is Mode.FOCUS
            and req.urgency is Urgency.HIGH
            and req.agent_id != self.state.agent_id
        ):
            assert self.active is not None
            self.saved.append(SavedSession(self.state.agent_id, self.active))
            self.max_depth = max(self.max_depth, len(self.saved))
            actions.append(SaveSession(self.state.agent_id))
            self._enter_focus(req, actions)
            return

        # LOW in REGISTRY, MEDIUM/LOW in FOCUS, HIGH from the focused agent,
        # anything during USER_INTERACT.
        self.queue.enqueue(req)
        actions.append(QueueRequest(req))

    def _on_session_end(self, event: Event, agent_id: str, actions: list[Action]) -> None:
        if self.state.mode is not Mode.FOCUS:
            raise ProtocolViolation(f"{type(event).__name__} while in {self.state}")
        if agent_id != self.state.agent_id:
            raise ProtocolViolation(
                f"{type(event).__name__} for {agent_id!r} while focused on {self.state.agent_id!r}"
            )
        self.active = None
        self.state = OrchestratorState.registry()
        self._dispatch_next(actions)

    def _on_user_message(self, text: str, actions: list[Action]) -> None:
        if self.state.mode is Mode.REGISTRY:
            self.state = OrchestratorState.user_interact()
            actions.append(AnswerUser(text))
            return
        self.inbox.append(text)
        actions.append(QueueUserMessage(text))

    def _on_tick(self, tick: int, actions: list[Action]) -> None:
        if self.state.mode is not Mode.REGISTRY:
            return
        batch = self.queue.flush_low_batch(
            tick, batch_size=self.low_batch_size, max_age=self.low_batch_max_age
        )
        if batch:
            self.low_batch.extend(batch)
            actions.append(ProcessLowBatch(tuple(batch)))
        self._dispatch_next(actions)

    def _enter_focus(self, req: SteeringRequest, actions: list[Action], resumed: bool = False):
        self.state = OrchestratorState.focus(req.agent_id)
        self.active = req
        actions.append(ResumeSession(req.agent_id, req) if resumed else EnterFocus(req.agent_id, req))

    def _dispatch_next(self, actions: list[Action]) -> None:
        """Pick the next unit of work after (re-)entering REGISTRY."""
        if self.inbox:
            self.state = OrchestratorState.user_interact()
            actions.append(AnswerUser(self.inbox.popleft()))
            return

        resumption = resume_pending(
            self.saved,
            self.queue,
            status_of=self.status_of,
            latest_issued=self.latest_issued,
        )
        actions.extend(DiscardStale(r) for r in resumption.discarded)
        if resumption.request is not None:
            self._enter_focus(resumption.request, actions, resumed=resumption.from_stack)
            return

        if self.low_batch:
            self._enter_focus(self.low_batch.popleft(), actions)


def handle_event(
    state: OrchestratorState,
    event: Event,
    queue: PendingQueue,
    saved: list[SavedSession],
    *,
    active: SteeringRequest | None = None,
    status_of: Callable[[str], AgentStatus] | None = None,
) -> tuple[OrchestratorState, list[Action], PendingQueue, list[SavedSession]]:
    """Functional form of ``Orchestrator.handle_event`` for one transition."""
    if state.mode is Mode.FOCUS and active is None:
        raise ProtocolViolation("FOCUS state needs the active request")
    machine = Orchestrator(
        status_of=status_of, state=state, queue=queue, saved=saved, active=active
    )
    actions = machine.handle_event(event)
    return machine.state, actions, machine.queue, machine.saved


# ---------------------------------------------------------------------------
# Steering session
# ---------------------------------------------------------------------------


def call_backend(
    backend: Backend,
    ctx: BuiltContext,
    params: CompletionParams,
    vocab: KeywordTable,
    *,
    sleep: Callable[[float], None] = time.sleep,
    label: str = "",
) -> tuple[str | None, int]:
    """
    Call the backend up to ``backend.max_attempts`` times, backing off
    1s, 2s, 4s... between attempts. Returns ``(None, attempts)`` once the
    attempts are exhausted.
    """
    attempts = max(1, backend.max_attempts)
    for attempt in range(attempts):
        try:
            return backend.complete(ctx, params, vocab), attempt + 1
        except BackendUnavailable as exc:
            logger.warning(
                "[BACKEND] attempt %d/%d for %s failed: %s", attempt + 1, attempts, label, exc
            )
            if attempt + 1 < attempts:
                sleep(BACKEND_BACKOFF_BASE_S * 2**attempt)
    return None, attempts


class SessionOutcome(NamedTuple):
    response: SteeringResponse | None
    focus: FocusRecord
    context: BuiltContext
    event: SteeringComplete | SteeringAbandoned
    attempts: int


def run_steering_session(
    req: SteeringRequest,
    focus: FocusRecord,
    registry: Registry,
    cfg: BuilderConfig,
    backend: Backend,
    *,
    tick: int,
    vocab: KeywordTable,
    params: CompletionParams | None = None,
    directive: str | None = None,
    flat_records: Iterable[FocusRecord] | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> SessionOutcome:
    """
    One atomic steering session: build the prompt, call the backend (with
    retries for live backends) and append the exchange to the FocusRecord.

    ``flat_records`` switches the prompt to the flat baseline (every agent's
    full context); the session bookkeeping is otherwise identical.
    """
    params = params or CompletionParams()
    directive = directive or steering_directive(req)
    if flat_records is not None:
        ctx = build_flat_context(req.agent_id, flat_records, registry, cfg, directive)
    else:
        ctx = build_focus_context(req.agent_id, focus, registry, cfg, directive)

    text, attempts = call_backend(backend, ctx, params, vocab, sleep=sleep, label=req.agent_id)
    if text is None:
        return SessionOutcome(
            response=None,
            focus=focus,
            context=ctx,
            event=SteeringAbandoned(req.agent_id, tick),
            attempts=attempts,
        )

    response = SteeringResponse(
        agent_id=req.agent_id,
        response_text=text,
        answered_tick=tick,
        context_tokens_at_call=ctx.token_count,
    )
    return SessionOutcome(
        response=response,
        focus=focus.with_exchange(req.question, text),
        context=ctx,
        event=SteeringComplete(req.agent_id, tick),
        attempts=attempts,
    )
