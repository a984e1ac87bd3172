"""
Steering protocol messages and the urgency-ordered pending queue.

HIGH requests may preempt a focus session, MEDIUM requests queue while the
agent continues on its default path, LOW requests are batched.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Any

from core.constants import LOW_BATCH_MAX_AGE, LOW_BATCH_SIZE
from core.exceptions import DuplicateRequest, ProtocolViolation
from core.registry import AgentStatus, Urgency
from core.tokenizer import TokenCount


@dataclass(frozen=True)
class SteeringRequest:
    agent_id: str
    context: str
    question: str
    blocking: bool
    urgency: Urgency
    issued_tick: int

    def __post_init__(self):
        if not self.agent_id:
            raise ProtocolViolation("SteeringRequest.agent_id must be non-empty")
        if not self.question.strip():
            raise ProtocolViolation("SteeringRequest.question must be non-empty")

    @property
    def key(self) -> tuple[str, int]:
        return (self.agent_id, self.issued_tick)

    def as_record(self) -> dict[str, Any]:
        return {
            "agent_id": self.agent_id,
            "context": self.context,
            "question": self.question,
            "blocking": self.blocking,
            "urgency": self.urgency.name,
            "issued_tick": self.issued_tick,
        }


@dataclass(frozen=True)
class SteeringResponse:
    agent_id: str
    response_text: str
    answered_tick: int
    context_tokens_at_call: TokenCount


@dataclass(frozen=True)
class Heartbeat:
    agent_id: str
    status: AgentStatus
    task: str
    last_output_summary: str
    urgency: Urgency
    tick: int


def _order_key(req: SteeringRequest) -> tuple[int, int, str]:
    return (-int(req.urgency), req.issued_tick, req.agent_id)


class PendingQueue:
    """Dequeue order: urgency desc, then issued_tick asc, then agent_id asc."""

    def __init__(self, requests: list[SteeringRequest] | None = None):
        self._items: list[SteeringRequest] = []
        for req in requests or []:
            self.enqueue(req)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(list(self._items))

    def __contains__(self, req: object) -> bool:
        return req in self._items

    def enqueue(self, req: SteeringRequest) -> PendingQueue:
        if any(item.key == req.key for item in self._items):
            raise DuplicateRequest(
                f"Request from {req.agent_id!r} at tick {req.issued_tick} already queued"
            )
        bisect.insort(self._items, req, key=_order_key)
        return self

    def dequeue_next(self) -> SteeringRequest | None:
        if not self._items:
            return None
        return self._items.pop(0)

    def dequeue_non_low(self) -> SteeringRequest | None:
        """Front request, skipping LOW ones (those leave only in batches)."""
        for idx, item in enumerate(self._items):
            if item.urgency > Urgency.LOW:
                return self._items.pop(idx)
        return None

    def flush_low_batch(
        self,
        now_tick: int,
        batch_size: int = LOW_BATCH_SIZE,
        max_age: int = LOW_BATCH_MAX_AGE,
        force: bool = False,
    ) -> list[SteeringRequest]:
        """
        Remove and return every pending LOW request once ``batch_size`` are
        waiting or the oldest has waited ``max_age`` ticks; else return [].
        """
        if batch_size < 1 or max_age < 0:
            raise ValueError("batch_size must be >= 1 and max_age >= 0")
        lows = [item for item in self._items if item.urgency == Urgency.LOW]
        if not lows:
            return []
        oldest_age = now_tick - min(item.issued_tick for item in lows)
        if force or len(lows) >= batch_size or oldest_age >= max_age:
            self._items = [item for item in self._items if item.urgency != Urgency.LOW]
            return lows
        return []
