"""
Per-agent status registry R = {r_1..r_N} and its budget-bounded rendering.

Entries are immutable snapshots refreshed by heartbeats; the registry value
is replaced, never mutated, so a trial can keep earlier versions around.
"""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import TYPE_CHECKING

from core.constants import REGISTRY_ENTRY_CAP, REGISTRY_SUMMARY_CAP, REGISTRY_TASK_CAP
from core.exceptions import UnknownAgent
from core.tokenizer import count_tokens, truncate_to

if TYPE_CHECKING:
    from core.protocols import Heartbeat


class AgentStatus(Enum):
    RUNNING = "RUNNING"
    BLOCKED = "BLOCKED"
    WAITING = "WAITING"
    COMPLETE = "COMPLETE"


class Urgency(IntEnum):
    LOW = 1
    MEDIUM = 2
    HIGH = 3


@dataclass(frozen=True)
class RegistryEntry:
    agent_id: str
    task: str
    status: AgentStatus
    last_output_summary: str
    urgency: Urgency
    last_heartbeat_tick: int = 0


@dataclass(frozen=True)
class Registry:
    entries: dict[str, RegistryEntry] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, agent_id: object) -> bool:
        return agent_id in self.entries

    def __iter__(self) -> Iterator[RegistryEntry]:
        for agent_id in sorted(self.entries):
            yield self.entries[agent_id]

    def get(self, agent_id: str) -> RegistryEntry:
        try:
            return self.entries[agent_id]
        except KeyError:
            raise UnknownAgent(agent_id) from None

    def agent_ids(self) -> list[str]:
        return sorted(self.entries)


def upsert_entry(registry: Registry, heartbeat: Heartbeat) -> Registry:
    """
    Insert or replace ``heartbeat.agent_id``'s entry.

    Oversize task/summary text is truncated to the entry caps, never rejected.
    """
    entry = RegistryEntry(
        agent_id=heartbeat.agent_id,
        task=truncate_to(heartbeat.task, REGISTRY_TASK_CAP),
        status=heartbeat.status,
        last_output_summary=truncate_to(
            heartbeat.last_output_summary, REGISTRY_SUMMARY_CAP
        ),
        urgency=heartbeat.urgency,
        last_heartbeat_tick=heartbeat.tick,
    )
    return Registry(entries={**registry.entries, entry.agent_id: entry})


def render_entry(entry: RegistryEntry, cap: int = REGISTRY_ENTRY_CAP) -> str:
    line = (
        f"{entry.agent_id}: {entry.status.value}, {entry.task}, "
        f"{entry.last_output_summary} [urgency={entry.urgency.name}]"
    )
    if count_tokens(line) > cap:
        line = truncate_to(line, cap)
    return line


def render_entry_without_summary(entry: RegistryEntry, cap: int = REGISTRY_ENTRY_CAP) -> str:
    """First degradation stage used by the context builder."""
    return render_entry(replace(entry, last_output_summary=""), cap)


def render_registry(registry: Registry, exclude: str | None = None) -> str:
    if exclude is not None and exclude not in registry:
        raise UnknownAgent(exclude)
    return "\n".join(
        render_entry(entry) for entry in registry if entry.agent_id != exclude
    )
