from django.test import SimpleTestCase

from core.constants import REGISTRY_SUMMARY_CAP, REGISTRY_TASK_CAP
from core.exceptions import UnknownAgent
from core.protocols import Heartbeat
from core.registry import (
    AgentStatus,
    Registry,
    RegistryEntry,
    Urgency,
    render_entry,
    render_entry_without_summary,
    render_registry,
    upsert_entry,
)
from core.tokenizer import count_tokens


def heartbeat(agent_id="a1", *, status=AgentStatus.RUNNING, task="Write a parser.",
              summary="Halfway done.", urgency=Urgency.LOW, tick=1):
    return Heartbeat(
        agent_id=agent_id,
        status=status,
        task=task,
        last_output_summary=summary,
        urgency=urgency,
        tick=tick,
    )


class UpsertEntryTestCase(SimpleTestCase):
    def test_insert_then_replace(self):
        registry = upsert_entry(Registry(), heartbeat("a1", tick=1))
        registry = upsert_entry(registry, heartbeat("a1", status=AgentStatus.BLOCKED, tick=2))
        self.assertEqual(len(registry), 1)
        entry = registry.get("a1")
        self.assertEqual(entry.status, AgentStatus.BLOCKED)
        self.assertEqual(entry.last_heartbeat_tick, 2)

    def test_previous_registry_untouched(self):
        first = upsert_entry(Registry(), heartbeat("a1"))
        second = upsert_entry(first, heartbeat("a2"))
        self.assertEqual(len(first), 1)
        self.assertEqual(len(second), 2)

    def test_oversize_text_is_truncated(self):
        long_task = " ".join(f"w{i}" for i in range(REGISTRY_TASK_CAP * 2))
        long_summary = " ".join(f"s{i}" for i in range(REGISTRY_SUMMARY_CAP * 2))
        entry = upsert_entry(
            Registry(), heartbeat(task=long_task, summary=long_summary)
        ).get("a1")
        self.assertEqual(count_tokens(entry.task), REGISTRY_TASK_CAP)
        self.assertEqual(count_tokens(entry.last_output_summary), REGISTRY_SUMMARY_CAP)

    def test_iteration_is_sorted(self):
        registry = Registry()
        for agent_id in ("a3", "a1", "a2"):
            registry = upsert_entry(registry, heartbeat(agent_id))
        self.assertEqual([e.agent_id for e in registry], ["a1", "a2", "a3"])
        self.assertEqual(registry.agent_ids(), ["a1", "a2", "a3"])

    def test_get_unknown_raises(self):
        with self.assertRaises(UnknownAgent):
            Registry().get("ghost")


class RenderTestCase(SimpleTestCase):
    def setUp(self):
        self.entry = RegistryEntry(
            agent_id="a1",
            task="Write a parser.",
            status=AgentStatus.BLOCKED,
            last_output_summary="Waiting on a grammar question.",
            urgency=Urgency.HIGH,
        )

    def test_line_format(self):
        self.assertEqual(
            render_entry(self.entry),
            "a1: BLOCKED, Write a parser., Waiting on a grammar question. [urgency=HIGH]",
        )

    def test_entry_cap(self):
        line = render_entry(self.entry, cap=5)
        self.assertEqual(count_tokens(line), 5)

    def test_without_summary_is_shorter(self):
        self.assertLess(
            count_tokens(render_entry_without_summary(self.entry)),
            count_tokens(render_entry(self.entry)),
        )

    def test_render_registry_excludes(self):
        registry = upsert_entry(upsert_entry(Registry(), heartbeat("a1")), heartbeat("a2"))
        text = render_registry(registry, exclude="a1")
        self.assertNotIn("a1:", text)
        self.assertIn("a2:", text)

    def test_render_registry_unknown_exclude(self):
        with self.assertRaises(UnknownAgent):
            render_registry(Registry(), exclude="a9")
