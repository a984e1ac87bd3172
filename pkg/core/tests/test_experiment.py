import hashlib
import json
import re
import tempfile
from pathlib import Path
from unittest.mock import MagicMock

from django.conf import settings
from django.test import SimpleTestCase, override_settings

from core.agents import parse_scenario
from core.backend import BackendKind
from core.constants import DEFAULT_BUDGET_T
from core.exceptions import BackendUnavailable, ProtocolViolation, TrialFailed
from core.experiment import (
    AgentMode,
    Condition,
    RecordMode,
    RunConfig,
    build_agents,
    derive_trial_seed,
    run_trial,
)
from core.selectors import get_scenario
from core.tokenizer import count_tokens


class ExperimentTestCase(SimpleTestCase):
    """Base class: a scratch output directory per test."""

    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.out = Path(tmp.name)

    def config(self, scenario_id="s1_n3", condition=Condition.DACS, **kwargs):
        return RunConfig(scenario_id=scenario_id, condition=condition, output_dir=self.out, **kwargs)

    def run_one(self, scenario_id="s1_n3", condition=Condition.DACS, trial=0, **kwargs):
        backend = kwargs.pop("backend_obj", None)
        complete_fn = kwargs.pop("complete_fn", None)
        cfg = self.config(scenario_id, condition, **kwargs)
        return run_trial(
            cfg, trial,
            scenario=get_scenario(scenario_id=scenario_id),
            backend=backend,
            complete_fn=complete_fn,
            sleep=MagicMock(),
        )


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


class RunConfigTestCase(ExperimentTestCase):
    def test_log_path(self):
        cfg = self.config("s5_n5_crossfire", Condition.FLAT)
        self.assertEqual(cfg.log_path(3), self.out / "logs" / "s5_n5_crossfire_flat_t3.jsonl")

    def test_invalid(self):
        with self.assertRaises(ValueError):
            self.config(trials=0)
        with self.assertRaises(ValueError):
            self.config(workers=0)

    def test_as_record_is_json_friendly(self):
        record = self.config(backend=BackendKind.MOCK_CONTAMINATOR).as_record()
        self.assertEqual(record["backend"], "mock-contaminator")
        self.assertEqual(record["condition"], "dacs")
        json.dumps(record)

    def test_budget_defaults_to_settings(self):
        self.assertEqual(settings.DACS_DEFAULT_BUDGET, DEFAULT_BUDGET_T)
        self.assertEqual(self.config().budget_T, DEFAULT_BUDGET_T)
        with override_settings(DACS_DEFAULT_BUDGET=900):
            self.assertEqual(self.config().budget_T, 900)
            self.assertEqual(self.config().builder.budget_T, 900)
        self.assertEqual(self.config(budget_T=1200).budget_T, 1200)


class DeriveTrialSeedTestCase(SimpleTestCase):
    def test_sha256_prefix(self):
        expected = int.from_bytes(hashlib.sha256(b"7:2").digest()[:8], "big")
        self.assertEqual(derive_trial_seed(7, 2), expected)

    def test_distinct_per_trial(self):
        self.assertEqual(len({derive_trial_seed(0, i) for i in range(100)}), 100)


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------


class OracleTrialTestCase(ExperimentTestCase):
    def test_dacs_is_perfect(self):
        for trial in range(10):
            result = self.run_one(trial=trial)
            self.assertEqual(len(result.records), 15, trial)
            self.assertTrue(all(r.mode is RecordMode.FOCUS for r in result.records))
            self.assertEqual(result.summary.accuracy, 1.0)
            self.assertEqual(result.summary.contamination, 0.0)
            self.assertEqual(result.summary.n_interactions, 15)
            self.assertTrue(result.trace)

    def test_flat_uses_more_context(self):
        dacs = self.run_one(condition=Condition.DACS)
        flat = self.run_one(condition=Condition.FLAT)
        self.assertEqual(flat.summary.accuracy, 1.0)
        self.assertTrue(all(r.mode is RecordMode.FLAT_CALL for r in flat.records))
        self.assertGreater(flat.summary.avg_context_tokens, dacs.summary.avg_context_tokens)
        self.assertEqual(flat.trace, [])

    def test_flat_call_not_smaller_than_matching_focus_call(self):
        def by_directive(result):
            return {
                (r.focused_agent, r.prompt_text.splitlines()[-1]): r.context_tokens
                for r in result.records
            }

        dacs = by_directive(self.run_one(condition=Condition.DACS))
        flat = by_directive(self.run_one(condition=Condition.FLAT))
        self.assertEqual(dacs.keys(), flat.keys())
        for key, tokens in dacs.items():
            self.assertGreaterEqual(flat[key], tokens, key)

    def test_logged_tokens_recount(self):
        result = self.run_one("s2_n5")
        lines = result.log_path.read_text(encoding="utf-8").splitlines()
        self.assertEqual(len(lines), len(result.records))
        for line in lines:
            record = json.loads(line)
            self.assertEqual(count_tokens(record["prompt_text"]), record["context_tokens"])
            self.assertLessEqual(record["context_tokens"], 16000)

    def test_user_message_is_answered_from_registry(self):
        result = self.run_one("s2_n5")
        user = [r for r in result.records if r.mode is RecordMode.USER_INTERACT]
        self.assertEqual(len(user), 1)
        self.assertIsNone(user[0].focused_agent)
        self.assertEqual(user[0].response_text, "Acknowledged; 5 agents tracked.")
        self.assertEqual(result.summary.n_interactions, 15)

    def test_logs_are_byte_identical(self):
        first = self.run_one("s6_n5_cascade", trial=4).log_path.read_bytes()
        second = self.run_one("s6_n5_cascade", trial=4).log_path.read_bytes()
        self.assertEqual(first, second)


class ContaminatorTrialTestCase(ExperimentTestCase):
    def test_flat_context_captures_attention(self):
        dacs = self.run_one("s5_n5_crossfire", Condition.DACS, backend=BackendKind.MOCK_CONTAMINATOR)
        flat = self.run_one("s5_n5_crossfire", Condition.FLAT, backend=BackendKind.MOCK_CONTAMINATOR)
        self.assertGreater(dacs.summary.accuracy, flat.summary.accuracy)
        self.assertGreater(flat.summary.contamination, 0.0)
        self.assertEqual(dacs.summary.contamination, 0.0)


class FailureTrialTestCase(ExperimentTestCase):
    def test_unavailable_backend_scores_abandoned(self):
        backend = MagicMock(max_attempts=1)
        backend.complete.side_effect = BackendUnavailable("down")
        result = self.run_one(backend_obj=backend)
        self.assertEqual(result.summary.accuracy, 0.0)
        self.assertEqual(result.summary.contamination, 0.0)
        self.assertTrue(all(r.response_text == "" for r in result.records))

    def test_harness_error_fails_trial(self):
        backend = MagicMock(max_attempts=1)
        backend.complete.side_effect = ProtocolViolation("bad prompt")
        with self.assertRaises(TrialFailed) as ctx:
            self.run_one(backend_obj=backend)
        self.assertTrue(ctx.exception.log_path.is_file())


class LLMAgentTrialTestCase(ExperimentTestCase):
    @staticmethod
    def complete_fn(messages):
        asked = any(m["role"] == "assistant" for m in messages)
        return "All finished. [[DONE]]" if asked else "Drafting. [[STEER: Which approach next?]]"

    def test_marker_agents_reach_orchestrator(self):
        result = self.run_one(agent_mode=AgentMode.LLM, complete_fn=self.complete_fn)
        self.assertEqual(len(result.records), 3)
        self.assertEqual(
            sorted(r.focused_agent for r in result.records), ["a1", "a2", "a3"]
        )
        self.assertEqual(result.summary.accuracy, 1.0)

    def test_llm_mode_needs_a_completion_source(self):
        with self.assertRaises(ProtocolViolation):
            self.run_one(agent_mode=AgentMode.LLM)


def paired_scenario():
    def agent(agent_id, label, keyword, steps):
        return {
            "agent_id": agent_id,
            "domain_label": label,
            "task_description": f"Finish the {label} work.",
            "decisions": [
                {
                    "step": step,
                    "question": f"Which {label} option at step {step}?",
                    "context_excerpt": f"Option notes for step {step}.",
                    "urgency": "MEDIUM",
                    "blocking": True,
                    "expected_keywords": [f"{keyword}{step}"],
                    "default_path": "Keep the current plan.",
                }
                for step in steps
            ],
        }

    return parse_scenario(
        {
            "scenario_id": "paired",
            "total_steps": 6,
            "agents": [agent("a1", "parser", "trie", (1, 3)), agent("a2", "schema", "index", (1, 4))],
        }
    )


class MarkerTraceTestCase(ExperimentTestCase):
    """Marker-driven agents that fire on the scripted schedule drive the same trace."""

    def marker_fn(self, schedules):
        emitted = {agent_id: 0 for agent_id in schedules}

        def complete(messages):
            agent_id = re.match(r"You are agent (\S+) ", messages[0]["content"]).group(1)
            tick = int(re.match(r"Step (\d+)\.", messages[-1]["content"]).group(1))
            schedule = schedules[agent_id]
            index = emitted[agent_id]
            if index == len(schedule):
                return "Wrapping up. [[DONE]]"
            slot, decision = schedule[index]
            if tick < slot:
                return "Working."
            emitted[agent_id] += 1
            return f"{decision.context_excerpt} [[STEER: {decision.question}]]"

        return complete

    @staticmethod
    def active(trace):
        return [t for t in trace if t.actions or t.state_before != t.state_after]

    @staticmethod
    def calls(result):
        return [(r.focused_agent, r.tick, r.prompt_text.splitlines()[-1]) for r in result.records]

    def test_same_schedule_same_trace(self):
        scenario = paired_scenario()
        scripted_cfg = self.config("paired")
        schedules = {
            agent_id: agent.schedule
            for agent_id, agent in build_agents(
                scripted_cfg, scenario, derive_trial_seed(scripted_cfg.seed, 0)
            ).items()
        }
        scripted = run_trial(scripted_cfg, 0, scenario=scenario, sleep=MagicMock())
        marker = run_trial(
            self.config("paired", agent_mode=AgentMode.LLM),
            0,
            scenario=scenario,
            complete_fn=self.marker_fn(schedules),
            sleep=MagicMock(),
        )

        self.assertTrue(self.active(scripted.trace))
        self.assertEqual(self.active(marker.trace), self.active(scripted.trace))
        self.assertEqual(len(marker.records), 4)
        self.assertEqual(self.calls(marker), self.calls(scripted))
