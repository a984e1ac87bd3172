from concurrent.futures import ThreadPoolExecutor
from unittest.mock import MagicMock, patch

import requests
from django.test import SimpleTestCase, override_settings

from core.backend import (
    AgentVocab,
    BackendKind,
    CompletionParams,
    ContaminatorBackend,
    HttpBackend,
    OracleBackend,
    _get_http_session,
    directive_target,
    keyword_mass,
    make_backend,
)
from core.context_builder import BuiltContext, Section, SectionKind
from core.exceptions import BackendUnavailable, MissingApiKey, ProtocolViolation
from core.tokenizer import count_tokens

VOCAB = {
    "a1": AgentVocab(current=("trie",), all=("trie", "regex")),
    "a2": AgentVocab(current=("heap",), all=("heap", "quicksort")),
}


def prompt(text, sections=()):
    return BuiltContext(
        full_text=text, token_count=count_tokens(text), budget_T=16000, sections=tuple(sections)
    )


class DirectiveTargetTestCase(SimpleTestCase):
    def test_found_on_any_line(self):
        self.assertEqual(directive_target("[FOCUS a1]\nTask: x\nSTEER a1 [urgency=LOW]"), "a1")

    def test_missing(self):
        with self.assertRaises(ProtocolViolation):
            directive_target("no directive here")


class OracleBackendTestCase(SimpleTestCase):
    def test_answers_target_keyword(self):
        text = "heap heap quicksort\nSTEER a1 [urgency=HIGH] question: ? | context: "
        answer = OracleBackend().complete(prompt(text), CompletionParams(), VOCAB)
        self.assertEqual(answer, "Recommended decision: trie.")

    def test_unknown_target(self):
        with self.assertRaises(ProtocolViolation):
            OracleBackend().complete(prompt("STEER a9"), CompletionParams(), VOCAB)

    def test_user_turn_is_acknowledged(self):
        sections = [
            Section(SectionKind.REGISTRY_ENTRY, "a1", 10),
            Section(SectionKind.REGISTRY_ENTRY, "a2", 10),
            Section(SectionKind.USER, None, 4),
        ]
        answer = OracleBackend().complete(
            prompt("a1: ...\na2: ...\nUSER: status?", sections), CompletionParams(), VOCAB
        )
        self.assertEqual(answer, "Acknowledged; 2 agents tracked.")


class ContaminatorBackendTestCase(SimpleTestCase):
    def test_heaviest_agent_wins(self):
        text = "trie\nheap quicksort heap\nSTEER a1"
        answer = ContaminatorBackend().complete(prompt(text), CompletionParams(), VOCAB)
        self.assertEqual(answer, "Recommended decision: heap.")

    def test_focused_prompt_is_answered_correctly(self):
        text = "[FOCUS a1]\nTask: a trie based lexer\nSTEER a1"
        answer = ContaminatorBackend().complete(prompt(text), CompletionParams(), VOCAB)
        self.assertEqual(answer, "Recommended decision: trie.")

    def test_tie_goes_to_smallest_id(self):
        text = "regex heap\nSTEER a2"
        answer = ContaminatorBackend().complete(prompt(text), CompletionParams(), VOCAB)
        self.assertEqual(answer, "Recommended decision: trie.")

    def test_falls_back_to_most_frequent_keyword(self):
        vocab = {"a1": AgentVocab(current=(), all=("trie", "regex"))}
        answer = ContaminatorBackend().complete(
            prompt("regex regex trie\nSTEER a1"), CompletionParams(), vocab
        )
        self.assertEqual(answer, "Recommended decision: regex.")

    def test_empty_table(self):
        with self.assertRaises(ProtocolViolation):
            ContaminatorBackend().complete(prompt("STEER a1"), CompletionParams(), {})

    def test_keyword_mass(self):
        self.assertEqual(keyword_mass("Trie, heap; HEAP!", VOCAB), {"a1": 1, "a2": 2})


class HttpSessionTestCase(SimpleTestCase):
    def test_one_session_per_thread(self):
        self.assertIs(_get_http_session(), _get_http_session())
        with ThreadPoolExecutor(max_workers=1) as pool:
            other = pool.submit(_get_http_session).result()
        self.assertIsInstance(other, requests.Session)
        self.assertIsNot(other, _get_http_session())


class HttpBackendTestCase(SimpleTestCase):
    def setUp(self):
        self.backend = HttpBackend(api_key="sk-test", endpoint="https://llm.example/v1/")
        self.params = CompletionParams(model_name="test-model", max_output_tokens=64)

    def _session(self, *, status=200, body=None, error=None):
        session = MagicMock()
        if error is not None:
            session.post.side_effect = error
        else:
            response = MagicMock(status_code=status, text="upstream says no")
            response.json.return_value = body
            session.post.return_value = response
        return session

    def test_posts_chat_completion(self):
        body = {"choices": [{"message": {"content": "Use a trie."}}]}
        session = self._session(body=body)
        with patch("core.backend._get_http_session", return_value=session):
            answer = self.backend.complete(prompt("STEER a1"), self.params, VOCAB)

        self.assertEqual(answer, "Use a trie.")
        args, kwargs = session.post.call_args
        self.assertEqual(args[0], "https://llm.example/v1/chat/completions")
        self.assertEqual(kwargs["headers"]["Authorization"], "Bearer sk-test")
        self.assertEqual(kwargs["json"]["model"], "test-model")
        self.assertEqual(kwargs["json"]["max_tokens"], 64)
        self.assertEqual(kwargs["json"]["messages"][-1], {"role": "user", "content": "STEER a1"})

    def test_non_200(self):
        with patch("core.backend._get_http_session", return_value=self._session(status=503)):
            with self.assertRaises(BackendUnavailable):
                self.backend.complete(prompt("STEER a1"), self.params, VOCAB)

    def test_transport_error(self):
        session = self._session(error=requests.ConnectionError("refused"))
        with patch("core.backend._get_http_session", return_value=session):
            with self.assertRaises(BackendUnavailable):
                self.backend.complete(prompt("STEER a1"), self.params, VOCAB)

    def test_malformed_body(self):
        with patch("core.backend._get_http_session", return_value=self._session(body={"x": 1})):
            with self.assertRaises(BackendUnavailable):
                self.backend.complete(prompt("STEER a1"), self.params, VOCAB)

    @override_settings(DACS_API_KEY="")
    def test_missing_key(self):
        with self.assertRaises(MissingApiKey):
            HttpBackend()


class MakeBackendTestCase(SimpleTestCase):
    def test_mocks(self):
        self.assertIsInstance(make_backend(BackendKind.MOCK_ORACLE), OracleBackend)
        self.assertIsInstance(make_backend(BackendKind.MOCK_CONTAMINATOR), ContaminatorBackend)

    @override_settings(DACS_API_KEY="sk-test", DACS_ENDPOINT="https://llm.example/v1")
    def test_http(self):
        backend = make_backend(BackendKind.HTTP)
        self.assertEqual(backend.max_attempts, 3)
        self.assertEqual(backend.endpoint, "https://llm.example/v1")
