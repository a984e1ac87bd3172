"""
Scoring of steering interactions and judge-agreement arithmetic.

  M1 accuracy       response hits >= 1 expected keyword of the target
  M2 contamination  response hits a keyword owned by any other agent
  M3 context size   tokens in the orchestrator prompt at call time

Keyword matching is case-insensitive and whole-word/whole-phrase: "set"
does not match "settle", "C++" matches "use c++ here".
"""

from __future__ import annotations

import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from core.exceptions import EmptyTrial, KappaUndefined, VerdictMissing
from core.tokenizer import TokenCount


@lru_cache(maxsize=4096)
def keyword_pattern(keyword: str) -> re.Pattern[str]:
    return re.compile(rf"(?<!\w){re.escape(keyword.casefold())}(?!\w)")


def keyword_hits(text: str, keyword: str) -> int:
    return len(keyword_pattern(keyword).findall(text.casefold()))


def contains_keyword(text: str, keywords: Iterable[str]) -> bool:
    folded = text.casefold()
    return any(keyword_pattern(kw).search(folded) for kw in keywords)


# ---------------------------------------------------------------------------
# Per-interaction scores
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InteractionScore:
    agent_id: str
    accurate: bool
    contaminated: bool
    context_tokens: TokenCount
    step: int

    def __post_init__(self):
        if self.context_tokens <= 0:
            raise ValueError("a scored interaction must have a non-empty context")


class TrialSummary(NamedTuple):
    accuracy: float
    contamination: float
    avg_context_tokens: float


def score_accuracy(response: str, expected: Sequence[str]) -> bool:
    if not expected:
        raise ValueError("expected keywords must be non-empty")
    return contains_keyword(response, expected)


def score_contamination(response: str, others_keywords: Mapping[str, Sequence[str]]) -> bool:
    return any(contains_keyword(response, kws) for kws in others_keywords.values())


def trial_summary(scores: Sequence[InteractionScore]) -> TrialSummary:
    if not scores:
        raise EmptyTrial("no scored interactions in trial")
    return TrialSummary(
        accuracy=float(np.mean([s.accurate for s in scores])),
        contamination=float(np.mean([s.contaminated for s in scores])),
        avg_context_tokens=float(np.mean([s.context_tokens for s in scores])),
    )


# ---------------------------------------------------------------------------
# Judge verdicts and agreement
# ---------------------------------------------------------------------------


class Verdict(Enum):
    CORRECT = "CORRECT"
    INCORRECT = "INCORRECT"


_VERDICT_RE = re.compile(r"<verdict>\s*(CORRECT|INCORRECT)\s*</verdict>", re.IGNORECASE)


def parse_verdict(judge_output: str) -> Verdict:
    match = _VERDICT_RE.search(judge_output or "")
    if match is None:
        raise VerdictMissing("no <verdict>CORRECT|INCORRECT</verdict> tag found")
    return Verdict(match.group(1).upper())


def build_judge_prompt(question: str, response: str, judge_context: str) -> str:
    return (
        "You are grading one orchestrator steering answer.\n"
        f"Agent question: {question}\n"
        f"Orchestrator response: {response}\n"
        f"Correct decision rationale: {judge_context}\n"
        "Reply with your reasoning, then exactly one tag: "
        "<verdict>CORRECT</verdict> or <verdict>INCORRECT</verdict>."
    )


@dataclass(frozen=True)
class AgreementTable:
    both_correct: int
    judge_only: int
    keyword_only: int
    both_incorrect: int

    def __post_init__(self):
        counts = (self.both_correct, self.judge_only, self.keyword_only, self.both_incorrect)
        if any(c < 0 for c in counts):
            raise ValueError("agreement counts must be non-negative")

    @property
    def total(self) -> int:
        return self.both_correct + self.judge_only + self.keyword_only + self.both_incorrect


def agreement_table(pairs: Iterable[tuple[bool, bool]]) -> AgreementTable:
    """Build the 2x2 table from ``(keyword_correct, judge_correct)`` pairs."""
    cells = {(True, True): 0, (False, True): 0, (True, False): 0, (False, False): 0}
    for keyword_ok, judge_ok in pairs:
        cells[(bool(keyword_ok), bool(judge_ok))] += 1
    return AgreementTable(
        both_correct=cells[(True, True)],
        judge_only=cells[(False, True)],
        keyword_only=cells[(True, False)],
        both_incorrect=cells[(False, False)],
    )


def cohen_kappa(table: AgreementTable) -> float:
    """kappa = (p_o - p_e) / (1 - p_e), computed exactly with fractions."""
    n = table.total
    if n < 1:
        raise KappaUndefined("agreement table is empty")
    p_o = Fraction(table.both_correct + table.both_incorrect, n)
    judge_yes = Fraction(table.both_correct + table.judge_only, n)
    keyword_yes = Fraction(table.both_correct + table.keyword_only, n)
    p_e = judge_yes * keyword_yes + (1 - judge_yes) * (1 - keyword_yes)
    if p_e == 1:
        raise KappaUndefined("expected agreement is 1 (single-class marginals)")
    return float((p_o - p_e) / (1 - p_e))
