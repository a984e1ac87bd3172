"""
Token counting and prefix truncation: the unit of every budget.

Default rule: split on whitespace; each maximal alphanumeric run is one
token and each other visible character is a token of its own.
A provider tokenizer can be swapped in with ``set_tokenizer``.
"""

from __future__ import annotations

import re
from typing import Protocol, runtime_checkable

TokenCount = int

_TOKEN_RE = re.compile(r"[^\W_]+|[^\w\s]|_")


@runtime_checkable
class Tokenizer(Protocol):
    name: str

    def count_tokens(self, text: str) -> TokenCount: ...

    def truncate_to(self, text: str, budget: TokenCount) -> str: ...


class RegexTokenizer:
    """Deterministic whitespace/punctuation tokenizer (the default)."""

    name = "regex-default"

    def count_tokens(self, text: str) -> TokenCount:
        if not text:
            return 0
        return sum(1 for _ in _TOKEN_RE.finditer(text))

    def truncate_to(self, text: str, budget: TokenCount) -> str:
        """Longest prefix with at most ``budget`` tokens, cut at a token end."""
        if budget < 0:
            raise ValueError("budget must be >= 0")
        end = 0
        for n, match in enumerate(_TOKEN_RE.finditer(text), start=1):
            if n > budget:
                return text[:end]
            end = match.end()
        return text


class TiktokenTokenizer:
    """Provider BPE counts for live runs (``pip install .[live]``)."""

    def __init__(self, encoding: str = "cl100k_base"):
        import tiktoken

        self._enc = tiktoken.get_encoding(encoding)
        self.name = f"tiktoken:{encoding}"

    def count_tokens(self, text: str) -> TokenCount:
        return len(self._enc.encode(text)) if text else 0

    def truncate_to(self, text: str, budget: TokenCount) -> str:
        if budget < 0:
            raise ValueError("budget must be >= 0")
        ids = self._enc.encode(text)
        if len(ids) <= budget:
            return text
        # BPE decode of a prefix can re-merge; back off until it fits.
        keep = budget
        while keep > 0:
            candidate = self._enc.decode(ids[:keep])
            if text.startswith(candidate) and self.count_tokens(candidate) <= budget:
                return candidate
            keep -= 1
        return ""


_tokenizer: Tokenizer = RegexTokenizer()


def get_tokenizer() -> Tokenizer:
    return _tokenizer


def set_tokenizer(tokenizer: Tokenizer) -> Tokenizer:
    """Install ``tokenizer`` process-wide; returns the previous one."""
    global _tokenizer
    previous, _tokenizer = _tokenizer, tokenizer
    return previous


def count_tokens(text: str) -> TokenCount:
    return _tokenizer.count_tokens(text)


def truncate_to(text: str, budget: TokenCount) -> str:
    return _tokenizer.truncate_to(text, budget)
