from unittest.mock import MagicMock

from django.test import SimpleTestCase

from core.tokenizer import (
    RegexTokenizer,
    Tokenizer,
    count_tokens,
    get_tokenizer,
    set_tokenizer,
    truncate_to,
)


class CountTokensTestCase(SimpleTestCase):
    """Tests for the default whitespace/punctuation rule."""

    def test_empty_is_zero(self):
        self.assertEqual(count_tokens(""), 0)
        self.assertEqual(count_tokens("   \n\t"), 0)

    def test_words_and_punctuation(self):
        # Hello , world !
        self.assertEqual(count_tokens("Hello, world!"), 4)

    def test_underscore_is_its_own_token(self):
        # snake _ case
        self.assertEqual(count_tokens("snake_case"), 3)

    def test_digits_join_letters(self):
        self.assertEqual(count_tokens("a1 b22 c333"), 3)

    def test_newlines_carry_no_tokens(self):
        self.assertEqual(count_tokens("one two\nthree"), count_tokens("one two three"))

    def test_symbols_each_count(self):
        # C + + and U + FFFD
        self.assertEqual(count_tokens("C++"), 3)
        self.assertEqual(count_tokens("U+FFFD"), 3)


class TruncateToTestCase(SimpleTestCase):
    """Tests for prefix truncation."""

    def test_under_budget_unchanged(self):
        self.assertEqual(truncate_to("a b c", 5), "a b c")

    def test_cut_at_token_end(self):
        self.assertEqual(truncate_to("alpha beta, gamma", 2), "alpha beta")

    def test_zero_budget_is_empty(self):
        self.assertEqual(truncate_to("alpha beta", 0), "")

    def test_negative_budget_raises(self):
        with self.assertRaises(ValueError):
            truncate_to("alpha", -1)

    def test_result_fits_budget(self):
        text = "The quick brown_fox jumps; over the lazy dog's back."
        for budget in range(0, count_tokens(text) + 2):
            cut = truncate_to(text, budget)
            self.assertLessEqual(count_tokens(cut), budget)
            self.assertTrue(text.startswith(cut))


class SetTokenizerTestCase(SimpleTestCase):
    """The module-level helpers follow the installed tokenizer."""

    def test_swap_and_restore(self):
        fake = MagicMock(spec=["name", "count_tokens", "truncate_to"])
        fake.name = "fake"
        fake.count_tokens.return_value = 42
        previous = set_tokenizer(fake)
        try:
            self.assertIs(get_tokenizer(), fake)
            self.assertEqual(count_tokens("anything"), 42)
        finally:
            set_tokenizer(previous)
        self.assertIsInstance(get_tokenizer(), RegexTokenizer)

    def test_regex_tokenizer_satisfies_protocol(self):
        self.assertIsInstance(RegexTokenizer(), Tokenizer)
