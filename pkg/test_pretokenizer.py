import pytest

from errors import UnsupportedPretokenizerError
from pretokenizer import (
    AMBIGUOUS,
    GPT2_PATTERN,
    AddedTokenMatcher,
    PretokenRuleSet,
    StreamingPretokenizer,
    build_rule_set,
    incomplete_utf8_tail,
    pretokenize,
    split_alternatives,
)

BYTE_LEVEL = {"type": "ByteLevel", "add_prefix_space": False, "use_regex": True}
BARE_BYTE_LEVEL = {"type": "ByteLevel", "add_prefix_space": False, "use_regex": False}


@pytest.fixture
def gpt2_rules():
    return build_rule_set(BYTE_LEVEL)


class TestRuleSet:
    @pytest.mark.parametrize("text, pieces", [
        (b"Hello world", [b"Hello", b" world"]),
        (b"it's 42", [b"it", b"'s", b" 42"]),
        (b"a  b", [b"a", b" ", b" b"]),
        (b"x!!  ", [b"x", b"!!", b"  "]),
        ("naïve café".encode(), ["naïve".encode(), " café".encode()]),
    ])
    def test_gpt2_split(self, gpt2_rules, text, pieces):
        assert gpt2_rules.pretokenize(text) == pieces

    def test_no_rules(self):
        assert build_rule_set(None) is None
        assert build_rule_set(BARE_BYTE_LEVEL) is None
        assert pretokenize(b"a b", None) == [b"a b"]
        assert pretokenize(b"", None) == []

    def test_sequence_with_digits(self):
        rules = build_rule_set({"type": "Sequence", "pretokenizers": [
            {"type": "Digits", "individual_digits": True}, BARE_BYTE_LEVEL]})
        assert rules.pretokenize(b"a123") == [b"a", b"1", b"2", b"3"]

    def test_split_stage_then_byte_level(self):
        rules = build_rule_set({"type": "Sequence", "pretokenizers": [
            {"type": "Split", "pattern": {"Regex": GPT2_PATTERN}, "behavior": "Isolated", "invert": False},
            BARE_BYTE_LEVEL,
        ]})
        assert len(rules.stages) == 1
        assert rules.pretokenize(b"ok then") == [b"ok", b" then"]

    def test_three_digit_groups(self):
        rules = PretokenRuleSet.from_patterns(r"\p{N}{1,3}")
        assert rules.pretokenize(b"1234567") == [b"123", b"456", b"7"]

    def test_boundaries(self, gpt2_rules):
        cuts, first = gpt2_rules.boundaries("ab cd")
        assert cuts == first == frozenset({2})

    @pytest.mark.parametrize("spec", [
        {"type": "Metaspace"},
        {"type": "ByteLevel", "add_prefix_space": True},
        {"type": "Split", "pattern": {"Regex": GPT2_PATTERN}, "behavior": "Isolated"},
        {"type": "Sequence", "pretokenizers": [
            {"type": "Split", "pattern": {"Regex": r"\w+"}, "behavior": "Isolated"}, BARE_BYTE_LEVEL]},
        {"type": "Sequence", "pretokenizers": [
            {"type": "Split", "pattern": {"String": " "}, "behavior": "Isolated"}, BARE_BYTE_LEVEL]},
        {"type": "Sequence", "pretokenizers": [
            {"type": "Split", "pattern": {"Regex": GPT2_PATTERN}, "behavior": "Removed"}, BARE_BYTE_LEVEL]},
    ])
    def test_unsupported(self, spec):
        with pytest.raises(UnsupportedPretokenizerError):
            build_rule_set(spec)

    def test_split_alternatives(self):
        assert split_alternatives(r"a|(b|c)|[|]|\|") == ["a", "(b|c)", "[|]", r"\|"]


class TestUtf8Tail:
    def test_incomplete(self):
        assert incomplete_utf8_tail("你".encode()[:2]) == 2
        assert incomplete_utf8_tail(b"a\xf0\x9f") == 2

    def test_complete(self):
        assert incomplete_utf8_tail(b"a") == 0
        assert incomplete_utf8_tail("你".encode()) == 0
        assert incomplete_utf8_tail(b"") == 0


class TestStreaming:
    @pytest.mark.parametrize("text", [
        b"ab  ab 00 ab.",
        b"it's ok, isn't it",
        b"a\n\n  b\t c",
        "café 你好 12".encode(),
    ])
    def test_settled_plus_finish_is_batch(self, gpt2_rules, text):
        stream = StreamingPretokenizer(gpt2_rules)
        pieces = []
        for byte in text:
            stream.advance(byte)
            pieces.extend(data for _, _, data in stream.take_settled())
        pieces.extend(stream.finish())
        assert pieces == gpt2_rules.pretokenize(text)

    def test_whitespace_holdback_is_ambiguous(self, gpt2_rules):
        stream = StreamingPretokenizer(gpt2_rules)
        stream.advance(ord("a"))
        stream.advance(ord(" "))
        decision = stream.advance(ord(" "))
        assert decision.kind == AMBIGUOUS
        assert stream.region_start == 1
        assert stream.take_settled() == [(0, 1, b"a")]
        assert len(stream.hypotheses) == 2

    def test_without_rules_never_splits(self):
        stream = StreamingPretokenizer(None)
        for byte in b"a b c":
            stream.advance(byte)
        assert stream.take_settled() == []
        assert stream.segment_cuts() == frozenset()
        assert stream.finish() == [b"a b c"]
        assert stream.region_start == 5


class TestAddedTokenMatcher:
    def test_leftmost_longest(self):
        matcher = AddedTokenMatcher({10: b"<|x|>", 11: b"ab", 12: b"abc"})
        assert matcher.find_all(b"zabcab") == [(1, 4, 12), (4, 6, 11)]
        assert list(matcher.split(b"zabcab")) == [(b"z", None), (b"abc", 12), (b"ab", 11)]

    def test_scan_reports_partials(self):
        matcher = AddedTokenMatcher({11: b"ab"})
        state = matcher.start()
        first = matcher.scan(state, ord("a"))
        assert first.partial == ((0, 1),) and first.full == ()
        second = matcher.scan(state, ord("b"))
        assert second.full == ((0, 11),)

    def test_overlapping_suffix(self):
        matcher = AddedTokenMatcher({1: b"aab", 2: b"ab"})
        assert matcher.find_all(b"aaab") == [(1, 4, 1)]

    def test_completions(self):
        matcher = AddedTokenMatcher({11: b"ab", 12: b"abc", 13: b"b"})
        assert sorted(matcher.completions(b"a")) == [11, 12]

    def test_empty(self):
        matcher = AddedTokenMatcher({})
        assert not matcher
        assert matcher.find_all(b"abc") == []
        assert list(matcher.split(b"abc")) == [(b"abc", None)]
