import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpe_tokenizer import Tokenizer
import validity
from differential_suites import toy_spec
from oracle import random_toy_tokenizer
from pretokenizer import GPT2_PATTERN, PretokenRuleSet, boundary_signature
from validity import (
    NO_BYTE,
    ValidityCache,
    definitional_valid,
    is_pair_valid,
    is_sequence_valid,
    valid_successors,
)


class TestPairs:
    @pytest.mark.parametrize("a, b, expected", [
        (0, 1, False),   # ab merges
        (3, 2, False),   # abc merges
        (1, 2, False),   # bc merges
        (0, 4, False),   # a|bc loses to ab
        (2, 0, True),
        (4, 0, True),
        (5, 5, True),
        (3, 4, True),
    ])
    def test_known_pairs(self, abc_tokenizer, abc_cache, a, b, expected):
        assert is_pair_valid(a, b, abc_tokenizer, abc_cache) is expected
        assert definitional_valid([a, b], abc_tokenizer) is expected

    def test_successor_mask_matches_definition(self, abc_tokenizer, abc_cache):
        for a in range(6):
            mask = valid_successors(a, abc_tokenizer, abc_cache)
            expected = [definitional_valid([a, b], abc_tokenizer) for b in range(6)]
            assert mask.tolist() == expected

    def test_successor_masks_are_read_only(self, abc_tokenizer, abc_cache):
        mask = valid_successors(0, abc_tokenizer, abc_cache)
        assert valid_successors(0, abc_tokenizer, abc_cache) is mask
        with pytest.raises(ValueError):
            mask[0] = True

    def test_whitespace_pairs(self, whitespace_tokenizer):
        cache = ValidityCache(whitespace_tokenizer)
        assert not is_pair_valid(2, 1, whitespace_tokenizer, cache)
        assert not is_pair_valid(0, 0, whitespace_tokenizer, cache)
        assert is_pair_valid(0, 1, whitespace_tokenizer, cache)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=100_000))
    def test_random_toys_match_definition(self, seed):
        tokenizer = random_toy_tokenizer(toy_spec(seed))
        cache = ValidityCache(tokenizer)
        for a in tokenizer.id_to_bytes:
            for b in tokenizer.id_to_bytes:
                assert is_pair_valid(a, b, tokenizer, cache) == definitional_valid([a, b], tokenizer), (seed, a, b)


class TestGroupedSuccessors:
    @pytest.fixture
    def words(self):
        """letters and spaces under the GPT-2 split rules"""
        vocab = {b"a": 0, b"b": 1, b" ": 2, b"ab": 3, b"ba": 4, b" a": 5, b" b": 6, b" ab": 7, b" ba": 8}
        merges = [(2, 0, 5), (2, 1, 6), (0, 1, 3), (1, 0, 4), (5, 1, 7), (6, 0, 8)]
        return Tokenizer(vocab, merges, pretokenizer=PretokenRuleSet.from_patterns(GPT2_PATTERN))

    @pytest.mark.parametrize("data, expected", [
        (b" they're", " taaa're"),
        (b"word", "aaaa"),
        (b"sat", "saa"),
        (b"2024\n", "0000\n"),
        (b"\t!?", "\t.."),
        (b"\xe4\xbd\xa0", "a"),
        (b"\xbd\xa0", ".."),
    ])
    def test_boundary_signature(self, data, expected):
        assert boundary_signature(data) == expected

    def test_groups_share_one_split_per_signature(self, words):
        cache = ValidityCache(words)
        groups = cache.boundary_groups()
        assert sorted(groups) == [" ", " a", " aa", "a", "aa"]
        assert sum(len(ids) for ids in groups.values()) == 9
        assert cache.boundary_groups() is groups

    def test_no_pair_checked_one_by_one(self, words, monkeypatch):
        calls = []
        original = validity.is_pair_valid

        def counting(a, b, tokenizer, cache):
            calls.append((a, b))
            return original(a, b, tokenizer, cache)

        monkeypatch.setattr(validity, "is_pair_valid", counting)
        cache = ValidityCache(words)
        masks = {a: valid_successors(a, words, cache) for a in range(9)}
        assert calls == []
        for a, mask in masks.items():
            assert mask.tolist() == [definitional_valid([a, b], words) for b in range(9)], a

    def test_pretokenized_toy_matches_definition(self, pretokenized_toy):
        cache = ValidityCache(pretokenized_toy)
        ids = sorted(pretokenized_toy.id_to_bytes)
        for a in ids:
            mask = valid_successors(a, pretokenized_toy, cache)
            assert [bool(mask[b]) for b in ids] == [definitional_valid([a, b], pretokenized_toy) for b in ids], a

    def test_added_tokens_match_pair_check(self):
        tokenizer = Tokenizer({b"a": 0, b"b": 1, b"ab": 2}, [(0, 1, 2)], added={3: b"ba"})
        cache = ValidityCache(tokenizer)
        assert cache.contains_added.tolist() == [False, False, False, True]
        for a in range(4):
            mask = valid_successors(a, tokenizer, cache)
            assert mask.tolist() == [is_pair_valid(a, b, tokenizer, cache) for b in range(4)], a

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=0, max_value=100_000))
    def test_random_toys_match_definition(self, seed):
        tokenizer = random_toy_tokenizer(toy_spec(seed))
        cache = ValidityCache(tokenizer)
        ids = sorted(tokenizer.id_to_bytes)
        for a in ids:
            mask = valid_successors(a, tokenizer, cache)
            assert [bool(mask[b]) for b in ids] == [definitional_valid([a, b], tokenizer) for b in ids], (seed, a)


class TestSequences:
    def test_whitespace(self, whitespace_tokenizer):
        cache = ValidityCache(whitespace_tokenizer)
        assert is_sequence_valid([0, 0, 1], whitespace_tokenizer, cache)
        assert not is_sequence_valid([2, 1], whitespace_tokenizer, cache)

    def test_empty_is_valid(self, abc_tokenizer, abc_cache):
        assert is_sequence_valid([], abc_tokenizer, abc_cache)

    def test_specials_restart_text(self):
        vocab = {b"a": 0, b"b": 1, b"ab": 2}
        tokenizer = Tokenizer(vocab, [(0, 1, 2)], specials={3: "<s>"})
        cache = ValidityCache(tokenizer)
        assert is_sequence_valid([0, 3, 1], tokenizer, cache)
        assert is_sequence_valid([3, 2], tokenizer, cache)
        assert not is_sequence_valid([0, 1, 3], tokenizer, cache)

    def test_added_tokens(self):
        tokenizer = Tokenizer({b"a": 0, b"b": 1, b"ab": 2}, [(0, 1, 2)], added={3: b"ba"})
        cache = ValidityCache(tokenizer)
        assert is_sequence_valid([0, 3], tokenizer, cache)
        assert not is_sequence_valid([2, 0], tokenizer, cache)
        assert not definitional_valid([2, 0], tokenizer)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=100_000), st.lists(st.integers(min_value=0), max_size=5))
    def test_random_sequences_match_definition(self, seed, picks):
        tokenizer = random_toy_tokenizer(toy_spec(seed))
        cache = ValidityCache(tokenizer)
        ids = sorted(tokenizer.id_to_bytes)
        tokens = [ids[p % len(ids)] for p in picks]
        assert is_sequence_valid(tokens, tokenizer, cache) == definitional_valid(tokens, tokenizer)


class TestCacheMasks:
    def test_byte_at(self, abc_cache):
        assert abc_cache.byte_at(0).tolist() == [97, 98, 99, 97, 98, 97]
        assert abc_cache.byte_at(2).tolist() == [NO_BYTE] * 5 + [99]

    def test_tokens_with_prefix(self, abc_cache):
        assert np.flatnonzero(abc_cache.tokens_with_prefix(b"ab")).tolist() == [3, 5]
        assert np.flatnonzero(abc_cache.tokens_with_prefix(b"abc")).tolist() == [5]
        assert not abc_cache.tokens_with_prefix(b"ca").any()

    def test_deep_prefix(self, abc_tokenizer):
        cache = ValidityCache(abc_tokenizer, prefix_depth=1)
        assert np.flatnonzero(cache.tokens_with_prefix(b"ab")).tolist() == [3, 5]

    def test_longer_than(self, abc_cache):
        assert np.flatnonzero(abc_cache.longer_than(1)).tolist() == [3, 4, 5]

    def test_reachable_and_canonical(self):
        vocab = {b"a": 0, b"b": 1, b"c": 2, b"ab": 3, b"bc": 4, b"abc": 5}
        tokenizer = Tokenizer(vocab, [(1, 2, 4), (0, 1, 3), (3, 2, 5)])
        cache = ValidityCache(tokenizer)
        assert not cache.reachable[5]
        assert not cache.canonical[5]
        assert cache.canonical[:5].all()
        assert not cache.successors(5).any()
