import numpy as np
import pytest

from errors import ConfigError
from oracle import (
    ToyTokenizerSpec,
    brute_next_byte,
    brute_prefix_prob,
    brute_terminal_prob,
    count_coverings,
    enumerate_valid_coverings,
    heap_encode,
    random_toy_tokenizer,
)


class TestHeapEncode:
    @pytest.mark.parametrize("text", [b"", b"abc", b"abcab", b"bcbcab", b"cccaab"])
    def test_agrees_with_encoder(self, abc_tokenizer, text):
        assert heap_encode(text, abc_tokenizer) == abc_tokenizer.encode(text)

    def test_pretokenized(self, whitespace_tokenizer):
        assert heap_encode(b"  0", whitespace_tokenizer) == [0, 0, 1]


class TestEnumeration:
    def test_empty_prompt(self, pbp):
        tokenizer, _ = pbp
        assert enumerate_valid_coverings(b"", tokenizer) == {(0,), (1,), (2,)}

    def test_single_byte(self, pbp):
        tokenizer, _ = pbp
        assert enumerate_valid_coverings(b"a", tokenizer) == {(0,), (2,)}

    def test_token_budget(self, pbp):
        tokenizer, _ = pbp
        assert enumerate_valid_coverings(b"aa", tokenizer) == {(0, 0), (0, 2)}
        assert enumerate_valid_coverings(b"aa", tokenizer, max_tokens=1) == set()

    def test_counts_before_validity(self, pbp):
        tokenizer, _ = pbp
        assert count_coverings(b"", tokenizer) == 3
        assert count_coverings(b"a", tokenizer) == 2
        assert count_coverings(b"ab", tokenizer) == 2
        assert len(enumerate_valid_coverings(b"ab", tokenizer)) == 1


class TestBruteProbabilities:
    def test_prefix(self, pbp):
        tokenizer, lm = pbp
        assert brute_prefix_prob(lm, b"", tokenizer) == 1.0
        assert brute_prefix_prob(lm, b"a", tokenizer) == pytest.approx(0.9)
        assert brute_prefix_prob(lm, b"ab", tokenizer) == pytest.approx(0.6)
        assert brute_prefix_prob(lm, b"aa", tokenizer) == pytest.approx(0.15)

    def test_terminal(self, pbp):
        tokenizer, lm = pbp
        assert brute_terminal_prob(lm, b"", tokenizer) == pytest.approx(0.05)
        assert brute_terminal_prob(lm, b"a", tokenizer) == pytest.approx(0.147)

    def test_next_byte(self, pbp):
        tokenizer, lm = pbp
        masses = brute_next_byte(lm, b"a", tokenizer)
        assert masses.shape == (257,)
        assert masses.sum() == pytest.approx(0.897)
        assert np.count_nonzero(masses) == 3


class TestToyTokenizers:
    @pytest.mark.parametrize("kwargs", [{"alphabet_size": 0}, {"alphabet_size": 9}, {"merge_count": 41}])
    def test_bad_spec(self, kwargs):
        with pytest.raises(ConfigError):
            ToyTokenizerSpec(**kwargs)

    def test_deterministic(self):
        spec = ToyTokenizerSpec(seed=17, alphabet_size=4, merge_count=20)
        assert random_toy_tokenizer(spec).vocab == random_toy_tokenizer(spec).vocab

    @pytest.mark.parametrize("seed", range(5))
    def test_merges_build_on_earlier_tokens(self, seed):
        spec = ToyTokenizerSpec(seed=seed, alphabet_size=3, merge_count=25, max_token_len=4)
        tokenizer = random_toy_tokenizer(spec)
        assert len(tokenizer.raw_merges) <= 25
        for merge in tokenizer.raw_merges:
            assert merge.left < merge.result and merge.right < merge.result
        assert max(len(data) for data in tokenizer.vocab) <= 4

    def test_pretokenized_alphabet(self):
        tokenizer = random_toy_tokenizer(ToyTokenizerSpec(seed=1, alphabet_size=2, pretokenized=True))
        assert set(tokenizer.byte_alphabet) == set(b"a 0")
        assert tokenizer.pretokenizer is not None
