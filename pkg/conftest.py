import json

import numpy as np
import pytest

from bpe_tokenizer import Tokenizer
from differential_suites import pbp_instance
from language_models import random_tabular_lm
from oracle import ToyTokenizerSpec, random_toy_tokenizer, whitespace_toy_tokenizer
from validity import ValidityCache


@pytest.fixture
def abc_tokenizer():
    """a b c, ab, bc, abc with merges ab < bc < abc"""
    vocab = {b"a": 0, b"b": 1, b"c": 2, b"ab": 3, b"bc": 4, b"abc": 5}
    return Tokenizer(vocab, [(0, 1, 3), (1, 2, 4), (3, 2, 5)])


@pytest.fixture
def abc_cache(abc_tokenizer):
    return ValidityCache(abc_tokenizer)


@pytest.fixture
def pbp():
    """(tokenizer, model) pair where naive prompt conditioning goes badly wrong"""
    return pbp_instance()


@pytest.fixture
def whitespace_tokenizer():
    return whitespace_toy_tokenizer()


@pytest.fixture
def toy_tokenizer():
    return random_toy_tokenizer(ToyTokenizerSpec(seed=3, alphabet_size=3, merge_count=10))


@pytest.fixture
def pretokenized_toy():
    return random_toy_tokenizer(ToyTokenizerSpec(seed=5, alphabet_size=4, merge_count=12, pretokenized=True))


@pytest.fixture
def toy_lm(toy_tokenizer):
    return random_tabular_lm(toy_tokenizer, 4, seed=11)


@pytest.fixture
def tokenizer_file(tmp_path, abc_tokenizer):
    path = tmp_path / "tokenizer.json"
    path.write_text(json.dumps(abc_tokenizer.to_definition()), encoding="utf-8")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
