import os
from pathlib import Path

import numpy as np
import pytest

from bpe_tokenizer import Tokenizer, load_tokenizer
from differential_suites import (
    BASE_CASES,
    SAMPLE_TEXT,
    SUITES,
    chunkings,
    close,
    completion_case,
    frequency_check,
    late_merge_list,
    pbp_case,
    real_tokenizer_suite,
    run_suite,
    run_suites,
    sampling_case,
    toy_spec,
    whitespace_fixture,
)
from errors import UnsupportedPretokenizerError
from oracle import heap_encode, random_toy_tokenizer
from run import TOKENIZER_DIR_ENV


def test_every_suite_has_a_case_count():
    assert set(SUITES) == set(BASE_CASES)


def test_close():
    assert close(1.0, 1.0 + 1e-12)
    assert not close(1.0, 1.001)
    assert close(0.0, 1e-13)


def test_chunkings_cover_the_text():
    plans = chunkings(17, np.random.default_rng(0))
    assert plans[0] == [1] * 17 and plans[1] == [17]
    assert all(sum(plan) == 17 for plan in plans)
    assert len(plans) == 5


def test_fixtures_pass():
    assert whitespace_fixture() == []
    assert pbp_case() == []


@pytest.mark.parametrize("name, scale", [
    ("pairs", 0.02),
    ("coverings", 0.02),
    ("streaming", 0.02),
    ("heap", 0.05),
    ("prefix", 0.02),
    ("chain", 0.1),
    ("composite", 0.1),
])
def test_small_suites_pass(name, scale):
    record = run_suite(name, scale=scale, seed=0, progress=False)
    assert record["suite"] == name
    assert record["cases"] == max(1, round(BASE_CASES[name] * scale))
    assert record["success"], record["failures"]


@pytest.mark.parametrize("seed", [3, 4, 11])
def test_sampling_case_draws_through_the_sampler(seed):
    assert sampling_case(seed, draws=5000) == []


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_completion_case_matches_covering_posterior(seed):
    assert completion_case(seed, draws=2000) == []


class TestFrequencyCheck:
    def test_matching_counts(self):
        assert frequency_check(np.array([500, 300, 200, 0]), np.array([0.5, 0.3, 0.2, 0.0])) is None

    def test_impossible_event(self):
        found = frequency_check(np.array([500, 300, 199, 1]), np.array([0.5, 0.3, 0.2, 0.0]))
        assert found["event"] == 3 and found["expected"] == 0.0

    def test_skewed_counts(self):
        found = frequency_check(np.array([700, 200, 100]), np.array([0.5, 0.3, 0.2]))
        assert found["event"] == 0
        assert found["p_value"] < 1e-4

    def test_rare_bins_are_pooled(self):
        counts = np.array([9990, 3, 4, 3])
        assert frequency_check(counts, np.array([0.999, 0.0003, 0.0004, 0.0003])) is None


class TestLateMerges:
    @pytest.mark.parametrize("seed", range(8))
    def test_merge_inputs_are_formed_earlier(self, seed):
        base = random_toy_tokenizer(toy_spec(seed))
        vocab, merges = late_merge_list(base, np.random.default_rng(seed))
        formed = {i for data, i in vocab.items() if len(data) == 1}
        for left, right, result in merges:
            assert left in formed and right in formed
            formed.add(result)
        assert len(merges) >= len(base.raw_merges)

    @pytest.mark.parametrize("seed", range(8))
    def test_encode_matches_heap(self, seed):
        base = random_toy_tokenizer(toy_spec(seed))
        rng = np.random.default_rng(seed)
        vocab, merges = late_merge_list(base, rng)
        tokenizer = Tokenizer(vocab, merges, pretokenizer=base.pretokenizer, pretokenizer_spec=base.pretokenizer_spec)
        alphabet = sorted(tokenizer.byte_alphabet)
        for _ in range(20):
            text = bytes(int(b) for b in rng.choice(alphabet, size=64))
            assert tokenizer.encode(text) == heap_encode(text, tokenizer)

    def test_appended_extension_merge(self):
        tokenizer = Tokenizer({b"a": 0, b"b": 1, b"ab": 2, b"aab": 3}, [(0, 1, 2), (0, 2, 3)])
        late = Tokenizer({b"a": 0, b"b": 1, b"ab": 2, b"ba": 3, b"aab": 4}, [(0, 1, 2), (1, 0, 3), (0, 2, 4)])
        for text in (b"aab", b"aaba", b"baab", b"abaab"):
            assert tokenizer.encode(text) == heap_encode(text, tokenizer)
            assert late.encode(text) == heap_encode(text, late)


def test_mutation_is_caught():
    record = run_suite("pairs", scale=0.01, seed=0, mutation="pair_valid", progress=False)
    assert not record["success"]
    assert record["mismatches"] > 0
    assert record["failures"][0]["seed"] == 0


def test_zero_scale_runs_nothing():
    record = run_suite("coverings", scale=0, progress=False)
    assert record["cases"] == 0 and record["success"]


def test_parallel_jobs_match_serial():
    serial = run_suite("heap", scale=0.03, seed=5, jobs=1, progress=False)
    parallel = run_suite("heap", scale=0.03, seed=5, jobs=2, progress=False)
    assert serial["cases"] == parallel["cases"] == 3
    assert serial["success"] and parallel["success"]


def test_run_suites_keeps_order():
    records = run_suites(["whitespace", "pbp"], progress=False)
    assert [r["suite"] for r in records] == ["whitespace", "pbp"]


def test_real_tokenizer_suite(pretokenized_toy):
    corpus = b"ab 0  ba00 a  0 b" * 20
    records = real_tokenizer_suite(pretokenized_toy, corpus, scale=0.001, progress=False)
    assert [r["suite"] for r in records] == ["pairs-file", "streaming-file"]
    assert all(r["success"] for r in records), records


@pytest.mark.skipif(not os.environ.get(TOKENIZER_DIR_ENV), reason="no tokenizer directory configured")
def test_real_tokenizer_files():
    base = Path(os.environ[TOKENIZER_DIR_ENV])
    paths = sorted(base.glob("*/tokenizer.json")) + sorted(base.glob("*.json"))
    if not paths:
        pytest.skip(f"no tokenizer files under {base}")
    for path in paths:
        try:
            tokenizer = load_tokenizer(path)
        except UnsupportedPretokenizerError:
            continue
        records = real_tokenizer_suite(tokenizer, SAMPLE_TEXT.encode("utf-8"), scale=0.0005, progress=False)
        assert all(r["success"] for r in records), (path, records)
