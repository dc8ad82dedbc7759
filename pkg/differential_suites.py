"""
Randomized differential suites: fast paths against the brute-force oracles

Each suite runs independent seeded cases and returns a summary record. A
failing case carries its seed so it can be reproduced alone with
``run.py verify --suite NAME --seed SEED --scale 0.001``.
"""

import logging
import math
import time
from functools import partial
from multiprocessing import Pool
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import chisquare
from tqdm import tqdm

from bpe_tokenizer import Tokenizer
from byte_sampler import EOS_EVENT, ByteSampler, CompositeSpec, SamplerConfig, composite_next_byte
from covering_tree import ValidCoveringTree
from language_models import BOS, TabularLM, random_tabular_lm
from oracle import (
    ToyTokenizerSpec,
    brute_next_byte,
    brute_prefix_prob,
    enumerate_valid_coverings,
    heap_encode,
    random_toy_tokenizer,
    whitespace_toy_tokenizer,
)
from validity import ValidityCache, definitional_valid, is_pair_valid

logger = logging.getLogger(__name__)

REL_TOL = 1e-9
ABS_TOL = 1e-12

# heap suite: about 10 KB of text per case
HEAP_TEXTS = 40
HEAP_TEXT_BYTES = 256
CHAIN_PAIRS = 100
SAMPLING_DRAWS = 100_000
COMPLETION_DRAWS = 20_000
# goodness-of-fit p-value below which a frequency check fails
FREQ_P_MIN = 1e-4

SAMPLE_TEXT = (
    "def encode(text):\n    return [ord(c) for c in text]  # 42 items\n"
    "The quick brown fox doesn't jump; it's 1234567 meters away.\n"
    "Ünïcödé façade — naïve café. Привет, мир! 你好，世界。こんにちは 🌍🚀\n"
    "\t\tif x  ==  y:\n\r\n    pass\n"
)


def toy_spec(seed: int) -> ToyTokenizerSpec:
    rng = np.random.default_rng(seed)
    return ToyTokenizerSpec(
        seed=seed,
        alphabet_size=int(rng.integers(2, 5)),
        merge_count=int(rng.integers(3, 16)),
        pretokenized=bool(rng.integers(0, 2)),
    )


def random_prompt(tokenizer: Tokenizer, rng: np.random.Generator, max_len: int) -> bytes:
    alphabet = sorted(tokenizer.byte_alphabet)
    return bytes(int(b) for b in rng.choice(alphabet, size=int(rng.integers(0, max_len + 1))))


def close(fast: float, slow: float, rel: float = REL_TOL) -> bool:
    return abs(fast - slow) <= rel * max(abs(fast), abs(slow)) + ABS_TOL


def stream_tokens(tokenizer: Tokenizer, data: bytes, chunks: List[int],
                  cache: Optional[ValidityCache] = None) -> List[int]:
    """Feed ``data`` in chunks of the given sizes, then finish"""
    tree = ValidCoveringTree(tokenizer, cache)
    out, offset = [], 0
    for size in chunks:
        out.extend(tree.feed(data[offset:offset + size]))
        offset += size
    out.extend(tree.feed(data[offset:]))
    out.extend(tree.finish())
    return out


def chunkings(length: int, rng: np.random.Generator) -> List[List[int]]:
    """Byte at a time, whole, and three random cuttings"""
    plans = [[1] * length, [length]]
    for _ in range(3):
        sizes, left = [], length
        while left > 0:
            size = int(rng.integers(1, 8))
            sizes.append(min(size, left))
            left -= size
        plans.append(sizes)
    return plans


# cases: each returns a list of failure records

def pair_case(seed: int, mutation: Optional[str] = None) -> List[dict]:
    tokenizer = random_toy_tokenizer(toy_spec(seed))
    cache = ValidityCache(tokenizer)
    failures = []
    ids = sorted(tokenizer.id_to_bytes)
    for a in ids:
        for b in ids:
            fast = is_pair_valid(a, b, tokenizer, cache)
            if mutation == "pair_valid" and a == b:
                fast = not fast
            slow = heap_encode(tokenizer.decode([a, b]), tokenizer) == [a, b]
            if fast != slow:
                failures.append({"seed": seed, "pair": [a, b], "fast": fast, "oracle": slow})
    return failures


def covering_case(seed: int, mutation: Optional[str] = None) -> List[dict]:
    tokenizer = random_toy_tokenizer(toy_spec(seed))
    rng = np.random.default_rng(seed + 1)
    prompt = random_prompt(tokenizer, rng, 12)
    tree = ValidCoveringTree(tokenizer)
    tree.feed(prompt)
    fast = tree.coverings()
    slow = enumerate_valid_coverings(prompt, tokenizer)
    if fast != slow:
        return [{"seed": seed, "prompt": prompt.decode("latin-1"),
                 "missing": sorted(slow - fast)[:5], "extra": sorted(fast - slow)[:5]}]
    return []


def streaming_case(seed: int, mutation: Optional[str] = None) -> List[dict]:
    tokenizer = random_toy_tokenizer(toy_spec(seed))
    rng = np.random.default_rng(seed + 2)
    text = random_prompt(tokenizer, rng, 40)
    expected = tokenizer.encode(text)
    cache = ValidityCache(tokenizer)
    for plan in chunkings(len(text), rng):
        got = stream_tokens(tokenizer, text, plan, cache)
        if got != expected:
            return [{"seed": seed, "text": text.decode("latin-1"), "chunks": plan, "stream": got, "batch": expected}]
    return []


def late_merge_list(tokenizer: Tokenizer, rng: np.random.Generator
                    ) -> Tuple[Dict[bytes, int], List[Tuple[int, int, int]]]:
    """Vocab and raw merges with extension merges moved or appended to the end of the list.

    Moved merges build tokens no other merge consumes; appended ones join two
    existing tokens into a new one. Either way every merge's inputs are still
    formed earlier in the list, as in tokenizers extended after training.
    """
    vocab = dict(tokenizer.vocab)
    merges = [(m.left, m.right, m.result) for m in tokenizer.raw_merges]
    consumed = {t for left, right, _ in merges for t in (left, right)}
    leaves = [i for i, (_, _, result) in enumerate(merges) if result not in consumed]
    moved: List[int] = []
    if leaves:
        moved = rng.choice(leaves, size=min(len(leaves), int(rng.integers(1, 4))), replace=False).tolist()
    merges = [m for i, m in enumerate(merges) if i not in moved] + [merges[i] for i in rng.permutation(moved)]
    ids = sorted(tokenizer.id_to_bytes)
    next_id = tokenizer.vocab_size
    for _ in range(int(rng.integers(0, 4))):
        left, right = (int(x) for x in rng.choice(ids, size=2))
        data = tokenizer.id_to_bytes[left] + tokenizer.id_to_bytes[right]
        if data in vocab or len(data) > 8:
            continue
        vocab[data] = next_id
        merges.append((left, right, next_id))
        next_id += 1
    return vocab, merges


def heap_case(seed: int, mutation: Optional[str] = None) -> List[dict]:
    """Late extension merges: the normalized encoder must agree with the raw heap encoder"""
    base = random_toy_tokenizer(toy_spec(seed))
    rng = np.random.default_rng(seed + 3)
    vocab, merges = late_merge_list(base, rng)
    tokenizer = Tokenizer(vocab, merges, pretokenizer=base.pretokenizer, pretokenizer_spec=base.pretokenizer_spec)
    alphabet = sorted(tokenizer.byte_alphabet)
    failures = []
    for _ in range(HEAP_TEXTS):
        text = bytes(int(b) for b in rng.choice(alphabet, size=HEAP_TEXT_BYTES))
        if tokenizer.encode(text) != heap_encode(text, tokenizer):
            failures.append({"seed": seed, "text": text.decode("latin-1")})
    return failures


def _lm_instance(seed: int):
    tokenizer = random_toy_tokenizer(toy_spec(seed))
    rng = np.random.default_rng(seed + 4)
    lm = random_tabular_lm(tokenizer, int(rng.integers(2, 7)), seed)
    return tokenizer, lm, rng


def prefix_case(seed: int, mutation: Optional[str] = None) -> List[dict]:
    tokenizer, lm, rng = _lm_instance(seed)
    sampler = ByteSampler(lm, tokenizer)
    prompt = random_prompt(tokenizer, rng, 6)
    fast = sampler.prefix_logprob(prompt)
    slow = brute_prefix_prob(lm, prompt, tokenizer)
    failures = []
    if not close(math.exp(fast), slow):
        failures.append({"seed": seed, "prompt": prompt.decode("latin-1"), "fast": math.exp(fast), "oracle": slow})
    if slow > 0:
        masses = np.exp(sampler.byte_masses(sampler.tree_for(prompt)).logprobs)
        expected = brute_next_byte(lm, prompt, tokenizer)
        if not all(close(x, y) for x, y in zip(masses, expected)):
            worst = int(np.argmax(np.abs(masses - expected)))
            failures.append({"seed": seed, "prompt": prompt.decode("latin-1"), "event": worst,
                             "fast": float(masses[worst]), "oracle": float(expected[worst])})
    return failures


def chain_case(seed: int, mutation: Optional[str] = None) -> List[dict]:
    tokenizer, lm, rng = _lm_instance(seed)
    sampler = ByteSampler(lm, tokenizer)
    failures = []
    for i in range(CHAIN_PAIRS):
        prompt = random_prompt(tokenizer, rng, 4)
        if sampler.prefix_logprob(prompt) == -math.inf:
            continue
        tree = sampler.tree_for(prompt)
        continuation, stepwise = bytearray(), 0.0
        for event, logprob in sampler.generate(tree, 4, SamplerConfig(seed=seed * 10 + i)):
            if event >= 256:
                break
            continuation.append(event)
            stepwise += logprob
        direct = sampler.prefix_logprob(prompt + bytes(continuation)) - sampler.prefix_logprob(prompt)
        if not close(stepwise, direct, 1e-9):
            failures.append({"seed": seed, "prompt": prompt.decode("latin-1"),
                             "continuation": continuation.decode("latin-1"), "stepwise": stepwise, "direct": direct})
    return failures


def composite_case(seed: int, mutation: Optional[str] = None) -> List[dict]:
    size = 2 + seed % 2
    first = random_toy_tokenizer(ToyTokenizerSpec(seed=seed, alphabet_size=size, merge_count=8))
    second = random_toy_tokenizer(ToyTokenizerSpec(seed=seed + 7919, alphabet_size=size, merge_count=8))
    lms = [random_tabular_lm(first, 4, seed), random_tabular_lm(second, 4, seed + 1)]
    samplers = [ByteSampler(lm, tok) for lm, tok in zip(lms, (first, second))]
    prompt = random_prompt(first, np.random.default_rng(seed + 5), 4)
    failures = []

    expected = 0.0
    for lm, tok in zip(lms, (first, second)):
        masses = brute_next_byte(lm, prompt, tok)
        expected = expected + 0.5 * masses / masses.sum()
    spec = CompositeSpec("ensemble", samplers)
    got = np.exp(composite_next_byte(spec, [s.tree_for(prompt) for s in samplers]).logprobs)
    if not all(close(x, y) for x, y in zip(got, expected)):
        failures.append({"seed": seed, "mode": "ensemble", "prompt": prompt.decode("latin-1")})

    proxy = CompositeSpec("proxy", [samplers[0], samplers[1], samplers[1]])
    trees = [proxy.members[i].tree_for(prompt) for i in range(3)]
    base = samplers[0].next_byte_distribution(samplers[0].tree_for(prompt)).logprobs
    combined = composite_next_byte(proxy, trees).logprobs
    if not all(close(x, y, 1e-12) for x, y in zip(np.exp(combined), np.exp(base))):
        failures.append({"seed": seed, "mode": "proxy", "prompt": prompt.decode("latin-1")})
    return failures


def frequency_check(counts: np.ndarray, probs: np.ndarray) -> Optional[dict]:
    """Goodness of fit of observed counts to exact probabilities; None when they agree.

    Events with zero probability must never be drawn. Bins expecting fewer
    than 5 draws are pooled before the chi-square test.
    """
    counts = np.asarray(counts, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    probs = probs / probs.sum()
    draws = counts.sum()
    impossible = np.flatnonzero((probs == 0) & (counts > 0))
    if len(impossible):
        return {"event": int(impossible[0]), "expected": 0.0, "observed": int(counts[impossible[0]])}
    expected = probs * draws
    sparse = expected < 5
    observed_bins = list(counts[~sparse])
    expected_bins = list(expected[~sparse])
    if expected[sparse].sum() > 0:
        observed_bins.append(counts[sparse].sum())
        expected_bins.append(expected[sparse].sum())
    if len(expected_bins) < 2:
        return None
    p_value = float(chisquare(observed_bins, expected_bins).pvalue)
    if p_value >= FREQ_P_MIN:
        return None
    z = np.abs(counts - expected) / np.sqrt(np.maximum(expected * (1 - probs), 1e-12))
    worst = int(np.argmax(np.where(probs > 0, z, 0.0)))
    return {"event": worst, "expected": float(expected[worst]), "observed": int(counts[worst]), "p_value": p_value}


def sampling_case(seed: int, mutation: Optional[str] = None, draws: int = SAMPLING_DRAWS) -> List[dict]:
    """Next-byte frequencies drawn through ``sample_bytes`` against the exact distribution"""
    tokenizer, lm, rng = _lm_instance(seed)
    sampler = ByteSampler(lm, tokenizer)
    prompt = random_prompt(tokenizer, rng, 3)
    if sampler.prefix_logprob(prompt) == -math.inf:
        return []
    dist = sampler.next_byte_distribution(sampler.tree_for(prompt))
    counts = np.zeros(len(dist.logprobs), dtype=np.int64)
    for _ in range(draws):
        out = sampler.sample_bytes(prompt, 1, rng=rng)
        counts[out[0] if out else EOS_EVENT] += 1
    found = frequency_check(counts, dist.probs)
    if found is None:
        return []
    return [{"seed": seed, "prompt": prompt.decode("latin-1"), **found}]


def completion_case(seed: int, mutation: Optional[str] = None, draws: int = COMPLETION_DRAWS) -> List[dict]:
    """Coverings chosen by ``sample_completion`` against their exact posterior"""
    tokenizer, lm, rng = _lm_instance(seed)
    sampler = ByteSampler(lm, tokenizer)
    alphabet = sorted(tokenizer.byte_alphabet)
    prompt = bytes(int(b) for b in rng.choice(alphabet, size=int(rng.integers(1, 5))))
    coverings = sorted(enumerate_valid_coverings(prompt, tokenizer))
    weights = np.array([math.exp(lm.seq_logprob((BOS,) + c)) for c in coverings])
    if not coverings or weights.sum() == 0:
        return []
    index = {c: i for i, c in enumerate(coverings)}
    counts = np.zeros(len(coverings), dtype=np.int64)
    for _ in range(draws):
        chosen = tuple(sampler.sample_completion(prompt, rng=rng, max_tokens=0))
        if chosen not in index:
            return [{"seed": seed, "prompt": prompt.decode("latin-1"), "covering": list(chosen)}]
        counts[index[chosen]] += 1
    found = frequency_check(counts, weights)
    if found is None:
        return []
    found["event"] = list(coverings[found["event"]])
    return [{"seed": seed, "prompt": prompt.decode("latin-1"), **found}]


def whitespace_fixture(seed: int = 0, mutation: Optional[str] = None) -> List[dict]:
    """Two spaces before a digit: the merged pair is invalid, the split spaces are valid"""
    tokenizer = whitespace_toy_tokenizer()
    failures = []
    if definitional_valid([2, 1], tokenizer) or not definitional_valid([0, 0, 1], tokenizer):
        failures.append({"seed": seed, "fixture": "definitional"})
    tree = ValidCoveringTree(tokenizer)
    tree.feed(b"  0")
    if tree.coverings() != enumerate_valid_coverings(b"  0", tokenizer):
        failures.append({"seed": seed, "fixture": "coverings", "got": sorted(tree.coverings())})
    return failures


PBP_MIN_GAP = 10.0


def pbp_instance():
    """Tokens a, b, ab; the model strongly prefers ab as a first token and rarely continues a with b"""
    tokenizer = Tokenizer({b"a": 0, b"b": 1, b"ab": 2}, [(0, 1, 2)])
    table = {
        (BOS,): np.log([0.3, 0.05, 0.6, 0.05]),
        (BOS, 0): np.log([0.49, 0.01, 0.01, 0.49]),
    }
    return tokenizer, TabularLM(3, 2, table, tokenizer=tokenizer)


def pbp_case(seed: int = 0, mutation: Optional[str] = None) -> List[dict]:
    """Naive conditioning on encode(prompt) must miss the byte conditional by at least 10x"""
    tokenizer, lm = pbp_instance()
    sampler = ByteSampler(lm, tokenizer)
    masses = brute_next_byte(lm, b"a", tokenizer)
    exact = masses[ord("b")] / masses.sum()
    conditioned = float(np.exp(sampler.next_byte_distribution(sampler.tree_for(b"a")).logprobs[ord("b")]))
    naive = float(np.exp(sampler.naive_next_byte_distribution(b"a").logprobs[ord("b")]))
    failures = []
    if not close(conditioned, exact):
        failures.append({"seed": seed, "conditioned": conditioned, "oracle": exact})
    if not exact >= PBP_MIN_GAP * naive:
        failures.append({"seed": seed, "naive": naive, "oracle": exact})
    return failures


SUITES: Dict[str, Callable[..., List[dict]]] = {
    "pairs": pair_case,
    "coverings": covering_case,
    "streaming": streaming_case,
    "heap": heap_case,
    "prefix": prefix_case,
    "chain": chain_case,
    "composite": composite_case,
    "sampling": sampling_case,
    "completion": completion_case,
    "whitespace": whitespace_fixture,
    "pbp": pbp_case,
}

# cases per suite at scale 1
BASE_CASES = {
    "pairs": 200,
    "coverings": 500,
    "streaming": 200,
    "heap": 100,
    "prefix": 300,
    "chain": 20,
    "composite": 30,
    "sampling": 5,
    "completion": 10,
    "whitespace": 1,
    "pbp": 1,
}


def run_suite(name: str, scale: float = 1.0, seed: int = 0, jobs: int = 1,
              mutation: Optional[str] = None, progress: bool = True) -> dict:
    count = int(round(BASE_CASES[name] * scale))
    if scale > 0:
        count = max(count, 1)
    case = partial(SUITES[name], mutation=mutation)
    seeds = range(seed, seed + count)
    started = time.perf_counter()
    failures: List[dict] = []
    if jobs > 1 and count > 1:
        with Pool(jobs) as pool:
            results = pool.imap(case, seeds)
            for found in tqdm(results, total=count, desc=name, disable=not progress):
                failures.extend(found)
    else:
        for s in tqdm(seeds, desc=name, disable=not progress):
            failures.extend(case(s))
    record = {
        "suite": name,
        "success": not failures,
        "cases": count,
        "mismatches": len(failures),
        "seed": seed,
        "seconds": round(time.perf_counter() - started, 3),
        "failures": failures[:5],
    }
    if failures:
        logger.warning("suite %s: %d mismatches, first at seed %s", name, len(failures), failures[0].get("seed"))
    return record


def real_tokenizer_suite(tokenizer: Tokenizer, corpus: Optional[bytes] = None, scale: float = 1.0,
                         seed: int = 0, progress: bool = True) -> List[dict]:
    """Sampled pair checks and streaming-equals-batch on a loaded tokenizer file"""
    rng = np.random.default_rng(seed)
    cache = ValidityCache(tokenizer)
    started = time.perf_counter()
    ids = np.array(sorted(tokenizer.id_to_bytes))
    pair_failures = []
    for _ in tqdm(range(int(1e5 * scale)), desc="pairs (file)", disable=not progress):
        a, b = (int(x) for x in rng.choice(ids, size=2))
        fast = is_pair_valid(a, b, tokenizer, cache)
        if fast != definitional_valid([a, b], tokenizer):
            pair_failures.append({"seed": seed, "pair": [a, b], "fast": fast})
    records = [{
        "suite": "pairs-file", "success": not pair_failures, "cases": int(1e5 * scale),
        "mismatches": len(pair_failures), "seed": seed,
        "seconds": round(time.perf_counter() - started, 3), "failures": pair_failures[:5],
    }]

    started = time.perf_counter()
    if corpus is None:
        text = SAMPLE_TEXT.encode("utf-8")
        corpus = text * max(1, int(1e6 * scale) // len(text))
    corpus = corpus[:max(0, int(1e6 * scale))]
    expected = tokenizer.encode(corpus)
    stream_failures = []
    for plan in tqdm(chunkings(len(corpus), rng), desc="streaming (file)", disable=not progress):
        got = stream_tokens(tokenizer, corpus, plan, cache)
        if got != expected:
            first = next((i for i, (x, y) in enumerate(zip(got, expected)) if x != y), min(len(got), len(expected)))
            stream_failures.append({"seed": seed, "chunks": len(plan), "first_difference": first})
    records.append({
        "suite": "streaming-file", "success": not stream_failures, "cases": 5, "bytes": len(corpus),
        "mismatches": len(stream_failures), "seed": seed,
        "seconds": round(time.perf_counter() - started, 3), "failures": stream_failures[:5],
    })
    return records


def run_suites(names: Optional[List[str]] = None, scale: float = 1.0, seed: int = 0, jobs: int = 1,
               mutation: Optional[str] = None, tokenizer: Optional[Tokenizer] = None,
               corpus: Optional[bytes] = None, progress: bool = True) -> List[dict]:
    names = names or list(SUITES)
    records = [run_suite(name, scale, seed, jobs, mutation, progress) for name in names]
    if tokenizer is not None and scale > 0:
        records.extend(real_tokenizer_suite(tokenizer, corpus, scale, seed, progress))
    return records
