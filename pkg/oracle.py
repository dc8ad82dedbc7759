"""
Brute-force references for the fast paths

Nothing here uses validity caches, covering trees or the normalized merge list:
every answer comes from plain enumeration and the definitional
encode(decode(T)) == T test.
"""

import heapq
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from bpe_tokenizer import Tokenizer
from errors import ConfigError
from language_models import BOS, LanguageModel
from pretokenizer import build_rule_set

logger = logging.getLogger(__name__)

TOY_ALPHABET = b"ab 0.'cx"
TOY_PRETOKENIZER = {"type": "ByteLevel", "add_prefix_space": False, "use_regex": True}


def heap_encode(text: bytes, tokenizer: Tokenizer) -> List[int]:
    """Encode with the raw merge list exactly as given, merge by merge.

    Each step applies the lowest-ranked merge present anywhere in the pretoken,
    leftmost occurrence first; a merge whose inputs do not exist yet simply
    waits until they do.
    """
    ranks: Dict[Tuple[int, int], Tuple[int, int]] = {}
    for merge in tokenizer.raw_merges:
        ranks.setdefault((merge.left, merge.right), (merge.rank, merge.result))
    out: List[int] = []
    for piece, added in tokenizer.added_matcher.split(bytes(text)):
        if added is not None:
            out.append(added)
            continue
        for pretoken in tokenizer.pretokenize(piece):
            if tokenizer.ignore_merges and pretoken in tokenizer.vocab:
                out.append(tokenizer.vocab[pretoken])
            else:
                out.extend(_heap_merge([tokenizer.byte_token(b) for b in pretoken], ranks))
    return out


def _heap_merge(ids: List[int], ranks: Dict[Tuple[int, int], Tuple[int, int]]) -> List[int]:
    tokens: List[Optional[int]] = list(ids)
    nxt = list(range(1, len(ids))) + [-1]
    prev = [-1] + list(range(len(ids) - 1))
    heap = []

    def push(i):
        j = nxt[i]
        if i >= 0 and j >= 0 and (tokens[i], tokens[j]) in ranks:
            heapq.heappush(heap, (ranks[tokens[i], tokens[j]][0], i, tokens[i], tokens[j]))

    for i in range(len(ids) - 1):
        push(i)
    while heap:
        _, i, left, right = heapq.heappop(heap)
        j = nxt[i]
        if tokens[i] != left or j < 0 or tokens[j] != right:
            continue
        tokens[i] = ranks[left, right][1]
        tokens[j] = None
        nxt[i] = nxt[j]
        if nxt[j] >= 0:
            prev[nxt[j]] = i
        push(i)
        if prev[i] >= 0:
            push(prev[i])
    return [t for t in tokens if t is not None]


def _is_valid(tokens: Sequence[int], tokenizer: Tokenizer) -> bool:
    return heap_encode(tokenizer.decode(tokens), tokenizer) == list(tokens)


def _text_tokens(tokenizer: Tokenizer) -> List[Tuple[int, bytes]]:
    items = list(tokenizer.id_to_bytes.items()) + list(tokenizer.added.items())
    return sorted(items)


def enumerate_valid_coverings(prompt: bytes, tokenizer: Tokenizer, max_tokens: Optional[int] = None
                              ) -> Set[Tuple[int, ...]]:
    """Every valid token sequence whose decoding covers ``prompt`` and whose last token is needed to cover it"""
    prompt = bytes(prompt)
    tokens = _text_tokens(tokenizer)
    found: Set[Tuple[int, ...]] = set()
    if not prompt:
        return {(t,) for t, _ in tokens if _is_valid([t], tokenizer)}

    def walk(path: List[int], done: int):
        if max_tokens is not None and len(path) >= max_tokens:
            return
        rest = prompt[done:]
        for tid, data in tokens:
            if not data:
                continue
            if len(data) >= len(rest):
                if data.startswith(rest) and _is_valid(path + [tid], tokenizer):
                    found.add(tuple(path + [tid]))
            elif rest.startswith(data):
                walk(path + [tid], done + len(data))

    walk([], 0)
    return found


def count_coverings(prompt: bytes, tokenizer: Tokenizer) -> int:
    """Number of byte-consistent coverings before the validity filter, counted recursively"""
    prompt = bytes(prompt)
    pieces = [data for _, data in _text_tokens(tokenizer) if data]

    def count(done: int) -> int:
        rest = prompt[done:]
        total = 0
        for data in pieces:
            if len(data) >= len(rest):
                total += data.startswith(rest)
            elif rest.startswith(data):
                total += count(done + len(data))
        return total

    return count(0) if prompt else len(pieces)


def _walk_lm(lm: LanguageModel, tokenizer: Tokenizer, prompt: bytes):
    """Yield (tokens, bytes covered, log-probability) for every positive-mass path whose decoding is a prefix of ``prompt``"""
    tokens = _text_tokens(tokenizer)
    stack = [((BOS,), 0, 0.0)]
    while stack:
        context, done, logp = stack.pop()
        yield context[1:], done, logp
        if done >= len(prompt):
            continue
        logprobs = lm.next_logprobs(context)
        rest = prompt[done:]
        for tid, data in tokens:
            if data and len(data) <= len(rest) and rest.startswith(data) and np.isfinite(logprobs[tid]):
                stack.append((context + (tid,), done + len(data), logp + float(logprobs[tid])))


def brute_prefix_prob(lm: LanguageModel, prompt: bytes, tokenizer: Tokenizer) -> float:
    """Probability that a sample's decoding starts with ``prompt``, summed at each valid minimal covering"""
    prompt = bytes(prompt)
    if not prompt:
        return 1.0
    total = 0.0
    tokens = _text_tokens(tokenizer)
    for path, done, logp in _walk_lm(lm, tokenizer, prompt):
        if done == len(prompt):
            continue
        logprobs = lm.next_logprobs((BOS,) + path)
        rest = prompt[done:]
        for tid, data in tokens:
            if len(data) >= len(rest) and data.startswith(rest) and np.isfinite(logprobs[tid]):
                if _is_valid(list(path) + [tid], tokenizer):
                    total += math.exp(logp + float(logprobs[tid]))
    return total


def brute_terminal_prob(lm: LanguageModel, prompt: bytes, tokenizer: Tokenizer) -> float:
    """Probability that a sample decodes to exactly ``prompt`` and stops"""
    prompt = bytes(prompt)
    total = 0.0
    for path, done, logp in _walk_lm(lm, tokenizer, prompt):
        if done == len(prompt) and _is_valid(path, tokenizer):
            total += math.exp(logp + float(lm.next_logprobs((BOS,) + path)[lm.eos]))
    return total


def brute_next_byte(lm: LanguageModel, prompt: bytes, tokenizer: Tokenizer) -> np.ndarray:
    """Unnormalized masses of the 257 next events: prefix probability of prompt + b, then stopping"""
    masses = np.zeros(257)
    for b in sorted({b for _, data in _text_tokens(tokenizer) for b in data}):
        masses[b] = brute_prefix_prob(lm, bytes(prompt) + bytes([b]), tokenizer)
    masses[256] = brute_terminal_prob(lm, prompt, tokenizer)
    return masses


@dataclass(frozen=True)
class ToyTokenizerSpec:
    seed: int = 0
    alphabet_size: int = 4
    merge_count: int = 12
    max_token_len: int = 5
    pretokenized: bool = False

    def __post_init__(self):
        if not 1 <= self.alphabet_size <= len(TOY_ALPHABET):
            raise ConfigError(f"alphabet size must be in [1, {len(TOY_ALPHABET)}]")
        if not 0 <= self.merge_count <= 40:
            raise ConfigError("merge count must be in [0, 40]")


def random_toy_tokenizer(spec: ToyTokenizerSpec) -> Tokenizer:
    """A small byte-level BPE tokenizer, deterministic per seed.

    Merges only combine tokens formed earlier, so the list is in normal form.
    """
    rng = np.random.default_rng(spec.seed)
    alphabet = TOY_ALPHABET[:spec.alphabet_size]
    if spec.pretokenized:
        # whitespace and a second word class so the splitter has work to do
        alphabet = bytes(dict.fromkeys(alphabet[:max(1, spec.alphabet_size - 2)] + b" 0"))
    vocab: Dict[bytes, int] = {bytes([b]): i for i, b in enumerate(alphabet)}
    merges: List[Tuple[int, int, int]] = []
    seen: Set[Tuple[int, int]] = set()
    attempts = 0
    while len(merges) < spec.merge_count and attempts < 50 * (spec.merge_count + 1):
        attempts += 1
        items = list(vocab.items())
        (left, lid), (right, rid) = (items[int(i)] for i in rng.integers(0, len(items), size=2))
        data = left + right
        if (lid, rid) in seen or data in vocab or len(data) > spec.max_token_len:
            continue
        seen.add((lid, rid))
        vocab[data] = len(vocab)
        merges.append((lid, rid, vocab[data]))
    pre_spec = TOY_PRETOKENIZER if spec.pretokenized else None
    logger.debug("toy tokenizer seed=%d: %d tokens, %d merges", spec.seed, len(vocab), len(merges))
    return Tokenizer(vocab, merges, pretokenizer=build_rule_set(pre_spec), pretokenizer_spec=pre_spec)


def whitespace_toy_tokenizer() -> Tokenizer:
    """Tokens ' ', '0' and '  ' under the GPT-2 split pattern.

    '  ' never survives in front of a digit: the pattern hands the second space
    to the digit's pretoken, so [' ', ' ', '0'] is canonical and ['  ', '0'] is not.
    """
    vocab = {b" ": 0, b"0": 1, b"  ": 2}
    return Tokenizer(vocab, [(0, 0, 2)], pretokenizer=build_rule_set(TOY_PRETOKENIZER),
                     pretokenizer_spec=TOY_PRETOKENIZER)
