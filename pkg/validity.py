"""
Pairwise token validity and the token-mask caches used to expand covering trees

A pair (a, b) is valid when no merge across the a|b boundary can fire before
the merges that build a's right edge and b's left edge. Masks are numpy bool
arrays of length ``tokenizer.vocab_size``.
"""

import logging
import threading
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from bpe_tokenizer import Tokenizer
from pretokenizer import boundary_signature, decode_text, incomplete_utf8_tail

logger = logging.getLogger(__name__)

NO_BYTE = 256


class ValidityCache:
    """Per-tokenizer edge trajectories, successor masks and byte-prefix masks"""

    def __init__(self, tokenizer: Tokenizer, prefix_depth: int = 4):
        self.tokenizer = tokenizer
        self.vocab_size = tokenizer.vocab_size
        self.prefix_depth = prefix_depth
        self._lock = threading.Lock()

        # (rank, token) from the token itself down to its base byte along one edge
        self.left_edge: Dict[int, Tuple[Tuple[int, int], ...]] = {}
        self.right_edge: Dict[int, Tuple[Tuple[int, int], ...]] = {}
        for tid in tokenizer.byte_alphabet.values():
            self.left_edge[tid] = self.right_edge[tid] = ((-1, tid),)
        for merge in tokenizer.merges:
            self.left_edge[merge.result] = ((merge.rank, merge.result),) + self.left_edge[merge.left]
            self.right_edge[merge.result] = ((merge.rank, merge.result),) + self.right_edge[merge.right]

        self.reachable = np.zeros(self.vocab_size, dtype=bool)
        self.reachable[list(self.left_edge)] = True
        self.canonical = self._canonical_mask()
        self.added = np.zeros(self.vocab_size, dtype=bool)
        if tokenizer.added:
            self.added[list(tokenizer.added)] = True
        self.contains_added = np.zeros(self.vocab_size, dtype=bool)
        if tokenizer.added:
            for data, tid in list(tokenizer.vocab.items()) + [(d, t) for t, d in tokenizer.added.items()]:
                if tokenizer.added_matcher.find_all(data):
                    self.contains_added[tid] = True

        descendants: Dict[int, List[int]] = {}
        for tid, edge in self.left_edge.items():
            for _, tok in edge:
                descendants.setdefault(tok, []).append(tid)
        self._left_descendants = {tok: np.array(ids, dtype=np.int64) for tok, ids in descendants.items()}
        self._merges_with_left: Dict[int, List[int]] = {}
        for merge in tokenizer.merges:
            self._merges_with_left.setdefault(merge.left, []).append(merge.right)

        self._successors: Dict[int, np.ndarray] = {}
        self._exact_successors: Dict[int, np.ndarray] = {}
        self._prefix_masks: Dict[bytes, np.ndarray] = {}
        self._byte_at: Dict[int, np.ndarray] = {}
        self._boundary_groups: Optional[Dict[str, np.ndarray]] = None
        self._max_token_len = max((len(b) for b in tokenizer.vocab), default=0)
        logger.debug("validity cache built for %d tokens (%d canonical)", self.vocab_size, int(self.canonical.sum()))

    def _canonical_mask(self) -> np.ndarray:
        """Tokens that encode to themselves when they are the whole text"""
        tok = self.tokenizer
        mask = np.zeros(self.vocab_size, dtype=bool)
        for data, tid in tok.vocab.items():
            if not (self.reachable[tid] or tok.ignore_merges):
                continue
            if tok.pretokenizer is not None and tok.pretokenize(data) != [data]:
                continue
            if tok.added_matcher and tok.added_matcher.find_all(data):
                continue
            mask[tid] = True
        return mask

    def is_canonical(self, token: int) -> bool:
        return bool(self.canonical[token]) or token in self.tokenizer.added

    def pair_valid(self, left: int, right: int) -> bool:
        """BPE-level pair validity by replaying both edge trajectories in rank order"""
        ranks = self.tokenizer.merge_ranks
        if (left, right) in ranks:
            return False
        left_edge, right_edge = self.right_edge.get(left), self.left_edge.get(right)
        if left_edge is None or right_edge is None:
            return False
        cur_left, cur_right = left_edge[-1][1], right_edge[-1][1]
        events = sorted(
            [(rank, 0, tok) for rank, tok in left_edge[:-1]] + [(rank, 1, tok) for rank, tok in right_edge[:-1]]
        )
        for rank, side, tok in events:
            # the right side loses ties: leftmost occurrence merges first
            if ranks.get((cur_left, cur_right), rank + side) < rank + side:
                return False
            if side == 0:
                cur_left = tok
            else:
                cur_right = tok
        return True

    def _invalid_candidates(self, left: int) -> np.ndarray:
        """Tokens that could meet ``left`` through some cross-boundary merge"""
        found = []
        for _, x in self.right_edge.get(left, ()):
            for y in self._merges_with_left.get(x, ()):
                if y in self._left_descendants:
                    found.append(self._left_descendants[y])
        if not found:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(found))

    def successors(self, token: int) -> np.ndarray:
        """BPE-level valid successors of ``token`` among reachable tokens"""
        cached = self._successors.get(token)
        if cached is not None:
            return cached
        if token in self.tokenizer.specials:
            mask = self.canonical.copy()
        elif not self.reachable[token]:
            mask = np.zeros(self.vocab_size, dtype=bool)
        else:
            mask = self.reachable.copy()
            for candidate in self._invalid_candidates(token):
                if mask[candidate] and not self.pair_valid(token, int(candidate)):
                    mask[candidate] = False
        mask.setflags(write=False)
        with self._lock:
            return self._successors.setdefault(token, mask)

    @property
    def continues_character(self) -> np.ndarray:
        """Tokens that start with a UTF-8 continuation byte"""
        first = self.byte_at(0)
        return (first >= 0x80) & (first < 0xC0)

    def boundary_groups(self) -> Dict[str, np.ndarray]:
        """Non-added text tokens keyed by their boundary signature"""
        if self._boundary_groups is not None:
            return self._boundary_groups
        groups: Dict[str, List[int]] = {}
        candidates = (self.canonical | self.reachable) & ~self.added & ~self.contains_added
        for tid in np.flatnonzero(candidates):
            signature = boundary_signature(self.tokenizer.token_bytes(int(tid)))
            groups.setdefault(signature, []).append(int(tid))
        found = {key: np.array(ids, dtype=np.int64) for key, ids in groups.items()}
        logger.debug("%d tokens fall into %d boundary signature groups", int(candidates.sum()), len(found))
        with self._lock:
            if self._boundary_groups is None:
                self._boundary_groups = found
            return self._boundary_groups

    def _subtree_tokens(self, node: dict) -> List[int]:
        found, stack = [], [node]
        while stack:
            current = stack.pop()
            for key, child in current.items():
                if key is None:
                    found.append(child)
                else:
                    stack.append(child)
        return found

    def byte_at(self, position: int) -> np.ndarray:
        """The byte at ``position`` of every token, or 256 where the token is shorter"""
        cached = self._byte_at.get(position)
        if cached is not None:
            return cached
        column = np.full(self.vocab_size, NO_BYTE, dtype=np.int16)
        for data, tid in self.tokenizer.vocab.items():
            if len(data) > position:
                column[tid] = data[position]
        for tid, data in self.tokenizer.added.items():
            if len(data) > position:
                column[tid] = data[position]
        column.setflags(write=False)
        with self._lock:
            return self._byte_at.setdefault(position, column)

    def tokens_with_prefix(self, prefix: bytes) -> np.ndarray:
        """Vocab tokens whose bytes start with ``prefix``"""
        prefix = bytes(prefix)
        if len(prefix) > self.prefix_depth:
            mask = self.tokens_with_prefix(prefix[:self.prefix_depth]).copy()
            for i in range(self.prefix_depth, len(prefix)):
                if not mask.any():
                    break
                mask &= self.byte_at(i) == prefix[i]
            return mask
        cached = self._prefix_masks.get(prefix)
        if cached is not None:
            return cached
        mask = np.zeros(self.vocab_size, dtype=bool)
        node = self.tokenizer.trie
        for b in prefix:
            node = node.get(b)
            if node is None:
                break
        else:
            mask[self._subtree_tokens(node)] = True
        mask.setflags(write=False)
        with self._lock:
            return self._prefix_masks.setdefault(prefix, mask)

    def longer_than(self, length: int) -> np.ndarray:
        return self.byte_at(length) != NO_BYTE


def is_pair_valid(a: int, b: int, tokenizer: Tokenizer, cache: ValidityCache) -> bool:
    """encode(decode([a, b])) == [a, b], using the trajectory check where the pretokenizer allows"""
    text = tokenizer.decode([a, b])
    if a in tokenizer.added or b in tokenizer.added or tokenizer.added_matcher.find_all(text):
        return tokenizer.encode(text) == [a, b]
    pieces = tokenizer.pretokenize(text)
    if len(pieces) == 1:
        if tokenizer.ignore_merges and text in tokenizer.vocab:
            return False
        return cache.pair_valid(a, b)
    if pieces == [tokenizer.token_bytes(a), tokenizer.token_bytes(b)]:
        return cache.is_canonical(a) and cache.is_canonical(b)
    return tokenizer.encode(text) == [a, b]


def _added_straddlers(a: int, tokenizer: Tokenizer, cache: ValidityCache) -> np.ndarray:
    """Tokens b for which some added string would run across the a|b boundary"""
    mask = np.zeros(cache.vocab_size, dtype=bool)
    data = tokenizer.token_bytes(a)
    for pattern in tokenizer.added.values():
        for k in range(1, len(pattern)):
            if data.endswith(pattern[:k]):
                mask |= cache.tokens_with_prefix(pattern[k:])
    return mask


def _exact_pairs(a: int, candidates: np.ndarray, mask: np.ndarray, tokenizer: Tokenizer, cache: ValidityCache):
    for b in np.flatnonzero(candidates):
        mask[b] = is_pair_valid(a, int(b), tokenizer, cache)


def valid_successors(a: int, tokenizer: Tokenizer, cache: ValidityCache) -> np.ndarray:
    """Mask of every b with is_pair_valid(a, b); memoized per token.

    With a pretokenizer the split of decode([a, b]) is worked out once per
    boundary signature group of b, not once per b. Only pairs whose split is
    neither one piece nor exactly [a, b], and pairs touching added tokens,
    are checked one by one.
    """
    cached = cache._exact_successors.get(a)
    if cached is not None:
        return cached
    if tokenizer.is_special(a):
        mask = cache.canonical | cache.added
    elif tokenizer.pretokenizer is None and not tokenizer.added:
        mask = cache.successors(a).copy()
    else:
        mask = _grouped_successors(a, tokenizer, cache)
    mask.setflags(write=False)
    with cache._lock:
        return cache._exact_successors.setdefault(a, mask)


def _grouped_successors(a: int, tokenizer: Tokenizer, cache: ValidityCache) -> np.ndarray:
    mask = np.zeros(cache.vocab_size, dtype=bool)
    data = tokenizer.token_bytes(a)
    exact = cache.added.copy()
    if tokenizer.added:
        if a in tokenizer.added or cache.contains_added[a]:
            # a|b text starts with an added match: only the matcher decides
            _exact_pairs(a, cache.canonical | cache.added | cache.reachable, mask, tokenizer, cache)
            return mask
        exact |= _added_straddlers(a, tokenizer, cache)
    if incomplete_utf8_tail(data):
        exact |= cache.continues_character
    if tokenizer.pretokenizer is None:
        successors = cache.successors(a)
        mask[:] = successors & ~cache.contains_added
        if tokenizer.ignore_merges:
            for b in np.flatnonzero(mask & ~exact):
                if data + tokenizer.token_bytes(int(b)) in tokenizer.vocab:
                    mask[b] = False
        mask &= ~exact
        _exact_pairs(a, exact, mask, tokenizer, cache)
        return mask

    successors = cache.successors(a)
    left = decode_text(data)
    one_cut = frozenset([len(left)])
    slow = exact.copy()
    for signature, ids in cache.boundary_groups().items():
        ids = ids[~exact[ids]]
        if not len(ids):
            continue
        cuts, _ = tokenizer.pretokenizer.boundaries(left + signature)
        if not cuts:
            mask[ids] = successors[ids]
            if tokenizer.ignore_merges:
                for b in ids:
                    if mask[b] and data + tokenizer.token_bytes(int(b)) in tokenizer.vocab:
                        mask[b] = False
        elif cuts == one_cut:
            mask[ids] = cache.canonical[a] & cache.canonical[ids]
        else:
            slow[ids] = True
    _exact_pairs(a, slow, mask, tokenizer, cache)
    return mask


def _text_run_valid(tokens: Sequence[int], tokenizer: Tokenizer, cache: ValidityCache) -> bool:
    if not tokens:
        return True
    text = tokenizer.decode(tokens)
    ends, offset = set(), 0
    for t in tokens:
        offset += len(tokenizer.token_bytes(t))
        ends.add(offset)
    position, index = 0, 0
    for piece in tokenizer.pretokenize(text):
        stop = position + len(piece)
        if stop not in ends:
            return False
        group = []
        while position < stop:
            t = tokens[index]
            group.append(t)
            position += len(tokenizer.token_bytes(t))
            index += 1
        if tokenizer.ignore_merges and piece in tokenizer.vocab:
            if group != [tokenizer.vocab[piece]]:
                return False
            continue
        if not all(cache.reachable[t] for t in group):
            return False
        if not all(cache.pair_valid(x, y) for x, y in zip(group, group[1:])):
            return False
    return True


def is_sequence_valid(tokens: Sequence[int], tokenizer: Tokenizer, cache: ValidityCache) -> bool:
    """encode(decode(tokens)) == tokens, checked pretoken by pretoken.

    Special tokens restart the text, so each run between them is checked on its own.
    """
    runs: List[List[int]] = [[]]
    for t in tokens:
        if tokenizer.is_special(t):
            runs.append([])
        else:
            runs[-1].append(t)
    for run in runs:
        if not run:
            continue
        if tokenizer.added:
            matched = tokenizer.added_matcher.find_all(tokenizer.decode(run))
            expected, offset = [], 0
            for t in run:
                data = tokenizer.token_bytes(t)
                if t in tokenizer.added:
                    expected.append((offset, offset + len(data), t))
                offset += len(data)
            if matched != expected:
                return False
        chunk: List[int] = []
        for t in run + [None]:
            if t is None or t in tokenizer.added:
                if not _text_run_valid(chunk, tokenizer, cache):
                    return False
                chunk = []
            else:
                chunk.append(t)
    return True


def definitional_valid(tokens: Sequence[int], tokenizer: Tokenizer) -> bool:
    """The literal encode(decode(T)) == T test on text tokens"""
    return tokenizer.encode(tokenizer.decode(tokens)) == list(tokens)
