"""
Valid covering trees over a streaming byte prompt

A tree holds the emitted trunk plus, for every live pretokenization hypothesis
of the unresolved tail, a token tree over the trailing pretoken. Tokens that
every hypothesis agrees on move to the trunk as soon as they are determined.
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple, Union

import numpy as np

from bpe_tokenizer import Tokenizer
from errors import DeadTreeError, NotALeafError
from pretokenizer import SplitHypothesis, StreamingPretokenizer
from validity import ValidityCache

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class TreeNode:
    token: Optional[int]
    parent: Optional["TreeNode"]
    end: int
    children: Dict[int, "TreeNode"] = field(default_factory=dict)
    trie: Optional[dict] = None
    tail: bytearray = field(default_factory=bytearray)

    def __repr__(self):
        return f"N({self.token}@{self.end})"


class CoverGroup(NamedTuple):
    """Paths ending inside the prompt plus the tokens that can overhang its end"""
    path: Tuple[int, ...]
    mask: np.ndarray
    tail: int


class BoundaryPath(NamedTuple):
    """A path ending exactly at the prompt end and the tokens allowed after it"""
    path: Tuple[int, ...]
    mask: np.ndarray
    eos_ok: bool


class LeafGroup(NamedTuple):
    """Minimal coverings sharing ``path``: one per token in ``mask``.

    ``covered`` is how many bytes of the final token lie inside the prompt.
    """
    path: Tuple[int, ...]
    mask: np.ndarray
    covered: int


class BranchStats(NamedTuple):
    non_trunk_edges: int
    live_hypotheses: int
    deepest_branch: int


class PretokenTree:
    """Token tree over one pretoken that starts at ``start``"""

    def __init__(self, tokenizer: Tokenizer, cache: ValidityCache, start: int, root_token: Optional[int] = None):
        self.tokenizer = tokenizer
        self.cache = cache
        self.start = start
        self.position = start
        self.root = TreeNode(root_token, None, start, trie=tokenizer.trie)
        self.heads: List[TreeNode] = [self.root]
        self.created: List[TreeNode] = [self.root]
        self.fixed: List[int] = []

    @property
    def dead(self) -> bool:
        return not self.heads

    def _can_follow(self, previous: Optional[int], token: int) -> bool:
        if previous is None:
            return bool(self.cache.reachable[token]) or self.tokenizer.ignore_merges
        return self.cache.pair_valid(previous, token)

    def _collect(self, node: TreeNode):
        while node.parent is not None and not node.children and node.trie is None:
            node.parent.children.pop(node.token, None)
            node = node.parent

    def push(self, byte: int) -> List[int]:
        self.position += 1
        heads, created = [], []
        for head in self.heads:
            trie = head.trie.get(byte)
            if trie is None:
                head.trie = None
                self._collect(head)
                continue
            head.trie = trie
            head.tail.append(byte)
            heads.append(head)
            token = trie.get(None)
            if token is not None and self._can_follow(head.token, token):
                child = TreeNode(token, head, self.position, trie=self.tokenizer.trie)
                head.children[token] = child
                heads.append(child)
                created.append(child)
        self.heads, self.created = heads, created
        return self._emit()

    def _emit(self) -> List[int]:
        fixed = []
        while self.root.trie is None and len(self.root.children) == 1:
            child = next(iter(self.root.children.values()))
            child.parent = None
            self.root = child
            fixed.append(child.token)
        self.fixed.extend(fixed)
        return fixed

    def path(self, node: TreeNode) -> List[int]:
        """Tokens from just below the current root down to ``node``"""
        tokens = []
        while node is not self.root:
            tokens.append(node.token)
            node = node.parent
        return tokens[::-1]

    def nodes(self) -> Iterable[TreeNode]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(node.children.values())

    def split(self) -> List[int]:
        """Close the pretoken here and return its tokens after ``fixed``"""
        ends = [n for n in self.created if n.end == self.position]
        if not ends:
            raise DeadTreeError(self.position, "pretoken cannot end here")
        if len(ends) > 1 and self.tokenizer.ignore_merges:
            # the whole-pretoken vocab entry wins over the merge path
            whole = [n for n in ends if not self.fixed and n.parent is self.root and self.root.token is None]
            if whole:
                return [whole[0].token]
        return self.path(ends[0])


class ValidCoveringTree:
    """Streaming valid covering tree for one byte prompt"""

    def __init__(self, tokenizer: Tokenizer, cache: Optional[ValidityCache] = None):
        self.tokenizer = tokenizer
        self.cache = cache or ValidityCache(tokenizer)
        self.trunk: List[int] = []
        self.consumed = 0
        self.special_log: List[Tuple[int, int]] = []
        self._restart(0)

    def _restart(self, offset: int, root_token: Optional[int] = None):
        self.splitter = StreamingPretokenizer(self.tokenizer.pretokenizer, offset)
        self._matcher = self.tokenizer.added_matcher.start(offset)
        self._trees: Dict[int, PretokenTree] = {offset: PretokenTree(self.tokenizer, self.cache, offset, root_token)}
        self._dead_starts: Set[int] = set()
        self._region_emitted = 0
        self._partials: Tuple[Tuple[int, int], ...] = ()
        self._pending: Optional[Tuple[int, int, int]] = None
        self._segment_cache: Dict[Tuple[int, int], List[int]] = {}
        self._eos_cache: Dict[int, List[int]] = {}
        self._root_token = root_token
        self._fresh = True

    def fork(self) -> "ValidCoveringTree":
        """Independent copy of the current state; tokenizer and mask caches stay shared"""
        tok = self.tokenizer
        memo = {id(obj): obj for obj in (tok, self.cache, tok.pretokenizer, tok.added_matcher)}
        return copy.deepcopy(self, memo)

    @property
    def fresh(self) -> bool:
        """No text byte since the start, the last special token or the last commit"""
        return self._fresh

    # hypotheses

    def _text_hypotheses(self) -> List[SplitHypothesis]:
        start = self.splitter.region_start
        return [h for h in self.splitter.hypotheses if h.trailing_start(start) in self._trees]

    def _added_starts(self) -> List[int]:
        starts = {s for s, _ in self._partials}
        if self._pending is not None:
            starts.add(self._pending[0])
        return sorted(starts)

    def _closed_tokens(self, hypothesis: SplitHypothesis) -> List[int]:
        tokens = []
        for a, b in hypothesis.closed_segments(self.splitter.region_start):
            if (a, b) not in self._segment_cache:
                self._segment_cache[a, b] = self.tokenizer.encode_pretoken(self.splitter.region_bytes(a, b))
            tokens.extend(self._segment_cache[a, b])
        return tokens

    def _closed_at(self, offset: int) -> List[int]:
        """Tokens of the region text up to ``offset`` if the text ended there"""
        if offset not in self._eos_cache:
            self._eos_cache[offset] = self.tokenizer.encode_text(self.splitter.region_bytes(self.splitter.region_start, offset))
        return self._eos_cache[offset]

    def _hypothesis_prefix(self, hypothesis: SplitHypothesis) -> List[int]:
        tree = self._trees[hypothesis.trailing_start(self.splitter.region_start)]
        return (self._closed_tokens(hypothesis) + tree.fixed)[self._region_emitted:]

    def _hypothesis_lists(self) -> List[List[int]]:
        lists = []
        for h in self._text_hypotheses():
            tree = self._trees[h.trailing_start(self.splitter.region_start)]
            lists.append(self._closed_tokens(h) + tree.fixed)
        lists.extend(self._closed_at(s) for s in self._added_starts())
        return lists

    # streaming

    def feed_byte(self, byte: int) -> List[int]:
        """Consume one prompt byte; return the tokens that became determined"""
        offset = self.consumed
        self._fresh = False
        if self.tokenizer.added_matcher:
            scan = self.tokenizer.added_matcher.scan(self._matcher, byte)
            self._partials = scan.partial
            for start, tid in scan.full:
                candidate = (start, offset + 1, tid)
                if self._pending is None or (start, start - offset - 1) < (self._pending[0], self._pending[0] - self._pending[1]):
                    self._pending = candidate
        hold = min(self._added_starts(), default=None)

        old_start = self.splitter.region_start
        self.splitter.advance(byte, hold)
        self.consumed += 1
        emitted = []
        if self.splitter.region_start != old_start:
            emitted.extend(self._settle())

        for start in list(self._trees):
            tree = self._trees[start]
            if start < self.splitter.region_start:
                del self._trees[start]
                continue
            tree.push(byte)
            if tree.dead:
                del self._trees[start]
                self._dead_starts.add(start)
        needed = {h.trailing_start(self.splitter.region_start) for h in self.splitter.hypotheses}
        for start in needed:
            if start not in self._trees and start not in self._dead_starts:
                self._spawn(start)
        for start in list(self._trees):
            if start not in needed:
                del self._trees[start]

        if self._pending is not None and not any(s <= self._pending[0] for s, _ in self._partials):
            return emitted + self._commit_added(*self._pending)

        if not self._text_hypotheses() and not self._added_starts():
            raise DeadTreeError(offset, f"byte 0x{byte:02x}")
        return emitted + self._emit()

    def _spawn(self, start: int):
        tree = PretokenTree(self.tokenizer, self.cache, start)
        for b in self.splitter.region_bytes(start):
            tree.push(b)
            if tree.dead:
                self._dead_starts.add(start)
                return
        logger.debug("new pretoken branch at %d", start)
        self._trees[start] = tree

    def _settle(self) -> List[int]:
        tokens = []
        for _, _, data in self.splitter.take_settled():
            tokens.extend(self.tokenizer.encode_pretoken(data))
        region_start = self.splitter.region_start
        self._segment_cache = {k: v for k, v in self._segment_cache.items() if k[0] >= region_start}
        self._eos_cache = {}
        self._dead_starts = {s for s in self._dead_starts if s >= region_start}
        if self._region_emitted >= len(tokens):
            self._region_emitted -= len(tokens)
            return []
        new = tokens[self._region_emitted:]
        self._region_emitted = 0
        self.trunk.extend(new)
        return new

    def _emit(self) -> List[int]:
        lists = self._hypothesis_lists()
        common = 0
        shortest = min(len(x) for x in lists)
        while common < shortest and all(x[common] == lists[0][common] for x in lists):
            common += 1
        if common <= self._region_emitted:
            return []
        new = lists[0][self._region_emitted:common]
        self._region_emitted = common
        self.trunk.extend(new)
        return new

    def _commit_added(self, start: int, end: int, token: int) -> List[int]:
        before = self._closed_at(start)
        rest = self.splitter.region_bytes(end, self.consumed)
        new = before[self._region_emitted:] + [token]
        self.trunk.extend(new)
        logger.debug("added token %d committed at [%d, %d)", token, start, end)
        self.consumed = end
        self._restart(end)
        for b in rest:
            new.extend(self.feed_byte(b))
        return new

    def feed(self, data: Union[bytes, Iterable[Union[bytes, int]]]) -> List[int]:
        """Feed plain bytes, or a sequence of byte strings and special token ids"""
        if isinstance(data, (bytes, bytearray)):
            data = [bytes(data)]
        emitted = []
        for segment in data:
            if isinstance(segment, int):
                emitted.extend(self.feed_special(segment))
            else:
                for b in segment:
                    emitted.extend(self.feed_byte(b))
        return emitted

    def feed_special(self, token: int) -> List[int]:
        """Close the text so far, append a special token and start a new tree"""
        if not self.tokenizer.is_special(token):
            raise NotALeafError(token)
        emitted = self.finish()
        self.trunk.append(token)
        self.special_log.append((self.consumed, token))
        self._restart(self.consumed)
        return emitted + [token]

    def finish(self) -> List[int]:
        """Close the stream under end-of-text and return the remaining tokens"""
        if self._fresh:
            return []
        if self._pending is not None:
            emitted = self._commit_added(*self._pending)
            return emitted + self.finish()
        region_start = self.splitter.region_start
        eos = SplitHypothesis(tuple(sorted(self.splitter.segment_cuts())))
        start = eos.trailing_start(region_start)
        tree = self._trees.get(start)
        if tree is None and start not in self._dead_starts:
            self._spawn(start)
            tree = self._trees.get(start)
        if tree is None:
            raise DeadTreeError(self.consumed, "text cannot end here")
        tokens = self._closed_tokens(eos) + tree.fixed + tree.split()
        new = tokens[self._region_emitted:]
        self.trunk.extend(new)
        self._restart(self.consumed)
        return new

    # views

    def _root_mask(self) -> np.ndarray:
        mask = self.cache.reachable.copy()
        if self.tokenizer.ignore_merges:
            mask[list(self.tokenizer.id_to_bytes)] = True
        return mask

    def _follow_mask(self, token: Optional[int]) -> np.ndarray:
        return self._root_mask() if token is None else self.cache.successors(token)

    def _fresh_mask(self) -> np.ndarray:
        if self._root_token is not None:
            return self.cache.successors(self._root_token)
        return self.cache.canonical | self.cache.added

    def _consistent(self, hypothesis: SplitHypothesis, start: int, pretoken_tokens: int, overhang: bytes) -> bool:
        """Whether the prompt plus ``overhang`` still splits as ``hypothesis`` with nothing after ``start``"""
        tok = self.tokenizer
        if tok.pretokenizer is not None:
            if self.splitter.segment_cuts(overhang) != frozenset(hypothesis.boundaries):
                return False
        if tok.ignore_merges and pretoken_tokens:
            if self.splitter.region_bytes(start) + overhang in tok.vocab:
                return False
        if tok.added_matcher and tok.added_matcher.find_all(self.splitter.region_bytes(self.splitter.region_start) + overhang):
            return False
        return True

    def cover_groups(self, exact: bool = False) -> List[CoverGroup]:
        """Paths whose next token must overhang the prompt, with the overhanging tokens allowed.

        With ``exact`` every group is filtered down to coverings that stay valid
        as complete texts under their pretokenization hypothesis.
        """
        groups: Dict[Tuple[int, ...], List] = {}
        region_start = self.splitter.region_start
        for h in self._text_hypotheses():
            start = h.trailing_start(region_start)
            tree = self._trees[start]
            prefix = self._hypothesis_prefix(h)
            for head in tree.heads:
                tail = tree.position - head.end
                if tail == 0:
                    continue
                mask = self.cache.tokens_with_prefix(bytes(head.tail)) & self.cache.longer_than(tail)
                mask &= self._follow_mask(head.token)
                if exact and mask.any():
                    in_pretoken = len(tree.fixed) + len(tree.path(head))
                    for t in np.flatnonzero(mask):
                        overhang = self.tokenizer.token_bytes(int(t))[tail:]
                        if not self._consistent(h, start, in_pretoken, overhang):
                            mask[t] = False
                if not mask.any():
                    continue
                path = tuple(prefix + tree.path(head))
                if path in groups:
                    groups[path][0] |= mask
                else:
                    groups[path] = [mask, tail]
        for s, depth in self._partials:
            mask = np.zeros(self.cache.vocab_size, dtype=bool)
            matched = self.splitter.region_bytes(s)
            for tid in self.tokenizer.added_matcher.completions(matched):
                if len(self.tokenizer.added[tid]) > len(matched):
                    mask[tid] = True
            if mask.any():
                path = tuple(self._closed_at(s)[self._region_emitted:])
                if path in groups:
                    groups[path][0] |= mask
                else:
                    groups[path] = [mask, len(matched)]
        return [CoverGroup(path, mask, tail) for path, (mask, tail) in groups.items()]

    def _split_successors(self, mask: np.ndarray) -> np.ndarray:
        """Canonical tokens outside ``mask`` that the pretokenizer would cut off at the prompt end"""
        extra = np.zeros_like(mask)
        for t in np.flatnonzero(self.cache.canonical & ~mask):
            if self.consumed in self.splitter.segment_cuts(self.tokenizer.token_bytes(int(t))):
                extra[t] = True
        return extra

    def boundary_paths(self) -> List[BoundaryPath]:
        """Paths whose decoding ends exactly at the prompt end"""
        if self._fresh:
            return [BoundaryPath((), self._fresh_mask(), self._root_token is None)]
        tok = self.tokenizer
        found: Dict[Tuple[int, ...], List] = {}
        region_start = self.splitter.region_start
        eos_cuts = self.splitter.segment_cuts()
        added_inside = bool(tok.added_matcher and tok.added_matcher.find_all(self.splitter.region_bytes(region_start)))
        for h in self._text_hypotheses():
            start = h.trailing_start(region_start)
            tree = self._trees[start]
            prefix = self._hypothesis_prefix(h)
            trailing = self.splitter.region_bytes(start)
            for node in tree.created:
                if node.end != self.consumed or node.token is None:
                    continue
                in_pretoken = tree.fixed + tree.path(node)
                closes = not (tok.ignore_merges and trailing in tok.vocab and in_pretoken != [tok.vocab[trailing]])
                mask = self._follow_mask(node.token).copy()
                if tok.pretokenizer is not None and closes:
                    mask |= self._split_successors(mask)
                eos_ok = closes and not added_inside and frozenset(h.boundaries) == eos_cuts
                if eos_ok:
                    mask |= self.cache.added
                path = tuple(prefix + tree.path(node))
                if path in found:
                    found[path][0] |= mask
                    found[path][1] = found[path][1] or eos_ok
                else:
                    found[path] = [mask, eos_ok]
        if self._pending is not None and self._pending[1] == self.consumed:
            start, _, token = self._pending
            path = tuple(self._closed_at(start)[self._region_emitted:] + [token])
            found[path] = [self.cache.canonical | self.cache.added, True]
        return [BoundaryPath(path, mask, eos_ok) for path, (mask, eos_ok) in found.items()]

    def leaves(self) -> List[LeafGroup]:
        """The minimal valid coverings of the prompt, grouped by shared path"""
        if self._fresh:
            return [LeafGroup((), self._fresh_mask(), 0)]
        groups = [LeafGroup(g.path, g.mask, g.tail) for g in self.cover_groups(exact=True)]
        for bp in self.boundary_paths():
            if bp.eos_ok and bp.path:
                last = bp.path[-1]
                mask = np.zeros(self.cache.vocab_size, dtype=bool)
                mask[last] = True
                groups.append(LeafGroup(bp.path[:-1], mask, len(self.tokenizer.token_bytes(last))))
        return groups

    def coverings(self) -> Set[Tuple[int, ...]]:
        """Every leaf as a full token sequence, trunk included"""
        found = set()
        for group in self.leaves():
            for t in np.flatnonzero(group.mask):
                found.add(tuple(self.trunk) + group.path + (int(t),))
        return found

    def commit_token(self, token: int, path: Optional[Sequence[int]] = None) -> List[int]:
        """Resolve the tree to the leaf ending in ``token`` and re-root after it"""
        for group in self.leaves():
            if group.mask[token] and (path is None or tuple(path) == group.path):
                break
        else:
            raise NotALeafError(token)
        tokens = list(group.path) + [token]
        overhang = len(self.tokenizer.token_bytes(token)) - group.covered
        self.trunk.extend(tokens)
        self.consumed += overhang
        self._restart(self.consumed, root_token=token)
        return tokens

    def branch_stats(self) -> BranchStats:
        prefixes: Set[Tuple[int, ...]] = set()
        region_start = self.splitter.region_start
        hypotheses = self._text_hypotheses()
        for h in hypotheses:
            tree = self._trees[h.trailing_start(region_start)]
            base = self._hypothesis_prefix(h)
            for node in tree.nodes():
                full = tuple(base + tree.path(node))
                prefixes.update(full[:i] for i in range(1, len(full) + 1))
        for s in self._added_starts():
            full = tuple(self._closed_at(s)[self._region_emitted:])
            prefixes.update(full[:i] for i in range(1, len(full) + 1))
        deepest = max((len(p) for p in prefixes), default=0)
        return BranchStats(len(prefixes), len(hypotheses) + len(self._added_starts()), deepest)

    def branch_edges(self) -> List[Tuple[int, int, int, int]]:
        """Non-trunk edges as (depth below the trunk, token, start byte, end byte)"""
        rows = []
        region_start = self.splitter.region_start
        for h in self._text_hypotheses():
            tree = self._trees[h.trailing_start(region_start)]
            full = self._closed_tokens(h) + tree.fixed
            offset = region_start + len(self.tokenizer.decode(full[:self._region_emitted]))
            depth = 0
            for t in full[self._region_emitted:]:
                end = offset + len(self.tokenizer.token_bytes(t))
                rows.append((depth, t, offset, end))
                offset, depth = end, depth + 1
            stack = [(tree.root, depth)]
            while stack:
                node, level = stack.pop()
                for child in node.children.values():
                    rows.append((level, child.token, node.end, child.end))
                    stack.append((child, level + 1))
        return rows

    def dump(self) -> str:
        """Indented listing of the trunk and every branch with byte offsets"""
        tok = self.tokenizer
        lines = [f"trunk ({len(self.trunk)} tokens, {self.consumed} bytes): {self.trunk}"]
        region_start = self.splitter.region_start
        for h in self._text_hypotheses():
            start = h.trailing_start(region_start)
            tree = self._trees[start]
            lines.append(f"hypothesis cuts={list(h.boundaries)} trailing pretoken at {start}")
            depth = 1
            for t in self._hypothesis_prefix(h):
                lines.append("  " * depth + f"{t} {tok.token_bytes(t)!r}")
                depth += 1

            def walk(node: TreeNode, level: int, begin: int):
                for child in node.children.values():
                    lines.append("  " * level + f"{child.token} {tok.token_bytes(child.token)!r} [{begin}, {child.end})")
                    walk(child, level + 1, child.end)

            walk(tree.root, depth, tree.root.end)
        for s in self._added_starts():
            lines.append(f"added-token match in progress at {s}")
        stats = self.branch_stats()
        lines.append(
            f"edges={stats.non_trunk_edges} hypotheses={stats.live_hypotheses} deepest={stats.deepest_branch}"
        )
        return "\n".join(lines)
