"""
Pretokenization for byte-level BPE tokenizers

Batch splitting follows the tokenizer definition's own split patterns, restricted
to a whitelist of rule classes. Streaming splitting keeps every split of the
unresolved tail that some continuation can still produce, and reports
boundaries as forced once no continuation can move them.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import regex

from errors import UnsupportedPretokenizerError

logger = logging.getLogger(__name__)

GPT2_PATTERN = r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"

CONTRACTION_SUFFIXES = ("s", "t", "re", "ve", "m", "ll", "d")
CONTRACTION_LETTERS = frozenset("".join(CONTRACTION_SUFFIXES))

NO_SPLIT = "no-split"
FORCED_SPLIT = "forced-split"
AMBIGUOUS = "ambiguous"


@dataclass(frozen=True)
class PretokenRule:
    """One whitelisted alternative of a split pattern"""
    kind: str
    pattern: str
    group: int = 0
    align: str = "left"
    case_insensitive: bool = False


def _contraction(pattern: str, case_insensitive: bool = False) -> PretokenRule:
    return PretokenRule("contraction", pattern, case_insensitive=case_insensitive)


# Alternatives accepted inside Split patterns, keyed by their exact source text
KNOWN_ALTERNATIVES: Dict[str, PretokenRule] = {
    **{f"'{s}": _contraction(f"'{s}") for s in CONTRACTION_SUFFIXES},
    "(?i:'s|'t|'re|'ve|'m|'ll|'d)": _contraction("(?i:'s|'t|'re|'ve|'m|'ll|'d)", True),
    r" ?\p{L}+": PretokenRule("word", r" ?\p{L}+"),
    r"[^\r\n\p{L}\p{N}]?\p{L}+": PretokenRule("letters", r"[^\r\n\p{L}\p{N}]?\p{L}+"),
    r" ?\p{N}+": PretokenRule("digits", r" ?\p{N}+"),
    r"\p{N}+": PretokenRule("digits", r"\p{N}+"),
    r"\p{N}": PretokenRule("digits", r"\p{N}", group=1),
    r"\p{N}{1,3}": PretokenRule("digits", r"\p{N}{1,3}", group=3),
    r"(?=(\d{3})+(?!\d))": PretokenRule("digits", r"(?=(\d{3})+(?!\d))", group=3, align="right"),
    r" ?[^\s\p{L}\p{N}]+": PretokenRule("punctuation", r" ?[^\s\p{L}\p{N}]+"),
    r" ?[^\s\p{L}\p{N}]+[\r\n]*": PretokenRule("punctuation", r" ?[^\s\p{L}\p{N}]+[\r\n]*"),
    r"\s*[\r\n]+": PretokenRule("newline", r"\s*[\r\n]+"),
    r"\s+(?!\S)": PretokenRule("whitespace_holdback", r"\s+(?!\S)"),
    r"\s+": PretokenRule("whitespace", r"\s+"),
}


def split_alternatives(pattern: str) -> List[str]:
    """Split a regex on its top-level ``|`` only"""
    parts, depth, in_class, escaped = [], 0, False, False
    current = []
    for ch in pattern:
        if escaped:
            escaped = False
        elif ch == "\\":
            escaped = True
        elif in_class:
            if ch == "]":
                in_class = False
        elif ch == "[":
            in_class = True
        elif ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif ch == "|" and depth == 0:
            parts.append("".join(current))
            current = []
            continue
        current.append(ch)
    parts.append("".join(current))
    return parts


def decode_text(data: bytes) -> str:
    return data.decode("utf-8", "surrogateescape")


def encode_text(text: str) -> bytes:
    return text.encode("utf-8", "surrogateescape")


def incomplete_utf8_tail(data: Sequence[int]) -> int:
    """Number of trailing bytes forming a still-incomplete UTF-8 character"""
    for back in range(1, min(4, len(data)) + 1):
        byte = data[-back]
        if byte < 0x80:
            return 0
        if byte >= 0xC0:
            if byte >= 0xF8:
                return 0
            need = 2 if byte < 0xE0 else 3 if byte < 0xF0 else 4
            return back if back < need else 0
    return 0


_LETTER = regex.compile(r"\p{L}")
_DIGIT = regex.compile(r"\d")
_NUMBER = regex.compile(r"\p{N}")
_SPACE = regex.compile(r"\s")


def boundary_signature(data: bytes) -> str:
    """Stand-in text the split rules treat exactly like ``data`` after any left context.

    Letters become ``a`` except contraction letters in the first two positions or
    right after an apostrophe. Decimal digits become ``0``, other numerals ``²``,
    whitespace other than space and line breaks ``\\t``, anything else ``.``.
    """
    text = decode_text(data)
    out = []
    for i, ch in enumerate(text):
        if ch in " '\r\n":
            out.append(ch)
        elif _LETTER.match(ch):
            near_apostrophe = i < 2 or "'" in text[max(0, i - 2):i]
            out.append(ch if near_apostrophe and ch.casefold() in CONTRACTION_LETTERS else "a")
        elif _DIGIT.match(ch):
            out.append("0")
        elif _NUMBER.match(ch):
            out.append("²")
        elif _SPACE.match(ch):
            out.append("\t")
        else:
            out.append(".")
    return "".join(out)


@dataclass
class SplitStage:
    source: str
    rules: Tuple[PretokenRule, ...]
    compiled: "regex.Pattern" = field(init=False, repr=False)

    def __post_init__(self):
        self.compiled = regex.compile(self.source)

    def split(self, piece: str) -> List[str]:
        out, last = [], 0
        for match in self.compiled.finditer(piece):
            start, end = match.span()
            if start > last:
                out.append(piece[last:start])
            if end > start:
                out.append(piece[start:end])
            last = max(last, end)
        if last < len(piece):
            out.append(piece[last:])
        return out


class PretokenRuleSet:
    """An ordered sequence of whitelisted split stages"""

    def __init__(self, stages: Sequence[SplitStage]):
        if not stages:
            raise UnsupportedPretokenizerError("pretokenizer has no split rules")
        self.stages = list(stages)
        self.rules = [rule for stage in self.stages for rule in stage.rules]
        self.lookaheads = self._lookahead_strings()

    @classmethod
    def from_patterns(cls, *patterns: str) -> "PretokenRuleSet":
        return cls([make_stage(p) for p in patterns])

    @property
    def kinds(self) -> FrozenSet[str]:
        return frozenset(rule.kind for rule in self.rules)

    def _lookahead_strings(self) -> Tuple[str, ...]:
        lookaheads = ["", "a", "A", "0", "00", "000", " ", "\t", "\n", ".", "'"]
        if "contraction" in self.kinds:
            case_insensitive = any(r.case_insensitive for r in self.rules if r.kind == "contraction")
            for suffix in CONTRACTION_SUFFIXES:
                variants = {suffix, suffix.upper()} if case_insensitive else {suffix}
                for variant in variants:
                    lookaheads.append("'" + variant)
                    lookaheads.extend(variant[i:] for i in range(len(variant)))
        return tuple(dict.fromkeys(lookaheads))

    def split_text(self, text: str) -> Tuple[List[str], List[int]]:
        """Split decoded text; also return the character offsets cut by the first stage"""
        pieces = self.stages[0].split(text) if text else []
        first_cuts, offset = [], 0
        for piece in pieces[:-1]:
            offset += len(piece)
            first_cuts.append(offset)
        for stage in self.stages[1:]:
            pieces = [sub for piece in pieces for sub in stage.split(piece)]
        return pieces, first_cuts

    def pretokenize(self, data: bytes) -> List[bytes]:
        pieces, _ = self.split_text(decode_text(data))
        return [encode_text(piece) for piece in pieces]

    def boundaries(self, text: str) -> Tuple[FrozenSet[int], FrozenSet[int]]:
        """Interior character offsets where pieces meet, and the subset cut by the first stage"""
        pieces, first_cuts = self.split_text(text)
        cuts, offset = set(), 0
        for piece in pieces[:-1]:
            offset += len(piece)
            cuts.add(offset)
        return frozenset(cuts), frozenset(first_cuts)


def make_stage(pattern: str) -> SplitStage:
    rules = []
    for alternative in split_alternatives(pattern):
        rule = KNOWN_ALTERNATIVES.get(alternative)
        if rule is None:
            raise UnsupportedPretokenizerError(
                f"split pattern alternative {alternative!r} is outside the supported rule classes"
            )
        rules.append(rule)
    return SplitStage(pattern, tuple(rules))


def build_rule_set(spec: Optional[dict]) -> Optional[PretokenRuleSet]:
    """Map the pre_tokenizer section of a tokenizer definition onto rule stages"""
    if spec is None:
        return None
    stages: List[SplitStage] = []
    byte_level = False
    pending = deque([spec])
    while pending:
        item = pending.popleft()
        kind = item.get("type")
        if kind == "Sequence":
            pending.extendleft(reversed(item.get("pretokenizers", [])))
        elif kind == "ByteLevel":
            if item.get("add_prefix_space"):
                raise UnsupportedPretokenizerError("ByteLevel with add_prefix_space is not supported")
            byte_level = True
            if item.get("use_regex", True):
                stages.append(make_stage(GPT2_PATTERN))
        elif kind == "Split":
            behavior, invert = item.get("behavior"), item.get("invert", False)
            if not ((behavior == "Isolated" and not invert) or (behavior == "Removed" and invert)):
                raise UnsupportedPretokenizerError(f"Split behavior {behavior!r} (invert={invert}) is not supported")
            pattern = item.get("pattern", {})
            if "Regex" in pattern:
                stages.append(make_stage(pattern["Regex"]))
            else:
                raise UnsupportedPretokenizerError(f"Split pattern {pattern!r} is not a supported regex")
        elif kind == "Digits":
            stages.append(make_stage(r"\p{N}" if item.get("individual_digits") else r"\p{N}+"))
        else:
            raise UnsupportedPretokenizerError(f"unknown pretokenizer type {kind!r}")
    if not byte_level:
        raise UnsupportedPretokenizerError("tokenizer must be byte-level")
    if not stages:
        return None
    logger.debug("pretokenizer mapped to %d stage(s): %s", len(stages), [s.source for s in stages])
    return PretokenRuleSet(stages)


def pretokenize(text: bytes, rules: Optional[PretokenRuleSet]) -> List[bytes]:
    if not text:
        return []
    if rules is None:
        return [bytes(text)]
    return rules.pretokenize(bytes(text))


@dataclass(frozen=True)
class SplitHypothesis:
    """One way the unresolved region may end up split: absolute interior cut offsets"""
    boundaries: Tuple[int, ...] = ()

    def trailing_start(self, region_start: int) -> int:
        return self.boundaries[-1] if self.boundaries else region_start

    def closed_segments(self, region_start: int) -> List[Tuple[int, int]]:
        starts = (region_start,) + self.boundaries
        return list(zip(starts[:-1], starts[1:]))


@dataclass(frozen=True)
class SplitDecision:
    kind: str
    offset: int
    forced: Tuple[int, ...] = ()
    hypotheses: Tuple[SplitHypothesis, ...] = (SplitHypothesis(),)


class StreamingPretokenizer:
    """Online split state over a byte stream (one per covering tree)"""

    def __init__(self, rules: Optional[PretokenRuleSet], start: int = 0):
        self.rules = rules
        self.reset(start)

    def reset(self, start: int):
        self.region_start = start
        self.region = bytearray()
        self.hypotheses: Tuple[SplitHypothesis, ...] = (SplitHypothesis(),)
        self._last_forced = start
        self._settled: List[Tuple[int, int, bytes]] = []

    @property
    def end(self) -> int:
        return self.region_start + len(self.region)

    def region_bytes(self, start: int, end: Optional[int] = None) -> bytes:
        end = self.end if end is None else end
        return bytes(self.region[start - self.region_start:end - self.region_start])

    def _char_offsets(self, text: str) -> List[int]:
        offsets = [self.region_start]
        for ch in text:
            offsets.append(offsets[-1] + len(encode_text(ch)))
        return offsets

    def advance(self, byte: int, hold: Optional[int] = None) -> SplitDecision:
        """Consume one byte and classify the boundary in front of its character.

        ``hold`` is the start of an added-token match still in progress; nothing
        at or past it is settled.
        """
        self.region.append(byte)
        if self.rules is None:
            return SplitDecision(NO_SPLIT, self.end - 1, hypotheses=self.hypotheses)

        pending = incomplete_utf8_tail(self.region)
        if pending:
            kind = AMBIGUOUS if pending == 1 else NO_SPLIT
            return SplitDecision(kind, self.end - 1, hypotheses=self.hypotheses)

        text = decode_text(bytes(self.region))
        offsets = self._char_offsets(text)
        frontier = offsets[-2]

        cut_sets, safe_sets = [], []
        for lookahead in self.rules.lookaheads:
            cuts, safe = self.rules.boundaries(text + lookahead)
            cut_sets.append(frozenset(offsets[c] for c in cuts if 0 < c < len(text)))
            safe_sets.append(frozenset(offsets[c] for c in safe if 0 < c < len(text)))
        constraint_sets = list(cut_sets)
        if hold is not None and hold < self.end:
            held = decode_text(self.region_bytes(self.region_start, hold))
            held_offsets = self._char_offsets(held)
            cuts, safe = self.rules.boundaries(held)
            constraint_sets.append(frozenset(held_offsets[c] for c in cuts) | {hold})
            safe_sets.append(frozenset(held_offsets[c] for c in safe) | {hold})

        common = frozenset.intersection(*constraint_sets)
        forced = tuple(sorted(b for b in common if b > self._last_forced))
        if forced:
            self._last_forced = forced[-1]

        if frontier == self.region_start:
            kind = NO_SPLIT
        elif all(frontier in cuts for cuts in cut_sets):
            kind = FORCED_SPLIT
        elif any(frontier in cuts for cuts in cut_sets):
            kind = AMBIGUOUS
        else:
            kind = NO_SPLIT

        # settle at the last cut before which every continuation agrees
        safe = frozenset.intersection(*safe_sets)
        settle_at = None
        for b in sorted(common):
            if any(frozenset(c for c in cuts if c <= b) != frozenset(c for c in common if c <= b)
                   for cuts in constraint_sets):
                break
            if b in safe:
                settle_at = b
        if settle_at is not None:
            self._settle(settle_at, sorted(c for c in common if c <= settle_at))

        distinct = {tuple(sorted(b for b in cuts if b > self.region_start)) for cuts in cut_sets}
        self.hypotheses = tuple(SplitHypothesis(b) for b in sorted(distinct))
        if len(self.hypotheses) > 1:
            logger.debug("split ambiguity at %d: %d hypotheses", frontier, len(self.hypotheses))
        return SplitDecision(kind, frontier, forced, self.hypotheses)

    def _settle(self, offset: int, cuts: Sequence[int]):
        starts = [self.region_start] + list(cuts)
        self._settled.extend((a, b, self.region_bytes(a, b)) for a, b in zip(starts[:-1], starts[1:]))
        del self.region[:offset - self.region_start]
        self.region_start = offset

    def take_settled(self) -> List[Tuple[int, int, bytes]]:
        """Pretokens closed for good since the last call, as (start, end, bytes)"""
        settled, self._settled = self._settled, []
        return settled

    def segment_cuts(self, extra: bytes = b"") -> FrozenSet[int]:
        """Absolute cut offsets of the region followed by ``extra`` under end-of-text"""
        if self.rules is None:
            return frozenset()
        text = decode_text(bytes(self.region) + bytes(extra))
        offsets = self._char_offsets(text)
        cuts, _ = self.rules.boundaries(text)
        return frozenset(offsets[c] for c in cuts)

    def finish(self) -> List[bytes]:
        """Close the region under end-of-text and start a fresh one"""
        pieces = pretokenize(bytes(self.region), self.rules)
        self.reset(self.end)
        return pieces


@dataclass(eq=False)
class _MatchNode:
    children: Dict[int, "_MatchNode"] = field(default_factory=dict)
    fail: Optional["_MatchNode"] = None
    token: Optional[int] = None
    depth: int = 0

    def __deepcopy__(self, memo):
        # automaton nodes are never mutated after build
        return self


@dataclass(frozen=True)
class ScanResult:
    full: Tuple[Tuple[int, int], ...] = ()      # (start offset, token id)
    partial: Tuple[Tuple[int, int], ...] = ()   # (start offset, matched length)


@dataclass
class MatcherState:
    node: _MatchNode
    position: int = 0


class AddedTokenMatcher:
    """Aho-Corasick automaton over added-token byte strings.

    Scanning reports every pattern ending at the current byte and every
    pattern prefix that is still alive, including overlapping ones.
    """

    def __init__(self, patterns: Dict[int, bytes]):
        self._root = _MatchNode()
        self.patterns = {tid: bytes(p) for tid, p in patterns.items() if p}
        for tid, pattern in self.patterns.items():
            node = self._root
            for i, byte in enumerate(pattern):
                if byte not in node.children:
                    node.children[byte] = _MatchNode(depth=i + 1)
                node = node.children[byte]
            node.token = tid
        self._build()

    def _build(self):
        queue = deque()
        for child in self._root.children.values():
            child.fail = self._root
            queue.append(child)
        while queue:
            node = queue.popleft()
            for byte, child in node.children.items():
                fallback = node.fail
                while fallback is not None and byte not in fallback.children:
                    fallback = fallback.fail
                child.fail = fallback.children[byte] if fallback is not None else self._root
                queue.append(child)

    def __bool__(self) -> bool:
        return bool(self.patterns)

    def start(self, position: int = 0) -> MatcherState:
        return MatcherState(self._root, position)

    def _step(self, node: _MatchNode, byte: int) -> _MatchNode:
        while node is not self._root and byte not in node.children:
            node = node.fail
        return node.children.get(byte, self._root)

    def scan(self, state: MatcherState, byte: int) -> ScanResult:
        state.node = self._step(state.node, byte)
        state.position += 1
        full, partial = [], []
        node = state.node
        while node is not self._root:
            start = state.position - node.depth
            if node.token is not None:
                full.append((start, node.token))
            if node.children:
                partial.append((start, node.depth))
            node = node.fail
        return ScanResult(tuple(full), tuple(partial))

    def completions(self, prefix: bytes) -> List[int]:
        """Tokens whose pattern starts with ``prefix``"""
        return [tid for tid, pattern in self.patterns.items() if pattern.startswith(prefix)]

    def find_all(self, text: bytes) -> List[Tuple[int, int, int]]:
        """Leftmost-longest non-overlapping matches as (start, end, token)"""
        if not self.patterns:
            return []
        state = self.start()
        found = []
        for byte in text:
            result = self.scan(state, byte)
            for start, tid in result.full:
                found.append((start, state.position, tid))
        found.sort(key=lambda m: (m[0], m[0] - m[1]))
        chosen, last_end = [], 0
        for start, end, tid in found:
            if start >= last_end:
                chosen.append((start, end, tid))
                last_end = end
        return chosen

    def split(self, text: bytes) -> Iterable[Tuple[bytes, Optional[int]]]:
        """Yield plain-text runs (token None) and added-token matches in order"""
        last = 0
        for start, end, tid in self.find_all(text):
            if start > last:
                yield text[last:start], None
            yield text[start:end], tid
            last = end
        if last < len(text):
            yield text[last:], None
