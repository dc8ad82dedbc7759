"""
Byte-level BPE tokenizer: loading, merge-list normal form, encode and decode

Loads the ByteLevel BPE subset of the tokenizer.json format (see README) and
encodes with rank-ordered merges inside each pretoken.
"""

import heapq
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

from errors import (
    MalformedMergeError,
    TokenizerLoadError,
    UnknownByteError,
    UnknownTokenError,
    UnsupportedModelError,
)
from pretokenizer import AddedTokenMatcher, PretokenRuleSet, build_rule_set, pretokenize

logger = logging.getLogger(__name__)


def bytes_to_unicode() -> Dict[int, str]:
    """The ByteLevel byte -> printable character map used by tokenizer.json vocabularies"""
    printable = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("¡"), ord("¬") + 1))
        + list(range(ord("®"), ord("ÿ") + 1))
    )
    chars = printable[:]
    extra = 0
    for b in range(256):
        if b not in printable:
            printable.append(b)
            chars.append(256 + extra)
            extra += 1
    return {b: chr(c) for b, c in zip(printable, chars)}


BYTE_TO_UNIT = bytes_to_unicode()
UNIT_TO_BYTE = {c: b for b, c in BYTE_TO_UNIT.items()}
PRETOKEN_CACHE_SIZE = 1 << 16


def unit_string_to_bytes(text: str) -> bytes:
    try:
        return bytes(UNIT_TO_BYTE[c] for c in text)
    except KeyError as e:
        raise TokenizerLoadError(f"vocab entry {text!r} has character {e.args[0]!r} outside the ByteLevel alphabet")


def bytes_to_unit_string(data: bytes) -> str:
    return "".join(BYTE_TO_UNIT[b] for b in data)


@dataclass(frozen=True)
class MergeRule:
    left: int
    right: int
    result: int
    rank: int


def _heap_resolve(data: bytes, vocab: Dict[bytes, int], order: Dict[Tuple[int, int], int],
                  results: Dict[Tuple[int, int], int], resolve_map: Dict[int, Tuple[int, int]]) -> List[int]:
    """Lowest-rank-first merging over a linked list, recording which pair formed each token"""
    tokens = [vocab[bytes([b])] for b in data]
    prev = list(range(-1, len(tokens) - 1))
    nxt = list(range(1, len(tokens) + 1))
    nxt[-1] = -1
    alive = [True] * len(tokens)
    queue = []

    def push(i):
        j = nxt[i]
        if j != -1 and (rank := order.get((tokens[i], tokens[j]))) is not None:
            heapq.heappush(queue, (rank, i, tokens[i], tokens[j]))

    for i in range(len(tokens)):
        push(i)
    while queue:
        _, i, a, b = heapq.heappop(queue)
        j = nxt[i]
        if not alive[i] or j == -1 or tokens[i] != a or tokens[j] != b:
            continue
        merged = results[a, b]
        known = resolve_map.setdefault(merged, (a, b))
        if known != (a, b):
            logger.warning("token %d is formed by both %s and %s; keeping the first", merged, known, (a, b))
        tokens[i] = merged
        alive[j] = False
        nxt[i] = nxt[j]
        if nxt[i] != -1:
            prev[nxt[i]] = i
        if prev[i] != -1:
            push(prev[i])
        push(i)
    return [t for t, live in zip(tokens, alive) if live]


def normalize_merge_list(raw_merges: Sequence[MergeRule], vocab: Dict[bytes, int]) -> Tuple[List[MergeRule], Set[int]]:
    """Rewrite a merge list into normal form.

    Every token keeps the single merge the heap reference actually uses to build
    it, tokens the heap never builds from their own bytes are reported as
    unreachable, and merges are reordered so that both inputs are formed first.
    """
    order: Dict[Tuple[int, int], int] = {}
    results: Dict[Tuple[int, int], int] = {}
    for rule in raw_merges:
        # duplicate pairs keep their first rank, like the reference encoder
        order.setdefault((rule.left, rule.right), rule.rank)
        results.setdefault((rule.left, rule.right), rule.result)

    resolve_map: Dict[int, Tuple[int, int]] = {}
    unreachable: Set[int] = set()
    for data, tid in sorted(vocab.items(), key=lambda item: len(item[0]), reverse=True):
        if len(data) == 1 or tid in resolve_map:
            continue
        if any(bytes([b]) not in vocab for b in data):
            unreachable.add(tid)
            continue
        _heap_resolve(data, vocab, order, results, resolve_map)
        if tid not in resolve_map:
            unreachable.add(tid)

    memo: Dict[int, tuple] = {}

    def merge_order(tid: int) -> tuple:
        if tid in unreachable:
            return (float("inf"),)
        pair = resolve_map.get(tid)
        if pair is None:
            return (-1,)
        if tid in memo:
            return memo[tid]
        rank = order[pair]
        inputs = max(merge_order(pair[0]), merge_order(pair[1]))
        key = (*inputs, rank) if rank <= inputs[-1] else (*inputs[:-1], rank)
        while len(key) >= 2 and key[-1] > key[-2]:
            key = (*key[:-2], key[-1])
        memo[tid] = key
        return key

    merges = []
    for tid in sorted(vocab.values(), key=merge_order):
        if tid in resolve_map and tid not in unreachable:
            left, right = resolve_map[tid]
            merges.append(MergeRule(left, right, tid, len(merges)))
    return merges, unreachable


class Tokenizer:
    """An immutable byte-level BPE tokenizer in merge-list normal form"""

    def __init__(
        self,
        vocab: Dict[bytes, int],
        merges: Iterable[Tuple[int, int, int]],
        pretokenizer: Optional[PretokenRuleSet] = None,
        specials: Optional[Dict[int, str]] = None,
        added: Optional[Dict[int, bytes]] = None,
        ignore_merges: bool = False,
        pretokenizer_spec: Optional[dict] = None,
        pretoken_cache_size: int = PRETOKEN_CACHE_SIZE,
    ):
        self.vocab = dict(vocab)
        self.id_to_bytes = {tid: data for data, tid in self.vocab.items()}
        if len(self.id_to_bytes) != len(self.vocab):
            raise TokenizerLoadError("vocab maps two byte strings to the same id")
        self.specials = dict(specials or {})
        self.added = {tid: bytes(data) for tid, data in (added or {}).items()}
        self.ignore_merges = ignore_merges
        self.pretokenizer = pretokenizer
        self.pretokenizer_spec = pretokenizer_spec

        self.raw_merges = []
        for rank, (left, right, result) in enumerate(merges):
            for tid in (left, right, result):
                if tid not in self.id_to_bytes:
                    raise MalformedMergeError(f"merge {rank} references unknown token {tid}")
            if self.id_to_bytes[result] != self.id_to_bytes[left] + self.id_to_bytes[right]:
                raise MalformedMergeError(f"merge {rank}: token {result} is not the concatenation of {left} and {right}")
            self.raw_merges.append(MergeRule(left, right, result, rank))

        self.merges, self.unreachable = normalize_merge_list(self.raw_merges, self.vocab)
        self.merge_ranks = {(m.left, m.right): m.rank for m in self.merges}
        self.merge_results = {(m.left, m.right): m.result for m in self.merges}
        self.formed_by = {m.result: m for m in self.merges}
        self.byte_alphabet = {data[0]: tid for data, tid in self.vocab.items() if len(data) == 1}

        all_ids = list(self.id_to_bytes) + list(self.specials) + list(self.added)
        self.vocab_size = max(all_ids) + 1 if all_ids else 0
        self.trie: dict = {}
        for data, tid in self.vocab.items():
            node = self.trie
            for b in data:
                node = node.setdefault(b, {})
            node[None] = tid
        self.added_matcher = AddedTokenMatcher(self.added)
        # least recently used pretoken encodings, evicted past pretoken_cache_size
        self._pretoken_cache: "OrderedDict[bytes, Tuple[int, ...]]" = OrderedDict()
        self.pretoken_cache_size = pretoken_cache_size

        dropped = len(self.raw_merges) - len(self.merges)
        logger.info(
            "tokenizer ready: %d tokens, %d merges (%d dropped), %d unreachable, %d special, %d added",
            len(self.vocab), len(self.merges), dropped, len(self.unreachable), len(self.specials), len(self.added),
        )

    def is_special(self, token: int) -> bool:
        return token in self.specials

    def is_added(self, token: int) -> bool:
        return token in self.added

    def token_bytes(self, token: int) -> bytes:
        if token in self.id_to_bytes:
            return self.id_to_bytes[token]
        if token in self.added:
            return self.added[token]
        if token in self.specials:
            return b""
        raise UnknownTokenError(token)

    def byte_token(self, byte: int) -> int:
        try:
            return self.byte_alphabet[byte]
        except KeyError:
            raise UnknownByteError(byte)

    def pretokenize(self, text: bytes) -> List[bytes]:
        return pretokenize(text, self.pretokenizer)

    def encode_pretoken(self, data: bytes) -> List[int]:
        """BPE inside one pretoken: apply merges in rank order, leftmost occurrence first"""
        cached = self._pretoken_cache.get(data)
        if cached is not None:
            self._pretoken_cache.move_to_end(data)
            return list(cached)
        if self.ignore_merges and data in self.vocab:
            ids = [self.vocab[data]]
        else:
            ids = [self.byte_token(b) for b in data]
            while len(ids) > 1:
                pairs = set(zip(ids, ids[1:]))
                pair = min(pairs, key=lambda p: self.merge_ranks.get(p, float("inf")))
                if pair not in self.merge_ranks:
                    break
                ids = self._merge(ids, pair, self.merge_results[pair])
        if self.pretoken_cache_size > 0:
            self._pretoken_cache[data] = tuple(ids)
            while len(self._pretoken_cache) > self.pretoken_cache_size:
                self._pretoken_cache.popitem(last=False)
        return ids

    @staticmethod
    def _merge(ids: List[int], pair: Tuple[int, int], result: int) -> List[int]:
        merged, i = [], 0
        while i < len(ids):
            if i < len(ids) - 1 and ids[i] == pair[0] and ids[i + 1] == pair[1]:
                merged.append(result)
                i += 2
            else:
                merged.append(ids[i])
                i += 1
        return merged

    def encode_text(self, text: bytes) -> List[int]:
        """Encode text that holds no added tokens"""
        ids = []
        for piece in self.pretokenize(text):
            ids.extend(self.encode_pretoken(piece))
        return ids

    def encode(self, text: Union[bytes, str]) -> List[int]:
        if isinstance(text, str):
            text = text.encode("utf-8")
        ids = []
        for piece, tid in self.added_matcher.split(bytes(text)):
            if tid is None:
                ids.extend(self.encode_text(piece))
            else:
                ids.append(tid)
        return ids

    def decode(self, tokens: Iterable[int]) -> bytes:
        return b"".join(self.token_bytes(t) for t in tokens)

    def to_definition(self) -> dict:
        """A tokenizer.json document that loads back into an equivalent tokenizer"""
        added_tokens = [
            {"id": tid, "content": content, "special": True} for tid, content in sorted(self.specials.items())
        ] + [
            {"id": tid, "content": data.decode("utf-8"), "special": False} for tid, data in sorted(self.added.items())
        ]
        byte_level = {"type": "ByteLevel", "add_prefix_space": False, "use_regex": False}
        pre = self.pretokenizer_spec or byte_level
        return {
            "added_tokens": added_tokens,
            "normalizer": None,
            "pre_tokenizer": pre,
            "model": {
                "type": "BPE",
                "ignore_merges": self.ignore_merges,
                "vocab": {bytes_to_unit_string(data): tid for data, tid in sorted(self.vocab.items(), key=lambda x: x[1])},
                "merges": [
                    [bytes_to_unit_string(self.id_to_bytes[m.left]), bytes_to_unit_string(self.id_to_bytes[m.right])]
                    for m in self.raw_merges
                ],
            },
        }


def _parse_merge(entry, index: int) -> Tuple[str, str]:
    if isinstance(entry, str):
        parts = entry.split(" ")
        if len(parts) != 2:
            raise MalformedMergeError(f"merge {index} {entry!r} is not a 'left right' pair")
        return parts[0], parts[1]
    if isinstance(entry, (list, tuple)) and len(entry) in (2, 3):
        if len(entry) == 3 and entry[2] != entry[0] + entry[1]:
            raise MalformedMergeError(f"merge {index} {entry!r} does not produce the concatenation of its pair")
        return entry[0], entry[1]
    raise MalformedMergeError(f"merge {index} {entry!r} has an unknown shape")


def tokenizer_from_definition(definition: dict) -> Tokenizer:
    model = definition.get("model") or {}
    if model.get("type", "BPE") != "BPE":
        raise UnsupportedModelError(f"model type {model.get('type')!r} is not BPE")
    if model.get("byte_fallback"):
        raise UnsupportedModelError("byte_fallback (character-level BPE) is not supported")
    if model.get("continuing_subword_prefix") or model.get("end_of_word_suffix"):
        raise UnsupportedModelError("subword prefixes and word suffixes are not supported")
    if model.get("dropout"):
        raise UnsupportedModelError("BPE dropout is not supported")
    if definition.get("normalizer") is not None:
        raise TokenizerLoadError("normalizers are not supported")
    post = definition.get("post_processor")
    if post is not None and post.get("type") != "ByteLevel":
        logger.warning("ignoring post_processor of type %s", post.get("type"))

    specials, added = {}, {}
    for entry in definition.get("added_tokens") or []:
        for flag in ("lstrip", "rstrip", "single_word"):
            if entry.get(flag):
                raise TokenizerLoadError(f"added token {entry.get('content')!r} uses unsupported flag {flag}")
        if entry.get("special"):
            specials[entry["id"]] = entry["content"]
        else:
            added[entry["id"]] = entry["content"].encode("utf-8")
    excluded = set(specials) | set(added)

    vocab = {}
    for unit_string, tid in model.get("vocab", {}).items():
        if tid not in excluded:
            vocab[unit_string_to_bytes(unit_string)] = tid

    merges = []
    for index, entry in enumerate(model.get("merges", [])):
        left, right = _parse_merge(entry, index)
        lb, rb = unit_string_to_bytes(left), unit_string_to_bytes(right)
        for side in (lb, rb):
            if side not in vocab:
                raise MalformedMergeError(f"merge {index} references {side!r}, which is not in the vocab")
        if lb + rb not in vocab:
            raise MalformedMergeError(f"merge {index} produces {lb + rb!r}, which is not in the vocab")
        merges.append((vocab[lb], vocab[rb], vocab[lb + rb]))

    pre_spec = definition.get("pre_tokenizer")
    rules = build_rule_set(pre_spec)
    return Tokenizer(
        vocab,
        merges,
        pretokenizer=rules,
        specials=specials,
        added=added,
        ignore_merges=bool(model.get("ignore_merges")),
        pretokenizer_spec=pre_spec,
    )


def load_tokenizer(source: Union[str, Path, dict]) -> Tokenizer:
    """Load a tokenizer.json file (or an already parsed document)"""
    if isinstance(source, dict):
        return tokenizer_from_definition(source)
    path = Path(source)
    if path.is_dir():
        path = path / "tokenizer.json"
    try:
        with open(path, "r", encoding="utf-8") as f:
            definition = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise TokenizerLoadError(f"cannot read tokenizer file {path}: {e}")
    logger.info("loading tokenizer from %s", path)
    return tokenizer_from_definition(definition)
