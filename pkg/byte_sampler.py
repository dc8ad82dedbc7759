"""
Byte-level conditioning and sampling on top of a token-level language model

Masses are log-probabilities. A covering tree's groups are scored with one
model call per node, then scattered onto 257 byte events (bytes 0-255 plus
end-of-text) and, when asked for, one extra event per special token.
"""

import codecs
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from bpe_tokenizer import Tokenizer
from covering_tree import ValidCoveringTree
from errors import ConfigError, DeadTreeError
from language_models import BOS, LanguageModel
from validity import NO_BYTE, ValidityCache, is_sequence_valid, valid_successors

logger = logging.getLogger(__name__)

EOS_EVENT = 256
BYTE_EVENTS = 257

Prompt = Union[bytes, str, Sequence[Union[bytes, int]]]


@dataclass(frozen=True)
class SamplerConfig:
    """Decoding transform settings; temperature 0 means greedy (argmax)"""
    temperature: float = 1.0
    top_k: Optional[int] = None
    top_p: Optional[float] = None
    transform_level: str = "byte"
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError("temperature must be non-negative")
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError("top_k must be at least 1")
        if self.top_p is not None and not 0 < self.top_p <= 1:
            raise ConfigError("top_p must be in (0, 1]")
        if self.transform_level not in ("byte", "token"):
            raise ConfigError(f"transform_level must be 'byte' or 'token', got {self.transform_level!r}")

    @property
    def identity(self) -> bool:
        return self.temperature == 1.0 and self.top_k is None and self.top_p in (None, 1.0)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def apply_transform(cfg: Optional[SamplerConfig], logprobs: np.ndarray) -> np.ndarray:
    """Temperature, then top-k, then top-p, then renormalize"""
    logprobs = np.asarray(logprobs, dtype=np.float64)
    if cfg is None or cfg.identity:
        return logprobs - logsumexp(logprobs)
    if cfg.temperature == 0:
        out = np.full_like(logprobs, -np.inf)
        out[int(np.argmax(logprobs))] = 0.0
        return out
    out = logprobs / cfg.temperature
    if cfg.top_k is not None and cfg.top_k < np.count_nonzero(np.isfinite(out)):
        keep = np.zeros(len(out), dtype=bool)
        keep[np.argsort(-out, kind="stable")[:cfg.top_k]] = True
        out = np.where(keep, out, -np.inf)
    out = out - logsumexp(out)
    if cfg.top_p is not None and cfg.top_p < 1:
        order = np.argsort(-out, kind="stable")
        cumulative = np.cumsum(np.exp(out[order]))
        count = int(np.searchsorted(cumulative, cfg.top_p - 1e-12)) + 1
        keep = np.zeros(len(out), dtype=bool)
        keep[order[:count]] = True
        out = np.where(keep, out, -np.inf)
        out = out - logsumexp(out)
    return out


def sample_index(logprobs: np.ndarray, rng: np.random.Generator) -> int:
    probs = np.exp(logprobs - logsumexp(logprobs))
    return int(rng.choice(len(probs), p=probs / probs.sum()))


@dataclass
class ByteDistribution:
    """Log masses over bytes, end-of-text and optional special-token events"""
    logprobs: np.ndarray
    specials: Tuple[int, ...] = ()

    @property
    def log_mass(self) -> float:
        return float(logsumexp(self.logprobs))

    def normalized(self) -> "ByteDistribution":
        mass = self.log_mass
        if np.isneginf(mass):
            raise DeadTreeError(-1, "no mass on any next byte")
        return ByteDistribution(self.logprobs - mass, self.specials)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logprobs)

    def event(self, index: int) -> Union[int, str, Tuple[str, int]]:
        if index < 256:
            return index
        if index == EOS_EVENT:
            return "EOS"
        return ("special", self.specials[index - BYTE_EVENTS])

    def label(self, index: int) -> str:
        event = self.event(index)
        if isinstance(event, int):
            ch = chr(event)
            return repr(ch) if 32 <= event < 127 else f"0x{event:02x}"
        if event == "EOS":
            return "<eos>"
        return f"<special {event[1]}>"

    def top(self, n: int = 10) -> List[Tuple[str, float]]:
        order = np.argsort(-self.logprobs, kind="stable")[:n]
        return [(self.label(int(i)), float(np.exp(self.logprobs[i]))) for i in order if np.isfinite(self.logprobs[i])]


class ByteSampler:
    """Byte-level view of one token-level model and its tokenizer"""

    def __init__(self, lm: LanguageModel, tokenizer: Tokenizer, cache: Optional[ValidityCache] = None,
                 special_events: bool = False):
        if lm.vocab_size != tokenizer.vocab_size:
            raise ConfigError(f"model vocabulary {lm.vocab_size} != tokenizer vocabulary {tokenizer.vocab_size}")
        self.lm = lm
        self.tokenizer = tokenizer
        self.cache = cache or ValidityCache(tokenizer)
        self.special_events = special_events
        self.specials = tuple(sorted(tokenizer.specials)) if special_events else ()
        self._scores: Dict[Optional[SamplerConfig], Dict[Tuple[int, ...], float]] = {}
        self._special_mask = np.zeros(tokenizer.vocab_size, dtype=bool)
        self._special_mask[list(tokenizer.specials)] = True

    # scoring

    def _token_cfg(self, cfg: Optional[SamplerConfig]) -> Optional[SamplerConfig]:
        if cfg is None or cfg.identity or cfg.transform_level != "token":
            return None
        return cfg

    def token_logprobs(self, context: Sequence[int], cfg: Optional[SamplerConfig] = None) -> np.ndarray:
        logprobs = self.lm.next_logprobs(context)
        token_cfg = self._token_cfg(cfg)
        return logprobs if token_cfg is None else apply_transform(token_cfg, logprobs)

    def score(self, context: Sequence[int], cfg: Optional[SamplerConfig] = None) -> float:
        """Log-probability of the token path ``context`` (starting with BOS)"""
        token_cfg = self._token_cfg(cfg)
        scores = self._scores.setdefault(token_cfg, {(BOS,): 0.0})
        context = tuple(context)
        known = len(context)
        while context[:known] not in scores:
            known -= 1
        total = scores[context[:known]]
        for i in range(known, len(context)):
            total += float(self.token_logprobs(context[:i], token_cfg)[context[i]])
            scores[context[:i + 1]] = total
        return total

    # trees

    def new_tree(self) -> ValidCoveringTree:
        return ValidCoveringTree(self.tokenizer, self.cache)

    def tree_for(self, prompt: Prompt) -> ValidCoveringTree:
        tree = self.new_tree()
        tree.feed(prompt.encode("utf-8") if isinstance(prompt, str) else prompt)
        return tree

    def byte_masses(self, tree: ValidCoveringTree, cfg: Optional[SamplerConfig] = None,
                    exact: bool = False) -> ByteDistribution:
        """Unnormalized next-event masses of the prompt held by ``tree``.

        Overhanging tokens are only checked pairwise against their path unless
        ``exact`` is set, which also drops those that cannot stay canonical as
        complete text. The two agree for models that put no mass on
        non-canonical sequences; otherwise the default keeps that extra mass
        (see ``invalid_next_token_mass``).
        """
        out = np.full(BYTE_EVENTS + len(self.specials), -np.inf)
        head = (BOS,) + tuple(tree.trunk)
        eos = self.lm.eos
        for group in tree.cover_groups(exact=exact):
            context = head + group.path
            logprobs = self.token_logprobs(context, cfg)
            ids = np.flatnonzero(group.mask)
            np.logaddexp.at(out, self.cache.byte_at(group.tail)[ids], self.score(context, cfg) + logprobs[ids])
        first = self.cache.byte_at(0)
        for boundary in tree.boundary_paths():
            context = head + boundary.path
            logprobs = self.token_logprobs(context, cfg)
            base = self.score(context, cfg)
            ids = np.flatnonzero(boundary.mask & (first != NO_BYTE))
            np.logaddexp.at(out, first[ids], base + logprobs[ids])
            if boundary.eos_ok:
                out[EOS_EVENT] = np.logaddexp(out[EOS_EVENT], base + logprobs[eos])
                for i, special in enumerate(self.specials):
                    out[BYTE_EVENTS + i] = np.logaddexp(out[BYTE_EVENTS + i], base + logprobs[special])
        return ByteDistribution(out, self.specials)

    def next_byte_distribution(self, tree: ValidCoveringTree, cfg: Optional[SamplerConfig] = None) -> ByteDistribution:
        masses = self.byte_masses(tree, cfg)
        if np.isneginf(masses.log_mass):
            raise DeadTreeError(tree.consumed, "no continuation has mass")
        if cfg is not None and cfg.transform_level == "byte" and not cfg.identity:
            return ByteDistribution(apply_transform(cfg, masses.logprobs), masses.specials)
        return masses.normalized()

    def next_char_distribution(self, tree: ValidCoveringTree, cfg: Optional[SamplerConfig] = None
                               ) -> Dict[Union[str, bytes, Tuple[str, int]], float]:
        """Probability of each next UTF-8 character, chaining byte distributions over continuation bytes.

        Keys are one-character strings, ``"EOS"``, ``("special", id)`` and, for
        byte runs that cannot be or finish a valid character, their raw bytes.
        ``tree`` is not advanced.
        """
        out: Dict[Union[str, bytes, Tuple[str, int]], float] = {}
        self._expand_char(tree, b"", 0.0, cfg, out)
        return out

    def _expand_char(self, tree: ValidCoveringTree, pending: bytes, logp: float,
                     cfg: Optional[SamplerConfig], out: dict):
        dist = self.next_byte_distribution(tree, cfg)
        for index in np.flatnonzero(np.isfinite(dist.logprobs)):
            mass = logp + float(dist.logprobs[index])
            if index >= 256:
                key = pending or dist.event(int(index))
            else:
                data = pending + bytes([index])
                try:
                    key = codecs.getincrementaldecoder("utf-8")().decode(data, final=False) or None
                except UnicodeDecodeError:
                    key = data
                if key is None:
                    child = tree.fork()
                    child.feed_byte(int(index))
                    self._expand_char(child, data, mass, cfg, out)
                    continue
            out[key] = out.get(key, 0.0) + math.exp(mass)

    def invalid_next_token_mass(self, tokens: Sequence[int], exact: bool = False) -> float:
        """Probability the model gives to next tokens that would make ``tokens`` non-canonical.

        Without ``exact`` a token counts as invalid when it fails the pair check
        against the last token, which is the whole story only without a
        pretokenizer. ``exact`` checks every token against the whole sequence.
        """
        tokens = [int(t) for t in tokens]
        logprobs = self.lm.next_logprobs((BOS,) + tuple(tokens))
        if exact:
            valid = self._special_mask.copy()
            for t in list(self.tokenizer.id_to_bytes) + list(self.tokenizer.added):
                valid[t] = is_sequence_valid(tokens + [t], self.tokenizer, self.cache)
        elif tokens:
            valid = valid_successors(tokens[-1], self.tokenizer, self.cache) | self._special_mask
        else:
            valid = self.cache.canonical | self.cache.added | self._special_mask
        invalid = np.append(~valid, False)
        if not invalid.any():
            return 0.0
        return float(np.exp(logsumexp(logprobs[invalid])))

    def leaf_masses(self, tree: ValidCoveringTree, cfg: Optional[SamplerConfig] = None
                    ) -> List[Tuple[Tuple[int, ...], np.ndarray, np.ndarray]]:
        """Per leaf group: (path, token ids, log masses including the path)"""
        head = (BOS,) + tuple(tree.trunk)
        found = []
        for group in tree.leaves():
            context = head + group.path
            ids = np.flatnonzero(group.mask)
            masses = self.score(context, cfg) + self.token_logprobs(context, cfg)[ids]
            found.append((group.path, ids, masses))
        return found

    def prefix_logprob(self, prompt: Prompt, tree: Optional[ValidCoveringTree] = None) -> float:
        """Log-probability that a model sample decodes to text starting with ``prompt``"""
        tree = tree or self.tree_for(prompt)
        if tree.fresh:
            return self.score((BOS,) + tuple(tree.trunk))
        masses = [m for _, _, m in self.leaf_masses(tree) if len(m)]
        if not masses:
            return float("-inf")
        return float(logsumexp(np.concatenate(masses)))

    def naive_next_byte_distribution(self, prompt: Prompt) -> ByteDistribution:
        """Condition on encode(prompt) and group next-token mass by first byte"""
        text = prompt.encode("utf-8") if isinstance(prompt, str) else bytes(prompt)
        logprobs = self.lm.next_logprobs((BOS,) + tuple(self.tokenizer.encode(text)))
        out = np.full(BYTE_EVENTS, -np.inf)
        first = self.cache.byte_at(0)
        ids = np.flatnonzero(first != NO_BYTE)
        np.logaddexp.at(out, first[ids], logprobs[ids])
        out[EOS_EVENT] = logprobs[self.lm.eos]
        return ByteDistribution(out).normalized()

    # sampling

    def sample_completion(self, prompt: Prompt, cfg: Optional[SamplerConfig] = None,
                          rng: Optional[np.random.Generator] = None, max_tokens: int = 64) -> List[int]:
        """Pick a covering of ``prompt`` by its mass, then sample tokens until EOS or budget"""
        cfg = cfg or SamplerConfig()
        rng = rng or cfg.rng()
        tree = self.tree_for(prompt)
        tokens = list(tree.trunk)
        if not tree.fresh:
            groups = self.leaf_masses(tree, cfg)
            if not groups or all(len(ids) == 0 for _, ids, _ in groups):
                raise DeadTreeError(tree.consumed, "prompt has no valid covering")
            flat = np.concatenate([m for _, _, m in groups])
            if cfg.transform_level == "byte":
                flat = apply_transform(cfg, flat)
            choice = sample_index(flat, rng)
            for path, ids, masses in groups:
                if choice < len(ids):
                    token = int(ids[choice])
                    break
                choice -= len(ids)
            tree.commit_token(token, path)
            tokens = list(tree.trunk)
            logger.debug("covering chosen: %s", tokens)
        for _ in range(max_tokens):
            logprobs = apply_transform(cfg, self.lm.next_logprobs((BOS,) + tuple(tokens)))
            token = sample_index(logprobs, rng)
            if token == self.lm.eos:
                break
            tokens.append(token)
        return tokens

    def generate(self, tree: ValidCoveringTree, n: int, cfg: Optional[SamplerConfig] = None,
                 rng: Optional[np.random.Generator] = None) -> Iterator[Tuple[int, float]]:
        """Sample up to ``n`` events into ``tree``; yields (event index, its log-probability)"""
        cfg = cfg or SamplerConfig()
        rng = rng or cfg.rng()
        for _ in range(n):
            dist = self.next_byte_distribution(tree, cfg)
            event = sample_index(dist.logprobs, rng)
            yield event, float(dist.logprobs[event])
            if event >= 256:
                return
            tree.feed_byte(event)

    def sample_bytes(self, prompt: Prompt, n: int, cfg: Optional[SamplerConfig] = None,
                     rng: Optional[np.random.Generator] = None) -> bytes:
        if n < 0:
            raise ConfigError("n must be non-negative")
        tree = self.tree_for(prompt)
        return bytes(event for event, _ in self.generate(tree, n, cfg, rng) if event < 256)


@dataclass
class CompositeSpec:
    """``ensemble`` averages member distributions; ``proxy`` is base + expert - anti_expert"""
    mode: str
    members: List[ByteSampler]
    weights: Optional[List[float]] = None

    def __post_init__(self):
        if self.mode == "ensemble":
            if not self.members:
                raise ConfigError("ensemble needs at least one model")
            if self.weights is None:
                self.weights = [1.0 / len(self.members)] * len(self.members)
            if len(self.weights) != len(self.members) or any(w <= 0 for w in self.weights):
                raise ConfigError("ensemble weights must be positive, one per model")
            if abs(sum(self.weights) - 1.0) > 1e-9:
                raise ConfigError(f"ensemble weights sum to {sum(self.weights)}, expected 1")
        elif self.mode == "proxy":
            if len(self.members) != 3:
                raise ConfigError("proxy needs exactly base, expert and anti-expert models")
        else:
            raise ConfigError(f"unknown composite mode {self.mode!r}")


def composite_next_byte(spec: CompositeSpec, trees: Sequence[ValidCoveringTree],
                        cfg: Optional[SamplerConfig] = None) -> ByteDistribution:
    """Combine per-model next-byte distributions over the same byte history"""
    dists = [member.next_byte_distribution(tree).logprobs[:BYTE_EVENTS] for member, tree in zip(spec.members, trees)]
    if spec.mode == "ensemble":
        combined = logsumexp(np.vstack(dists), axis=0, b=np.asarray(spec.weights)[:, None])
    else:
        base, expert, anti = dists
        # equal masses (both -inf included) and events the anti-expert rules out carry no correction
        shift = np.zeros_like(base)
        np.subtract(expert, anti, out=shift, where=np.isfinite(expert) & np.isfinite(anti) & (expert != anti))
        shift[np.isneginf(expert) & np.isfinite(anti)] = -np.inf
        combined = base + shift
    out = ByteDistribution(combined).normalized()
    if cfg is not None and not cfg.identity:
        out = ByteDistribution(apply_transform(cfg, out.logprobs))
    return out


@dataclass
class CompositeSampler:
    """Sampling session that advances every member's covering tree on each byte"""
    spec: CompositeSpec
    trees: List[ValidCoveringTree] = field(default_factory=list)

    def __post_init__(self):
        if not self.trees:
            self.trees = [member.new_tree() for member in self.spec.members]

    def feed(self, prompts: Union[Prompt, Sequence[Prompt]]):
        """Feed one shared prompt, or one prompt per member (special ids differ by tokenizer)"""
        if isinstance(prompts, (bytes, str)):
            prompts = [prompts] * len(self.trees)
        for tree, prompt in zip(self.trees, prompts):
            tree.feed(prompt.encode("utf-8") if isinstance(prompt, str) else prompt)

    def next_byte_distribution(self, cfg: Optional[SamplerConfig] = None) -> ByteDistribution:
        return composite_next_byte(self.spec, self.trees, cfg)

    def advance(self, byte: int):
        for tree in self.trees:
            tree.feed_byte(byte)

    def sample_bytes(self, n: int, cfg: Optional[SamplerConfig] = None,
                     rng: Optional[np.random.Generator] = None) -> bytes:
        cfg = cfg or SamplerConfig()
        rng = rng or cfg.rng()
        out = bytearray()
        for _ in range(n):
            event = sample_index(self.next_byte_distribution(cfg).logprobs, rng)
            if event >= 256:
                break
            out.append(event)
            self.advance(event)
        return bytes(out)
