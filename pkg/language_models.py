"""
Token-level language models

Every model maps a context (a token id sequence starting with BOS) to a
normalized log-probability vector of length ``vocab_size + 1``; the last entry
is end-of-sequence.
"""

import hashlib
import json
import logging
import struct
from abc import ABC, abstractmethod
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from bpe_tokenizer import Tokenizer
from errors import ConfigError, ReplayFormatError, ReplayMissError
from validity import ValidityCache, is_sequence_valid

logger = logging.getLogger(__name__)

BOS = -1

REPLAY_MAGIC = b"BCRP"
REPLAY_VERSION = 1
_REPLAY_HEADER = struct.Struct("<4sBI")
_REPLAY_LENGTH = struct.Struct("<I")

Context = Tuple[int, ...]


def normalize(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    return logits - logsumexp(logits)


def context_key(context: Sequence[int]) -> str:
    """Stable hash of a token id sequence: blake2b-128 over little-endian int32 ids"""
    data = np.asarray(context, dtype="<i4").tobytes()
    return hashlib.blake2b(data, digest_size=16).hexdigest()


class LanguageModel(ABC):
    """Deterministic next-token model bound to a vocabulary size"""

    def __init__(self, vocab_size: int, cache_size: int = 4096):
        self.vocab_size = vocab_size
        self.cache_size = cache_size
        self.calls = 0
        self._memo: "OrderedDict[Context, np.ndarray]" = OrderedDict()

    @property
    def eos(self) -> int:
        return self.vocab_size

    @abstractmethod
    def _logprobs(self, context: Context) -> np.ndarray:
        ...

    def next_logprobs(self, context: Sequence[int]) -> np.ndarray:
        context = tuple(int(t) for t in context)
        if not context or context[0] != BOS:
            raise ConfigError("context must start with BOS")
        cached = self._memo.get(context)
        if cached is not None:
            self._memo.move_to_end(context)
            return cached
        self.calls += 1
        result = self._logprobs(context)
        result.setflags(write=False)
        self._memo[context] = result
        if len(self._memo) > self.cache_size:
            self._memo.popitem(last=False)
        return result

    def seq_logprob(self, seq: Sequence[int], terminated: bool = False) -> float:
        """Chain-rule log-probability of ``seq`` (starting with BOS), plus EOS if terminated"""
        seq = list(seq)
        if not seq or seq[0] != BOS:
            raise ConfigError("sequence must start with BOS")
        total = 0.0
        for i in range(1, len(seq)):
            total += float(self.next_logprobs(seq[:i])[seq[i]])
        if terminated:
            total += float(self.next_logprobs(seq)[self.eos])
        return total


class UniformLM(LanguageModel):
    def _logprobs(self, context: Context) -> np.ndarray:
        return np.full(self.vocab_size + 1, -np.log(self.vocab_size + 1))


class TabularLM(LanguageModel):
    """Explicit context table with a default back-off and a finite horizon.

    Once a context holds ``horizon`` tokens after BOS, EOS has probability 1.
    With ``valid_support`` the model puts no mass on a token whose addition
    makes the sequence non-canonical, so every sequence it can emit is valid.
    """

    def __init__(
        self,
        vocab_size: int,
        horizon: int,
        table: Optional[Dict[Context, np.ndarray]] = None,
        default: Optional[np.ndarray] = None,
        tokenizer: Optional[Tokenizer] = None,
        valid_support: bool = False,
    ):
        super().__init__(vocab_size)
        if horizon < 0:
            raise ConfigError("horizon must be non-negative")
        if valid_support and tokenizer is None:
            raise ConfigError("valid_support needs a tokenizer")
        self.horizon = horizon
        self.table = {tuple(k): normalize(v) for k, v in (table or {}).items()}
        self.default = normalize(np.zeros(vocab_size + 1) if default is None else default)
        self.tokenizer = tokenizer
        self.valid_support = valid_support
        self._validity = ValidityCache(tokenizer) if valid_support else None
        for key, row in self.table.items():
            if len(row) != vocab_size + 1:
                raise ConfigError(f"table row for {key} has {len(row)} entries, expected {vocab_size + 1}")

    def _row(self, context: Context) -> np.ndarray:
        row = self.table.get(context)
        return self.default if row is None else row

    def _support(self, context: Context) -> np.ndarray:
        tok = self.tokenizer
        mask = np.zeros(self.vocab_size + 1, dtype=bool)
        mask[self.eos] = True
        prefix = list(context[1:])
        for t in list(tok.id_to_bytes) + list(tok.added):
            mask[t] = is_sequence_valid(prefix + [t], tok, self._validity)
        return mask

    def _logprobs(self, context: Context) -> np.ndarray:
        if len(context) - 1 >= self.horizon:
            out = np.full(self.vocab_size + 1, -np.inf)
            out[self.eos] = 0.0
            return out
        row = self._row(context)
        if self.valid_support:
            row = np.where(self._support(context), row, -np.inf)
        return normalize(row)

    def to_json(self) -> dict:
        def encode_row(row):
            return [None if np.isneginf(x) else float(x) for x in row]

        return {
            "vocab_size": self.vocab_size,
            "horizon": self.horizon,
            "default": encode_row(self.default),
            "table": {",".join(map(str, k)): encode_row(v) for k, v in self.table.items()},
            "valid_support": self.valid_support,
        }

    def save(self, path: Union[str, Path]):
        Path(path).write_text(json.dumps(self.to_json()))


class RandomTabularLM(TabularLM):
    """Tabular model whose rows are drawn lazily from a per-context seeded generator"""

    def __init__(self, tokenizer: Tokenizer, horizon: int, seed: int, valid_support: bool = True,
                 concentration: float = 0.5):
        super().__init__(tokenizer.vocab_size, horizon, tokenizer=tokenizer, valid_support=valid_support)
        self.seed = seed
        self.concentration = concentration

    def _row(self, context: Context) -> np.ndarray:
        row = self.table.get(context)
        if row is None:
            rng = np.random.default_rng([self.seed] + [t + 1 for t in context])
            probs = rng.dirichlet(np.full(self.vocab_size + 1, self.concentration))
            with np.errstate(divide="ignore"):
                row = self.table[context] = normalize(np.log(probs))
        return row


def random_tabular_lm(tokenizer: Tokenizer, horizon: int, seed: int, valid_support: bool = True) -> TabularLM:
    return RandomTabularLM(tokenizer, horizon, seed, valid_support)


def load_tabular_lm(path: Union[str, Path], tokenizer: Optional[Tokenizer] = None) -> TabularLM:
    """Read the JSON table format: vocab_size, horizon, default, table, valid_support"""
    data = json.loads(Path(path).read_text())
    try:
        vocab_size, horizon = int(data["vocab_size"]), int(data["horizon"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: tabular LM needs vocab_size and horizon") from exc

    def decode_row(row):
        return np.array([-np.inf if x is None else float(x) for x in row])

    table = {}
    for key, row in data.get("table", {}).items():
        context = tuple(int(t) for t in key.split(",")) if key else ()
        table[context] = decode_row(row)
    default = decode_row(data["default"]) if data.get("default") is not None else None
    return TabularLM(vocab_size, horizon, table, default, tokenizer, bool(data.get("valid_support", False)))


class ReplayLM(LanguageModel):
    """Serves log-probability vectors recorded offline; unseen contexts are errors.

    File layout (little-endian): magic ``BCRP``, version byte, uint32 vector
    length, then records of uint32 id count, int32 ids, float32 vector.
    Vectors are renormalized in float64 on load.
    """

    def __init__(self, records: Dict[str, Tuple[Context, np.ndarray]], vocab_size: int):
        super().__init__(vocab_size)
        self.records = records

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ReplayLM":
        path = str(path)
        data = Path(path).read_bytes()
        if len(data) < _REPLAY_HEADER.size:
            raise ReplayFormatError("file too short for header", path)
        magic, version, width = _REPLAY_HEADER.unpack_from(data)
        if magic != REPLAY_MAGIC:
            raise ReplayFormatError(f"bad magic {magic!r}", path)
        if version != REPLAY_VERSION:
            raise ReplayFormatError(f"unsupported version {version}", path)
        records: Dict[str, Tuple[Context, np.ndarray]] = {}
        offset = _REPLAY_HEADER.size
        while offset < len(data):
            if offset + _REPLAY_LENGTH.size > len(data):
                raise ReplayFormatError(f"truncated record at byte {offset}", path)
            (count,) = _REPLAY_LENGTH.unpack_from(data, offset)
            offset += _REPLAY_LENGTH.size
            need = 4 * count + 4 * width
            if offset + need > len(data):
                raise ReplayFormatError(f"truncated record at byte {offset}", path)
            ids = tuple(int(t) for t in np.frombuffer(data, dtype="<i4", count=count, offset=offset))
            vector = np.frombuffer(data, dtype="<f4", count=width, offset=offset + 4 * count).astype(np.float64)
            if not np.isfinite(logsumexp(vector)):
                raise ReplayFormatError(f"record for {ids} has no finite mass", path)
            vector = normalize(vector)
            offset += need
            key = context_key(ids)
            if key in records and records[key][0] != ids:
                raise ReplayFormatError(f"hash collision between {records[key][0]} and {ids}", path)
            records[key] = (ids, vector)
        logger.info("loaded %d replay records from %s", len(records), path)
        return cls(records, width - 1)

    def _logprobs(self, context: Context) -> np.ndarray:
        record = self.records.get(context_key(context))
        if record is None or record[0] != context:
            raise ReplayMissError(context)
        return record[1].copy()


def write_replay(path: Union[str, Path], records: Dict[Context, np.ndarray], vocab_size: int):
    width = vocab_size + 1
    with open(path, "wb") as fh:
        fh.write(_REPLAY_HEADER.pack(REPLAY_MAGIC, REPLAY_VERSION, width))
        for context, vector in records.items():
            vector = np.asarray(vector, dtype="<f4")
            if vector.shape != (width,):
                raise ReplayFormatError(f"vector for {context} has shape {vector.shape}", str(path))
            fh.write(_REPLAY_LENGTH.pack(len(context)))
            fh.write(np.asarray(context, dtype="<i4").tobytes())
            fh.write(vector.tobytes())


class ReplayRecorder(LanguageModel):
    """Wraps a model and keeps every context it served, for writing a replay file"""

    def __init__(self, lm: LanguageModel):
        super().__init__(lm.vocab_size)
        self.lm = lm
        self.recorded: Dict[Context, np.ndarray] = {}

    def _logprobs(self, context: Context) -> np.ndarray:
        result = np.array(self.lm.next_logprobs(context))
        self.recorded[context] = result
        return result

    def save(self, path: Union[str, Path]):
        write_replay(path, self.recorded, self.vocab_size)
        logger.info("wrote %d replay records to %s", len(self.recorded), path)


def load_lm(spec: str, tokenizer: Tokenizer) -> LanguageModel:
    """``uniform``, ``random:<seed>:<horizon>``, a ``.json`` table or a replay file"""
    if spec == "uniform":
        return UniformLM(tokenizer.vocab_size)
    if spec.startswith("random:"):
        try:
            _, seed, horizon = spec.split(":")
            return random_tabular_lm(tokenizer, int(horizon), int(seed))
        except ValueError as exc:
            raise ConfigError(f"bad random LM spec {spec!r}, expected random:<seed>:<horizon>") from exc
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"LM file not found: {spec}")
    if path.suffix == ".json":
        lm = load_tabular_lm(path, tokenizer)
    else:
        lm = ReplayLM.load(path)
    if lm.vocab_size != tokenizer.vocab_size:
        raise ConfigError(f"LM vocabulary {lm.vocab_size} does not match tokenizer vocabulary {tokenizer.vocab_size}")
    return lm
