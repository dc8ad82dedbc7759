#!/usr/bin/env python3
"""
Command-line entry point for the byte conditioning engine

    python run.py tokenize  --tokenizer olmo2 "Hello wor"
    python run.py vct       --tokenizer olmo2 "This is a tes"
    python run.py prefix-prob --tokenizer toy:3 --lm random:0:4 "ab a"
    python run.py sample    --tokenizer toy:3 --lm random:0:4 --mode bytes -n 20 "ab"
    python run.py verify    --scale 0.1 --jobs 4
    python run.py overhead  --tokenizer gpt2
    python run.py app
"""

import argparse
import json
import logging
import os
import re
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from bpe_tokenizer import Tokenizer, load_tokenizer
from byte_sampler import ByteSampler, CompositeSampler, CompositeSpec, SamplerConfig
from covering_tree import ValidCoveringTree
from errors import ByteConditioningError, ConfigError
from language_models import LanguageModel, ReplayRecorder, load_lm

logger = logging.getLogger("run")

EXIT_OK, EXIT_VERIFY_FAILED, EXIT_USAGE = 0, 1, 2
TOKENIZER_DIR_ENV = "BYTECOND_TOKENIZER_DIR"
LOG_LEVEL_ENV = "BYTECOND_LOG_LEVEL"

_ESCAPE = re.compile(rb"\\x([0-9a-fA-F]{2})|\\\\")


def parse_prompt(text: str) -> bytes:
    r"""UTF-8 bytes of ``text`` with ``\xNN`` standing for a raw byte and ``\\`` for a backslash"""
    return _ESCAPE.sub(lambda m: bytes([int(m.group(1), 16)]) if m.group(1) else b"\\", text.encode("utf-8"))


def resolve_tokenizer(name: str) -> Tokenizer:
    """A path, ``toy:<seed>[:pre]``, or a bare name looked up in $BYTECOND_TOKENIZER_DIR"""
    if name.startswith("toy:"):
        from oracle import ToyTokenizerSpec, random_toy_tokenizer
        parts = name.split(":")
        return random_toy_tokenizer(ToyTokenizerSpec(seed=int(parts[1]), alphabet_size=4, merge_count=16,
                                                     pretokenized="pre" in parts[2:]))
    path = Path(name)
    if not path.exists():
        base = os.environ.get(TOKENIZER_DIR_ENV)
        candidates = [Path(base) / name / "tokenizer.json", Path(base) / f"{name}.json"] if base else []
        path = next((c for c in candidates if c.exists()), path)
    return load_tokenizer(path)


@dataclass
class RunConfig:
    tokenizer: str
    lm: str = "uniform"
    prompt: Optional[str] = None
    prompt_file: Optional[str] = None
    stdin: bool = False
    specials: List[int] = field(default_factory=list)
    output: str = "text"
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        sources = sum(x is not None and x is not False for x in (self.prompt, self.prompt_file, self.stdin or None))
        if sources > 1:
            raise ConfigError("give the prompt as an argument, --file or --stdin, not several")
        if self.output not in ("text", "json"):
            raise ConfigError(f"unknown output format {self.output!r}")

    def read_prompt(self) -> bytes:
        if self.prompt is not None:
            return parse_prompt(self.prompt)
        if self.prompt_file is not None:
            return Path(self.prompt_file).read_bytes()
        if self.stdin or not sys.stdin.isatty():
            return sys.stdin.buffer.read()
        return b""

    def segments(self) -> list:
        return list(self.specials) + [self.read_prompt()]


def emit(cfg: RunConfig, record: dict, text: str):
    if cfg.output == "json":
        print(json.dumps(record, ensure_ascii=False))
    else:
        print(text)


def _show(tokenizer: Tokenizer, token: int) -> str:
    if tokenizer.is_special(token):
        return tokenizer.specials[token]
    return repr(tokenizer.token_bytes(token).decode("utf-8", "backslashreplace"))


def cmd_tokenize(cfg: RunConfig, stream: bool = False) -> int:
    tokenizer = resolve_tokenizer(cfg.tokenizer)
    data = cfg.read_prompt()
    if not stream:
        ids = tokenizer.encode(data)
        emit(cfg, {"ids": ids, "pieces": [_show(tokenizer, t) for t in ids]},
             " ".join(map(str, ids)) + ("\n" + " ".join(_show(tokenizer, t) for t in ids) if ids else ""))
        return EXIT_OK
    tree = ValidCoveringTree(tokenizer)
    for offset, byte in enumerate(data):
        new = tree.feed_byte(byte)
        if new:
            emit(cfg, {"offset": offset + 1, "ids": new}, f"{offset + 1}: {' '.join(map(str, new))}")
    rest = tree.finish()
    if rest:
        emit(cfg, {"offset": len(data), "ids": rest, "final": True}, f"{len(data)}: {' '.join(map(str, rest))} (end)")
    return EXIT_OK


def cmd_vct(cfg: RunConfig) -> int:
    tokenizer = resolve_tokenizer(cfg.tokenizer)
    tree = ValidCoveringTree(tokenizer)
    tree.feed(cfg.segments())
    groups = tree.leaves()
    stats = tree.branch_stats()
    if cfg.output == "json":
        emit(cfg, {
            "trunk": tree.trunk,
            "leaf_groups": [{"path": list(g.path), "size": int(g.mask.sum()), "covered": g.covered} for g in groups],
            "non_trunk_edges": stats.non_trunk_edges,
            "live_hypotheses": stats.live_hypotheses,
            "deepest_branch": stats.deepest_branch,
        }, "")
        return EXIT_OK
    print("🌳 Valid Covering Tree")
    print("=" * 50)
    print(tree.dump())
    print("\n🍃 Leaf groups")
    for g in groups:
        path = " ".join(_show(tokenizer, t) for t in g.path) or "(root)"
        print(f"  {path} -> {int(g.mask.sum())} token(s), {g.covered} byte(s) inside the prompt")
    return EXIT_OK


def _sampler(cfg: RunConfig, record: Optional[str] = None):
    tokenizer = resolve_tokenizer(cfg.tokenizer)
    lm: LanguageModel = load_lm(cfg.lm, tokenizer)
    if record:
        lm = ReplayRecorder(lm)
    return ByteSampler(lm, tokenizer), lm


def cmd_prefix_prob(cfg: RunConfig, record: Optional[str] = None) -> int:
    sampler, lm = _sampler(cfg, record)
    tree = sampler.new_tree()
    tree.feed(cfg.segments())
    logprob = sampler.prefix_logprob(b"", tree)
    stats = tree.branch_stats()
    leaves = sum(int(g.mask.sum()) for g in tree.leaves())
    result = {
        "logprob": logprob,
        "prob": float(np.exp(logprob)),
        "leaves": leaves,
        "trunk_tokens": len(tree.trunk),
        "branch_nodes": stats.non_trunk_edges,
        "inference_calls": lm.calls,
    }
    emit(cfg, result, "\n".join([
        f"log P(prefix) = {logprob:.12g}",
        f"P(prefix)     = {result['prob']:.6g}",
        f"leaves: {leaves}, trunk: {len(tree.trunk)} tokens, branch nodes: {stats.non_trunk_edges}",
        f"inference calls: {lm.calls}",
    ]))
    if record:
        lm.save(record)
    return EXIT_OK


def cmd_sample(cfg: RunConfig, mode: str, n: int, members: List[str], composite: Optional[str],
               weights: Optional[List[float]], record: Optional[str] = None) -> int:
    rng = cfg.sampler.rng()
    prompt = cfg.read_prompt()
    if composite:
        samplers = []
        for member in members:
            tok_name, _, lm_spec = member.partition("=")
            tokenizer = resolve_tokenizer(tok_name)
            samplers.append(ByteSampler(load_lm(lm_spec or "uniform", tokenizer), tokenizer))
        session = CompositeSampler(CompositeSpec(composite, samplers, weights))
        session.feed(prompt)
        out = session.sample_bytes(n, cfg.sampler, rng)
        emit(cfg, {"prompt": prompt.decode("utf-8", "replace"), "bytes": list(out),
                   "text": out.decode("utf-8", "replace")}, out.decode("utf-8", "replace"))
        return EXIT_OK

    sampler, lm = _sampler(cfg, record)
    if mode == "pbp":
        tokens = sampler.sample_completion(list(cfg.specials) + [prompt], cfg.sampler, rng, max_tokens=n)
        text = sampler.tokenizer.decode(tokens)
        emit(cfg, {"tokens": tokens, "text": text.decode("utf-8", "replace")}, text.decode("utf-8", "replace"))
    else:
        out = sampler.sample_bytes(list(cfg.specials) + [prompt], n, cfg.sampler, rng)
        emit(cfg, {"bytes": list(out), "text": out.decode("utf-8", "replace")}, out.decode("utf-8", "replace"))
    if record:
        lm.save(record)
    return EXIT_OK


def cmd_verify(scale: float, seed: int, jobs: int, suites: Optional[List[str]], output: str,
               tokenizer: Optional[str] = None, corpus: Optional[str] = None, mutation: Optional[str] = None) -> int:
    from differential_suites import SUITES, run_suites

    unknown = [s for s in suites or [] if s not in SUITES]
    if unknown:
        raise ConfigError(f"unknown suite(s) {unknown}; choose from {sorted(SUITES)}")
    if output == "text":
        print("🧪 Differential Verification")
        print("=" * 50)
    records = run_suites(
        suites, scale, seed, jobs, mutation,
        tokenizer=resolve_tokenizer(tokenizer) if tokenizer else None,
        corpus=Path(corpus).read_bytes() if corpus else None,
        progress=output == "text",
    )
    for record in records:
        if output == "json":
            print(json.dumps(record, ensure_ascii=False, default=str))
        else:
            mark = "✅" if record["success"] else "❌"
            print(f"{mark} {record['suite']}: {record['cases']} case(s), {record['mismatches']} mismatch(es), "
                  f"{record['seconds']}s")
            for failure in record["failures"]:
                print(f"   reproduce with --suite {record['suite']} --seed {failure.get('seed')}: {failure}")
    passed = all(r["success"] for r in records)
    if output == "text":
        print("=" * 50)
        print("🎉 All suites passed" if passed else "⚠️  Some suites failed")
    return EXIT_OK if passed else EXIT_VERIFY_FAILED


def cmd_app() -> int:
    print("\n🚀 Starting the covering tree inspector...")
    print("📍 Available at: http://localhost:8501")
    print("🛑 Press Ctrl+C to stop\n")
    try:
        subprocess.run(["streamlit", "run", str(Path(__file__).with_name("app.py")), "--server.port", "8501"])
    except KeyboardInterrupt:
        print("\n👋 Inspector stopped by user")
    except FileNotFoundError:
        print("❌ Streamlit not found. Please install with: pip install streamlit")
        return EXIT_USAGE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="run.py", description="Byte-level conditioning for BPE language models")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def prompt_args(p, lm=False):
        p.add_argument("prompt", nargs="?", help=r"prompt text; \xNN escapes a raw byte")
        p.add_argument("--tokenizer", "-t", default="toy:0", help="file, toy:SEED[:pre], or a name under $BYTECOND_TOKENIZER_DIR")
        p.add_argument("--file", dest="prompt_file")
        p.add_argument("--stdin", action="store_true")
        p.add_argument("--special", type=int, action="append", default=[], help="special token id before the prompt")
        p.add_argument("--output", "-o", choices=["text", "json"], default="text")
        if lm:
            p.add_argument("--lm", default="uniform", help="uniform | random:SEED:HORIZON | table.json | replay file")
            p.add_argument("--record", help="write every served context to this replay file")

    p = sub.add_parser("tokenize", help="encode a prompt, optionally byte by byte")
    prompt_args(p)
    p.add_argument("--stream", action="store_true")

    p = sub.add_parser("vct", help="dump the valid covering tree of a prompt")
    prompt_args(p)

    p = sub.add_parser("prefix-prob", help="probability that the model's text starts with the prompt")
    prompt_args(p, lm=True)

    p = sub.add_parser("sample", help="sample a continuation")
    prompt_args(p, lm=True)
    p.add_argument("--mode", choices=["pbp", "bytes"], default="bytes")
    p.add_argument("-n", type=int, default=32, help="bytes (bytes mode) or tokens (pbp mode)")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int)
    p.add_argument("--top-p", type=float)
    p.add_argument("--level", choices=["byte", "token"], default="byte")
    p.add_argument("--seed", type=int, default=0)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--ensemble", dest="composite", action="store_const", const="ensemble")
    group.add_argument("--proxy", dest="composite", action="store_const", const="proxy")
    p.add_argument("--member", action="append", default=[], help="TOKENIZER=LM; proxy order is base, expert, anti")
    p.add_argument("--weights", type=float, nargs="+")

    p = sub.add_parser("verify", help="run the randomized differential suites")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--suite", action="append")
    p.add_argument("--tokenizer", help="also check this tokenizer file")
    p.add_argument("--corpus", help="streaming corpus for the tokenizer file")
    p.add_argument("--output", "-o", choices=["text", "json"], default="text")
    p.add_argument("--mutation", help=argparse.SUPPRESS)

    p = sub.add_parser("overhead", help="tree size sweep over a corpus")
    p.add_argument("--tokenizer")
    p.add_argument("--corpus")
    p.add_argument("--bytes", type=int, default=10_000)
    p.add_argument("--bound", type=int)
    p.add_argument("--lm", help="also report the model's mass on non-canonical next tokens")
    p.add_argument("--exact", action="store_true", help="check whole sequences in the invalid-mass report")

    sub.add_parser("app", help="launch the Streamlit inspector")
    return parser


def setup_logging(verbose: bool):
    level = logging.DEBUG if verbose else os.environ.get(LOG_LEVEL_ENV, "WARNING").upper()
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        if args.command == "verify":
            return cmd_verify(args.scale, args.seed, args.jobs, args.suite, args.output,
                              args.tokenizer, args.corpus, args.mutation)
        if args.command == "overhead":
            import performance_monitor
            bounded = performance_monitor.main(args.tokenizer, args.corpus, args.bytes, args.bound, args.lm, args.exact)
            return EXIT_OK if bounded else EXIT_VERIFY_FAILED
        if args.command == "app":
            return cmd_app()

        sampler_cfg = SamplerConfig(
            temperature=getattr(args, "temperature", 1.0),
            top_k=getattr(args, "top_k", None),
            top_p=getattr(args, "top_p", None),
            transform_level=getattr(args, "level", "byte"),
            seed=getattr(args, "seed", 0),
        )
        cfg = RunConfig(
            tokenizer=args.tokenizer, lm=getattr(args, "lm", "uniform"), prompt=args.prompt,
            prompt_file=args.prompt_file, stdin=args.stdin, specials=args.special, output=args.output,
            sampler=sampler_cfg,
        )
        if args.command == "tokenize":
            return cmd_tokenize(cfg, args.stream)
        if args.command == "vct":
            return cmd_vct(cfg)
        if args.command == "prefix-prob":
            return cmd_prefix_prob(cfg, args.record)
        return cmd_sample(cfg, args.mode, args.n, args.member, args.composite, args.weights, args.record)
    except ByteConditioningError as e:
        logger.debug("command failed", exc_info=True)
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
