#!/usr/bin/env python3
"""
Covering-tree overhead sweep and resource report
"""

import time
from pathlib import Path
from typing import Optional

import numpy as np
import psutil
from tqdm import tqdm

from bpe_tokenizer import Tokenizer, load_tokenizer
from byte_sampler import ByteSampler
from covering_tree import ValidCoveringTree
from differential_suites import SAMPLE_TEXT
from language_models import load_lm
from validity import ValidityCache

# Largest non-trunk edge count allowed at any step, per tokenizer name
OVERHEAD_BOUNDS = {
    "toy": 64,
    "gpt2": 256,
    "olmo2": 256,
    "llama3": 256,
    "qwen3": 256,
}
DEFAULT_BOUND = 256

# Context positions scored by the invalid-mass report
INVALID_MASS_TOKENS = 256


def measure_overhead(tokenizer: Tokenizer, corpus: bytes, progress: bool = False) -> dict:
    """Feed ``corpus`` byte by byte and track how much tree hangs off the trunk"""
    process = psutil.Process()
    rss_before = process.memory_info().rss
    tree = ValidCoveringTree(tokenizer, ValidityCache(tokenizer))
    edges_total = edges_max = hypotheses_max = deepest = expanded = previous = 0
    started = time.perf_counter()
    for byte in tqdm(corpus, desc="overhead", disable=not progress, unit="B"):
        tree.feed_byte(byte)
        stats = tree.branch_stats()
        edges_total += stats.non_trunk_edges
        expanded += max(0, stats.non_trunk_edges - previous)
        previous = stats.non_trunk_edges
        edges_max = max(edges_max, stats.non_trunk_edges)
        hypotheses_max = max(hypotheses_max, stats.live_hypotheses)
        deepest = max(deepest, stats.deepest_branch)
    tree.finish()
    elapsed = time.perf_counter() - started
    size = max(len(corpus), 1)
    return {
        'bytes': len(corpus),
        'trunk_tokens': len(tree.trunk),
        'max_non_trunk_edges': edges_max,
        'mean_non_trunk_edges': edges_total / size,
        # branch nodes newly expanded per byte, beyond what plain BPE queries
        'extra_nodes_per_byte': expanded / size,
        'max_live_hypotheses': hypotheses_max,
        'deepest_branch': deepest,
        'seconds': round(elapsed, 3),
        'bytes_per_second': round(len(corpus) / elapsed, 1) if elapsed > 0 else None,
        'rss_mb': round(process.memory_info().rss / 1024 ** 2, 1),
        'rss_growth_mb': round((process.memory_info().rss - rss_before) / 1024 ** 2, 1),
    }


def measure_invalid_mass(sampler: ByteSampler, corpus: bytes, max_tokens: int = INVALID_MASS_TOKENS,
                         exact: bool = False, progress: bool = False) -> dict:
    """Model mass on non-canonical next tokens along the canonical encoding of ``corpus``"""
    tokens = sampler.tokenizer.encode(corpus)[:max_tokens]
    masses = np.array([
        sampler.invalid_next_token_mass(tokens[:i], exact=exact)
        for i in tqdm(range(len(tokens)), desc="invalid mass", disable=not progress, unit="tok")
    ])
    if not len(masses):
        return {'positions': 0, 'mean_invalid_mass': 0.0, 'max_invalid_mass': 0.0, 'worst_position': None,
                'exact': exact}
    return {
        'positions': len(masses),
        'mean_invalid_mass': float(masses.mean()),
        'max_invalid_mass': float(masses.max()),
        'worst_position': int(masses.argmax()),
        'exact': exact,
    }


def check_overhead_bound(report: dict, bound: int) -> bool:
    return report['max_non_trunk_edges'] < bound


def check_system_resources() -> dict:
    memory = psutil.virtual_memory()
    return {
        'memory_percent': memory.percent,
        'memory_used_mb': memory.used // (1024 ** 2),
        'memory_total_mb': memory.total // (1024 ** 2),
        'cpu_percent': psutil.cpu_percent(interval=0.2),
    }


def print_report(name: str, report: dict, bound: int):
    print(f"\n📋 Overhead Report: {name}")
    print("=" * 50)
    print(f"Bytes fed: {report['bytes']} ({report['trunk_tokens']} trunk tokens)")
    print(f"Non-trunk edges: max {report['max_non_trunk_edges']}, mean {report['mean_non_trunk_edges']:.3f}")
    print(f"Extra nodes per byte: {report['extra_nodes_per_byte']:.3f}")
    print(f"Live hypotheses peak: {report['max_live_hypotheses']}, deepest branch: {report['deepest_branch']}")
    print(f"Throughput: {report['bytes_per_second']} B/s in {report['seconds']}s")
    print(f"Memory: {report['rss_mb']}MB resident (+{report['rss_growth_mb']}MB)")
    if check_overhead_bound(report, bound):
        print(f"✅ Tree stayed below the pinned bound of {bound} edges")
    else:
        print(f"❌ Tree reached {report['max_non_trunk_edges']} edges, bound is {bound}")


def print_invalid_report(report: dict):
    kind = "sequence" if report['exact'] else "pair"
    print(f"\n🧮 Invalid Mass Report ({kind} check)")
    print("=" * 50)
    print(f"Positions scored: {report['positions']}")
    print(f"Mass on non-canonical next tokens: mean {report['mean_invalid_mass']:.4g}, "
          f"max {report['max_invalid_mass']:.4g} at position {report['worst_position']}")


def main(tokenizer_source: Optional[str] = None, corpus_path: Optional[str] = None, size: int = 10_000,
         bound: Optional[int] = None, lm_spec: Optional[str] = None, exact: bool = False) -> bool:
    print("🏢 Byte Conditioning - Performance Monitor")
    print("=" * 60)
    if tokenizer_source is None:
        from oracle import ToyTokenizerSpec, random_toy_tokenizer
        name, tokenizer = "toy", random_toy_tokenizer(ToyTokenizerSpec(seed=0, alphabet_size=4,
                                                                          merge_count=30, pretokenized=True))
    else:
        name, tokenizer = Path(tokenizer_source).stem, load_tokenizer(tokenizer_source)
    if corpus_path:
        corpus = Path(corpus_path).read_bytes()[:size]
    elif name == "toy":
        corpus = bytes(b for b in SAMPLE_TEXT.encode("utf-8") * (size // 100 + 1) if b in tokenizer.byte_alphabet)[:size]
    else:
        corpus = (SAMPLE_TEXT.encode("utf-8") * (size // len(SAMPLE_TEXT) + 1))[:size]
    bound = bound or OVERHEAD_BOUNDS.get(name, DEFAULT_BOUND)

    print(f"\n🧪 Sweeping {len(corpus)} bytes through {name}...")
    report = measure_overhead(tokenizer, corpus, progress=True)
    print_report(name, report, bound)

    if lm_spec:
        sampler = ByteSampler(load_lm(lm_spec, tokenizer), tokenizer)
        print(f"\n🧪 Scoring next-token mass of {lm_spec} along the corpus...")
        print_invalid_report(measure_invalid_mass(sampler, corpus, exact=exact, progress=True))

    resources = check_system_resources()
    print("\n💻 System Resources")
    print("=" * 50)
    print(f"Memory Usage: {resources['memory_percent']}% "
          f"({resources['memory_used_mb']}MB / {resources['memory_total_mb']}MB)")
    print(f"CPU Usage: {resources['cpu_percent']}%")
    return check_overhead_bound(report, bound)


if __name__ == "__main__":
    import sys
    sys.exit(0 if main(*sys.argv[1:2]) else 1)
