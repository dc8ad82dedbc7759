import pytest

from byte_sampler import ByteSampler
from performance_monitor import (
    check_overhead_bound,
    check_system_resources,
    main,
    measure_invalid_mass,
    measure_overhead,
)


def test_measure_overhead(whitespace_tokenizer):
    corpus = b"0  00 0   0" * 10
    report = measure_overhead(whitespace_tokenizer, corpus)
    assert report['bytes'] == len(corpus)
    assert report['trunk_tokens'] > 0
    assert report['max_non_trunk_edges'] >= report['mean_non_trunk_edges'] >= 0
    assert report['max_live_hypotheses'] >= 1


def test_empty_corpus(abc_tokenizer):
    report = measure_overhead(abc_tokenizer, b"")
    assert report['bytes'] == 0
    assert report['trunk_tokens'] == 0
    assert report['max_non_trunk_edges'] == 0


@pytest.mark.parametrize("edges, bound, ok", [(0, 1, True), (63, 64, True), (64, 64, False)])
def test_bound_is_strict(edges, bound, ok):
    assert check_overhead_bound({'max_non_trunk_edges': edges}, bound) is ok


def test_system_resources():
    resources = check_system_resources()
    assert 0 <= resources['memory_percent'] <= 100
    assert resources['memory_total_mb'] > 0


def test_toy_sweep_stays_bounded(capsys):
    assert main(size=500) is True
    out = capsys.readouterr().out
    assert "Overhead Report: toy" in out


def test_tight_bound_fails(capsys):
    assert main(size=500, bound=1) is False


def test_invalid_mass(pbp):
    tokenizer, lm = pbp
    report = measure_invalid_mass(ByteSampler(lm, tokenizer), b"aab")
    assert tokenizer.encode(b"aab") == [0, 2]
    assert report['positions'] == 2
    assert report['max_invalid_mass'] == pytest.approx(0.01)
    assert report['mean_invalid_mass'] == pytest.approx(0.005)
    assert report['worst_position'] == 1


def test_invalid_mass_empty_corpus(pbp):
    tokenizer, lm = pbp
    report = measure_invalid_mass(ByteSampler(lm, tokenizer), b"")
    assert report['positions'] == 0 and report['worst_position'] is None


def test_toy_sweep_with_model(capsys):
    assert main(size=300, lm_spec="uniform") is True
    out = capsys.readouterr().out
    assert "Invalid Mass Report (pair check)" in out
