import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpe_tokenizer import (
    BYTE_TO_UNIT,
    Tokenizer,
    bytes_to_unit_string,
    load_tokenizer,
    unit_string_to_bytes,
)
from errors import (
    MalformedMergeError,
    TokenizerLoadError,
    UnknownByteError,
    UnknownTokenError,
    UnsupportedModelError,
    UnsupportedPretokenizerError,
)
from oracle import heap_encode


def definition(vocab, merges, pre_tokenizer=None, **model):
    return {
        "added_tokens": [],
        "normalizer": None,
        "pre_tokenizer": pre_tokenizer or {"type": "ByteLevel", "add_prefix_space": False, "use_regex": False},
        "model": {"type": "BPE", "vocab": vocab, "merges": merges, **model},
    }


class TestEncode:
    def test_rank_order(self, abc_tokenizer):
        assert abc_tokenizer.encode(b"abc") == [5]
        assert abc_tokenizer.encode(b"bc") == [4]
        assert abc_tokenizer.encode(b"abbc") == [3, 4]
        assert abc_tokenizer.encode(b"abcab") == [5, 3]

    def test_empty(self, abc_tokenizer):
        assert abc_tokenizer.encode(b"") == []
        assert abc_tokenizer.decode([]) == b""

    def test_str_input(self, abc_tokenizer):
        assert abc_tokenizer.encode("cab") == abc_tokenizer.encode(b"cab") == [2, 3]

    def test_unknown_byte(self, abc_tokenizer):
        with pytest.raises(UnknownByteError) as info:
            abc_tokenizer.encode(b"abd")
        assert info.value.byte == ord("d")

    def test_unknown_token(self, abc_tokenizer):
        with pytest.raises(UnknownTokenError):
            abc_tokenizer.decode([99])

    @settings(max_examples=60, deadline=None)
    @given(st.binary(max_size=24).map(lambda b: bytes(b"abc"[x % 3] for x in b)))
    def test_decode_inverts_encode(self, text):
        tokenizer = Tokenizer({b"a": 0, b"b": 1, b"c": 2, b"ab": 3, b"bc": 4, b"abc": 5},
                              [(0, 1, 3), (1, 2, 4), (3, 2, 5)])
        assert tokenizer.decode(tokenizer.encode(text)) == text

    def test_pretokenized(self, whitespace_tokenizer):
        assert whitespace_tokenizer.encode(b"  0") == [0, 0, 1]
        assert whitespace_tokenizer.encode(b"  ") == [2]

    def test_pretoken_cache_is_bounded(self):
        tokenizer = Tokenizer({b"a": 0, b"b": 1, b"c": 2, b"ab": 3, b"bc": 4, b"abc": 5},
                              [(0, 1, 3), (1, 2, 4), (3, 2, 5)], pretoken_cache_size=2)
        for text in (b"abc", b"ab", b"abc", b"bc"):
            tokenizer.encode(text)
        assert list(tokenizer._pretoken_cache) == [b"abc", b"bc"]
        assert tokenizer.encode(b"abbc") == [3, 4]
        assert len(tokenizer._pretoken_cache) == 2

    def test_pretoken_cache_can_be_disabled(self):
        tokenizer = Tokenizer({b"a": 0, b"b": 1, b"ab": 2}, [(0, 1, 2)], pretoken_cache_size=0)
        assert tokenizer.encode(b"abab") == [2, 2]
        assert not tokenizer._pretoken_cache


class TestMergeNormalization:
    def test_unreachable_token(self):
        vocab = {b"a": 0, b"b": 1, b"c": 2, b"ab": 3, b"bc": 4, b"abc": 5}
        tokenizer = Tokenizer(vocab, [(1, 2, 4), (0, 1, 3), (3, 2, 5)])
        assert tokenizer.unreachable == {5}
        assert tokenizer.encode(b"abc") == [0, 4]
        assert [m.result for m in tokenizer.merges] == [4, 3]

    def test_reordered_inputs(self):
        vocab = {b"a": 0, b"b": 1, b"c": 2, b"ab": 3, b"abc": 4}
        tokenizer = Tokenizer(vocab, [(3, 2, 4), (0, 1, 3)])
        assert [m.result for m in tokenizer.merges] == [3, 4]
        assert [m.rank for m in tokenizer.merges] == [0, 1]
        assert tokenizer.encode(b"abc") == [4]
        assert tokenizer.encode(b"abc") == heap_encode(b"abc", tokenizer)

    def test_relocated_merge_loses_its_priority(self):
        # raw heap fires ba+b as soon as ba exists; the relocated list ranks it after b+a
        vocab = {b"a": 0, b"b": 1, b"ba": 2, b"bab": 3}
        tokenizer = Tokenizer(vocab, [(2, 1, 3), (1, 0, 2)])
        assert [m.result for m in tokenizer.merges] == [2, 3]
        assert tokenizer.encode(b"bab") == [3]
        assert tokenizer.encode(b"baba") == [2, 2]
        assert heap_encode(b"baba", tokenizer) == [3, 0]

    def test_late_extension_merges_match_heap(self):
        vocab = {b"a": 0, b"b": 1, b"ab": 2, b"ba": 3, b"abab": 4, b"aba": 5}
        tokenizer = Tokenizer(vocab, [(0, 1, 2), (1, 0, 3), (2, 2, 4), (2, 0, 5)])
        for text in (b"ababa", b"abab", b"aba", b"babab", b"aabab"):
            assert tokenizer.encode(text) == heap_encode(text, tokenizer)

    def test_duplicate_pair_keeps_first(self):
        vocab = {b"a": 0, b"b": 1, b"ab": 2}
        tokenizer = Tokenizer(vocab, [(0, 1, 2), (0, 1, 2)])
        assert len(tokenizer.raw_merges) == 2
        assert len(tokenizer.merges) == 1

    def test_bad_concatenation(self):
        with pytest.raises(MalformedMergeError):
            Tokenizer({b"a": 0, b"b": 1, b"ba": 2}, [(0, 1, 2)])

    def test_duplicate_ids(self):
        with pytest.raises(TokenizerLoadError):
            Tokenizer({b"a": 0, b"b": 0}, [])


class TestByteUnits:
    def test_printable_ascii_is_itself(self):
        assert bytes_to_unit_string(b"abc") == "abc"

    def test_space_maps_to_g_dot(self):
        assert BYTE_TO_UNIT[ord(" ")] == "Ġ"
        assert unit_string_to_bytes("Ġthe") == b" the"

    def test_all_bytes_distinct(self):
        assert len(set(BYTE_TO_UNIT.values())) == 256

    def test_outside_alphabet(self):
        with pytest.raises(TokenizerLoadError):
            unit_string_to_bytes("一")


class TestLoad:
    def test_from_file(self, tokenizer_file, abc_tokenizer):
        loaded = load_tokenizer(tokenizer_file)
        assert loaded.vocab == abc_tokenizer.vocab
        assert [(m.left, m.right, m.result) for m in loaded.merges] == \
            [(m.left, m.right, m.result) for m in abc_tokenizer.merges]

    def test_from_directory(self, tokenizer_file):
        assert load_tokenizer(tokenizer_file.parent).vocab_size == 6

    def test_missing_file(self, tmp_path):
        with pytest.raises(TokenizerLoadError):
            load_tokenizer(tmp_path / "nope.json")

    def test_bad_json(self, tmp_path):
        path = tmp_path / "tokenizer.json"
        path.write_text("{not json")
        with pytest.raises(TokenizerLoadError):
            load_tokenizer(path)

    def test_string_and_list_merges(self):
        vocab = {"a": 0, "b": 1, "Ġ": 2, "ab": 3, "Ġa": 4}
        loaded = load_tokenizer(definition(vocab, [["Ġ", "a"], "a b"]))
        assert loaded.encode(b" ab") == [4, 1]
        assert loaded.encode(b"ab") == [3]

    def test_added_and_special_tokens(self):
        doc = definition({"a": 0, "b": 1}, [])
        doc["added_tokens"] = [
            {"id": 2, "content": "<|endoftext|>", "special": True},
            {"id": 3, "content": "ba", "special": False},
        ]
        loaded = load_tokenizer(doc)
        assert loaded.specials == {2: "<|endoftext|>"}
        assert loaded.added == {3: b"ba"}
        assert loaded.vocab_size == 4
        assert loaded.encode(b"aba") == [0, 3]
        assert loaded.token_bytes(2) == b""

    def test_ignore_merges(self):
        vocab = {"a": 0, "b": 1, "c": 2, "bc": 3, "abc": 4}
        loaded = load_tokenizer(definition(vocab, ["b c"], ignore_merges=True))
        assert loaded.encode(b"abc") == [4]
        assert loaded.encode(b"abcbc") == [0, 3, 3]

    def test_definition_survives_json(self, pretokenized_toy):
        doc = json.loads(json.dumps(pretokenized_toy.to_definition()))
        loaded = load_tokenizer(doc)
        text = b"ab 0 ba00"
        assert loaded.encode(text) == pretokenized_toy.encode(text)

    @pytest.mark.parametrize("model, error", [
        ({"type": "Unigram"}, UnsupportedModelError),
        ({"type": "BPE", "byte_fallback": True}, UnsupportedModelError),
        ({"type": "BPE", "continuing_subword_prefix": "##"}, UnsupportedModelError),
        ({"type": "BPE", "dropout": 0.1}, UnsupportedModelError),
    ])
    def test_unsupported_models(self, model, error):
        doc = definition({"a": 0}, [])
        doc["model"].update(model)
        with pytest.raises(error):
            load_tokenizer(doc)

    def test_normalizer_rejected(self):
        doc = definition({"a": 0}, [])
        doc["normalizer"] = {"type": "NFC"}
        with pytest.raises(TokenizerLoadError):
            load_tokenizer(doc)

    def test_added_token_flags_rejected(self):
        doc = definition({"a": 0}, [])
        doc["added_tokens"] = [{"id": 1, "content": "<s>", "special": True, "lstrip": True}]
        with pytest.raises(TokenizerLoadError):
            load_tokenizer(doc)

    @pytest.mark.parametrize("merges", [["a"], ["a b c"], ["a x"], ["b a"], [["a", "b", "ba"]]])
    def test_malformed_merges(self, merges):
        with pytest.raises(MalformedMergeError):
            load_tokenizer(definition({"a": 0, "b": 1, "ab": 2}, merges))

    def test_unknown_pretokenizer(self):
        with pytest.raises(UnsupportedPretokenizerError):
            load_tokenizer(definition({"a": 0}, [], pre_tokenizer={"type": "Metaspace"}))
