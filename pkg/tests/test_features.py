from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ganevade import features, petk
from ganevade.features import (EmptyInputError, byte_histogram,
                               extract_imports, extract_strings, fnv1a64,
                               hash_features, load_matrix, load_vocab,
                               save_matrix, save_vocab, select_topk,
                               vectorize)


class TestByteHistogram:
    def test_counts_by_hand(self):
        h = byte_histogram(b"\x00\x00\xff\x41")
        assert h.total_bytes == 4
        assert h.freq[0x00] == 0.5
        assert h.freq[0xFF] == 0.25
        assert h.freq[0x41] == 0.25
        assert h.freq.sum() == pytest.approx(1.0)

    def test_empty_rejected(self):
        with pytest.raises(EmptyInputError):
            byte_histogram(b"")

    def test_uniform_random_megabyte(self):
        rng = np.random.default_rng(0)
        data = rng.integers(0, 256, size=1 << 20, dtype=np.uint8).tobytes()
        h = byte_histogram(data)
        assert np.abs(h.freq - 1.0 / 256).max() <= 0.001

    def test_counts_property_roundtrip(self):
        data = bytes(range(256)) * 3
        h = byte_histogram(data)
        np.testing.assert_array_equal(h.counts, np.full(256, 3))


class TestStrings:
    def test_planted_runs(self):
        data = b"\x00\x01hello world\xffshort\x00hi\x00hello world\x02"
        c = extract_strings(data, min_len=5)
        assert c["hello world"] == 2
        assert c["short"] == 1
        assert "hi" not in c

    def test_run_at_end_of_file(self):
        assert extract_strings(b"\x00trailing")["trailing"] == 1

    def test_min_len_boundary(self):
        c = extract_strings(b"abcd\x00abcde", min_len=5)
        assert list(c) == ["abcde"]

    def test_min_len_validation(self):
        with pytest.raises(ValueError):
            extract_strings(b"x", min_len=0)

    def test_printable_range_is_20_to_7e(self):
        # 0x1F and 0x7F both break runs
        c = extract_strings(b" !~~~\x7fabcdef\x1f", min_len=5)
        assert set(c) == {" !~~~", "abcdef"}


class TestImports:
    def test_tokens_from_synthetic_pe(self):
        spec = petk.SynthSpec(imports=["Kernel32.DLL!CreateFileA",
                                       "user32.dll!#17"])
        pe = petk.parse(petk.synth_pe(spec), strict=True)
        assert extract_imports(pe) == {"kernel32.dll!createfilea",
                                       "user32.dll!#17"}

    def test_section_reorder_invariance(self):
        # identical imports, different section payloads: same tokens
        tok = ["libone.dll!alpha", "libtwo.dll!beta"]
        a = petk.synth_pe(petk.SynthSpec(
            sections=[petk.SectionSpec(".text", b"A" * 100),
                      petk.SectionSpec(".data", b"B" * 50)], imports=tok))
        b = petk.synth_pe(petk.SynthSpec(
            sections=[petk.SectionSpec(".data", b"B" * 50),
                      petk.SectionSpec(".text", b"A" * 100)], imports=tok))
        assert extract_imports(petk.parse(a)) == extract_imports(petk.parse(b))


class TestTopK:
    def test_document_frequency_ranks(self):
        docs = [{"a", "b"}, {"a", "b"}, {"a", "c"}]
        vocab = select_topk(docs, 2)
        assert vocab.entries == ["a", "b"]

    def test_lexicographic_tie_break(self):
        docs = [{"zeta", "alpha", "mid"}]
        vocab = select_topk(docs, 2)
        assert vocab.entries == ["alpha", "mid"]

    def test_truncates_when_k_exceeds_tokens(self):
        vocab = select_topk([{"only"}], 10)
        assert vocab.entries == ["only"]

    def test_multiset_counts_do_not_inflate_df(self):
        docs = [Counter({"a": 100, "b": 1}), {"b"}]
        vocab = select_topk(docs, 1)
        assert vocab.entries == ["b"]

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            select_topk([], 5)

    def test_provenance_stable(self):
        docs = [{"x", "y"}, {"y"}]
        assert select_topk(docs, 2).provenance == select_topk(docs, 2).provenance


class TestVectorize:
    def test_indicator_and_oov(self):
        vocab = select_topk([{"a", "b", "c"}], 3)
        assert vocab.entries == ["a", "b", "c"]
        v = vectorize({"a", "c", "unknown"}, vocab)
        np.testing.assert_array_equal(v, [1.0, 0.0, 1.0])


class TestHashing:
    def test_fnv_published_vectors(self):
        # standard FNV-1a 64-bit reference values
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8

    def test_hash_is_linear_in_counts(self):
        a = hash_features(Counter({"tok": 3}), 16)
        b = hash_features(Counter({"tok": 1}), 16)
        np.testing.assert_allclose(a, 3 * b)

    def test_set_input_counts_once(self):
        np.testing.assert_array_equal(hash_features({"tok"}, 16),
                                      hash_features(Counter({"tok": 1}), 16))

    def test_sign_from_top_bit(self):
        tok = "a"  # fnv bit 63 is set -> negative bucket
        h = fnv1a64(b"a")
        v = hash_features({tok}, 8)
        expected_sign = 1.0 if (h >> 63) == 0 else -1.0
        assert v[h % 8] == expected_sign

    def test_dim_validation(self):
        with pytest.raises(ValueError):
            hash_features({"x"}, 0)

    def test_collisions_accumulate(self):
        tokens = Counter({f"t{i}": 1 for i in range(100)})
        v = hash_features(tokens, 4)
        signs = []
        for t in tokens:
            h = fnv1a64(t.encode())
            signs.append((h % 4, 1 if (h >> 63) == 0 else -1))
        expected = np.zeros(4)
        for i, s in signs:
            expected[i] += s
        np.testing.assert_array_equal(v, expected)


class TestPersistence:
    def test_vocab_roundtrip(self, tmp_path):
        vocab = select_topk([{"kernel32.dll!exitprocess", "a!b"}], 2)
        path = tmp_path / "v.txt"
        save_vocab(vocab, path)
        back = load_vocab(path)
        assert back.entries == vocab.entries
        assert back.kind == vocab.kind
        assert back.provenance == vocab.provenance

    def test_matrix_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        mat = rng.normal(size=(4, 7))
        path = tmp_path / "m.gevf"
        save_matrix(mat, [f"c{i}" for i in range(7)], path)
        back, cols = load_matrix(path)
        assert back.tobytes() == mat.tobytes()
        assert cols == [f"c{i}" for i in range(7)]

    def test_matrix_magic_checked(self, tmp_path):
        path = tmp_path / "bad.gevf"
        path.write_bytes(b"WRONG" + b"\x00" * 8)
        with pytest.raises(ValueError):
            load_matrix(path)


@settings(max_examples=30, deadline=None)
@given(st.binary(min_size=1, max_size=2048))
def test_histogram_sums_to_one(data):
    h = byte_histogram(data)
    assert h.freq.sum() == pytest.approx(1.0)
    assert h.total_bytes == len(data)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.text(alphabet=st.characters(min_codepoint=33,
                                               max_codepoint=126),
                        min_size=1, max_size=12), max_size=20))
def test_hash_features_order_independent(tokens):
    fwd = hash_features(Counter(tokens), 32)
    rev = hash_features(Counter(reversed(tokens)), 32)
    np.testing.assert_array_equal(fwd, rev)
