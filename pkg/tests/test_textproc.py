"""Tokenization, vocabulary, and TF-IDF."""

import math

import pytest
from hypothesis import given, strategies as st

from casevec.textproc import (
    CLS, MASK, PAD, SEP, UNK,
    EmptyCorpus,
    Vocabulary,
    build_stats,
    build_vocab,
    tf_idf,
    tokenize,
)


class TestTokenize:
    def test_basic(self):
        assert tokenize("The court held that") == ["the", "court", "held", "that"]

    def test_empty(self):
        assert tokenize("") == []

    def test_punctuation_split(self):
        assert tokenize("law 17, theft; 6-months.") == ["law", "17", "theft", "6", "months"]

    @given(st.text(max_size=200))
    def test_idempotent(self, s):
        tokens = tokenize(s)
        assert tokenize(" ".join(tokens)) == tokens


class TestVocabulary:
    def test_reserved_ids(self):
        vocab = build_vocab(["a a b"])
        assert (PAD, UNK, CLS, SEP, MASK) == (0, 1, 2, 3, 4)
        assert vocab.id_to_token[:5] == ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]

    def test_frequency_then_lexicographic(self):
        vocab = build_vocab(["a a b"])
        assert vocab.encode_token("a") == 5
        assert vocab.encode_token("b") == 6

    def test_min_freq_unk(self):
        vocab = build_vocab(["a a b"], min_freq=2)
        assert vocab.encode_token("b") == UNK
        assert "b" not in vocab.token_to_id

    def test_max_size_truncates(self):
        vocab = build_vocab(["a a b b c"], max_size=7)
        assert len(vocab) == 7
        assert vocab.encode_token("c") == UNK

    def test_encode_decode_roundtrip(self):
        vocab = build_vocab(["the quick brown fox jumps over the lazy dog"])
        for token in vocab.id_to_token[5:]:
            assert vocab.decode([vocab.encode_token(token)]) == [token]

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpus):
            build_vocab([])

    def test_save_load_stable(self, tmp_path):
        vocab = build_vocab(["gamma alpha beta alpha"])
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        again = Vocabulary.load(path)
        assert again.id_to_token == vocab.id_to_token
        # line number == id - 5
        lines = path.read_text().splitlines()
        for i, line in enumerate(lines):
            assert vocab.encode_token(line) == i + 5


class TestTfIdf:
    def test_absent_token_zero(self):
        stats = build_stats([("d1", "a b"), ("d2", "a c")])
        assert tf_idf("z", ["a", "b"], stats) == 0.0

    def test_token_in_all_docs(self):
        # N=2, df=2, tf=1 -> 1 * ln(3/3) = 0
        stats = build_stats([("d1", "a b"), ("d2", "a c")])
        assert tf_idf("a", ["a", "b"], stats) == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        # N=2, token only in this doc with tf=2 -> 2 * ln(3/2)
        stats = build_stats([("d1", "b b x"), ("d2", "a c")])
        expected = 2 * math.log(3 / 2)
        assert tf_idf("b", ["b", "b", "x"], stats) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.810930216, abs=1e-8)

    def test_monotonicity(self):
        stats = build_stats([("d1", "a"), ("d2", "b"), ("d3", "c"), ("d4", "a b")])
        # non-decreasing in tf at fixed df
        v1 = tf_idf("c", ["c"], stats)
        v2 = tf_idf("c", ["c", "c"], stats)
        assert v2 >= v1
        # non-increasing in df at fixed tf: df(c)=1 < df(a)=2
        assert tf_idf("a", ["a"], stats) <= tf_idf("c", ["c"], stats)

    def test_stats_roundtrip(self, tmp_path):
        stats = build_stats([("d1", "a b b"), ("d2", "a c")])
        path = tmp_path / "stats.json"
        stats.save(path)
        loaded = type(stats).load(path)
        assert loaded.df == stats.df
        assert loaded.num_docs == stats.num_docs
        assert loaded.avgdl == stats.avgdl
        assert loaded.doc_tf == stats.doc_tf
