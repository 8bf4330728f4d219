"""The three masking regimes and their shared invariants."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from casevec.masking import (
    EmptyInput,
    MaskPolicy,
    SpanOutOfBounds,
    derive_rng,
    mask_count,
    mask_random,
    mask_slots,
    mask_tfidf,
)
from casevec.textproc import MASK, build_stats, build_vocab, tf_idf


def ids(n, lo=5, hi=60, seed=0):
    return list(np.random.default_rng(seed).integers(lo, hi, size=n))


class TestMaskRandom:
    def test_exact_count_at_045(self):
        ex = mask_random(ids(100), 0.45, derive_rng(0, "t"))
        assert len(ex.mask_positions) == 45

    def test_count_at_015(self):
        ex = mask_random(ids(100), 0.15, derive_rng(0, "t"))
        assert len(ex.mask_positions) == 15

    def test_zero_ratio_unchanged(self):
        tokens = ids(20)
        ex = mask_random(tokens, 0.0, derive_rng(0, "t"))
        assert ex.mask_positions == [] and ex.input_ids == tokens

    def test_floor_of_one(self):
        ex = mask_random(ids(10), 0.01, derive_rng(0, "t"))
        assert len(ex.mask_positions) == 1

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            mask_random([], 0.5, derive_rng(0, "t"))

    def test_masked_are_mask_id(self):
        ex = mask_random(ids(30), 0.4, derive_rng(1, "t"))
        for p in ex.mask_positions:
            assert ex.input_ids[p] == MASK

    def test_reserved_never_selected(self):
        tokens = [0, 1, 2, 3, 4] + ids(5)
        ex = mask_random(tokens, 1.0, derive_rng(2, "t"))
        assert all(p >= 5 for p in ex.mask_positions)

    def test_uniformity_monte_carlo(self):
        # each of 20 positions masked with frequency 0.15 +/- 0.01 over 10k trials
        n, ratio, trials = 20, 0.15, 10_000
        tokens = ids(n)
        counts = np.zeros(n)
        for t in range(trials):
            ex = mask_random(tokens, ratio, derive_rng(3, "mc", t))
            counts[ex.mask_positions] += 1
        freqs = counts / trials
        assert np.all(np.abs(freqs - ratio) < 0.01)

    def test_determinism(self):
        tokens = ids(40)
        a = mask_random(tokens, 0.3, derive_rng(7, "d"))
        b = mask_random(tokens, 0.3, derive_rng(7, "d"))
        assert a.input_ids == b.input_ids and a.mask_positions == b.mask_positions


class TestMaskSlots:
    def test_template_slots(self):
        vocab = build_vocab(["according to law 17 the defendant committed theft "
                             "and was sentenced to 6 months"])
        tokens = "according to law 17 the defendant committed theft and was sentenced to 6 months".split()
        token_ids = vocab.encode(tokens)
        spans = [(3, 4), (7, 8), (12, 13)]
        ex = mask_slots(token_ids, spans)
        assert ex.mask_positions == [3, 7, 12]
        assert vocab.decode(ex.target_ids) == ["17", "theft", "6"]

    def test_empty_spans(self):
        tokens = ids(10)
        ex = mask_slots(tokens, [])
        assert ex.mask_positions == [] and ex.input_ids == tokens

    def test_out_of_bounds(self):
        with pytest.raises(SpanOutOfBounds):
            mask_slots(ids(4), [(2, 6)])

    def test_overlapping_spans_rejected(self):
        with pytest.raises(SpanOutOfBounds):
            mask_slots(ids(10), [(1, 4), (3, 6)])

    def test_unmasked_positions_untouched(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            n = int(rng.integers(4, 30))
            tokens = ids(n, seed=int(rng.integers(0, 1000)))
            cut = sorted(rng.choice(n + 1, size=2, replace=False))
            spans = [(int(cut[0]), int(cut[1]))]
            ex = mask_slots(tokens, spans)
            inside = set(range(*spans[0]))
            for i, tok in enumerate(tokens):
                if i in inside:
                    assert ex.input_ids[i] == MASK
                else:
                    assert ex.input_ids[i] == tok


class TestMaskTfIdf:
    def _fixture(self):
        texts = ["alpha beta gamma delta", "alpha beta common common",
                 "alpha common filler words"]
        vocab = build_vocab(texts)
        stats = build_stats((f"d{i}", t) for i, t in enumerate(texts))
        return vocab, stats

    def test_tie_break_lower_index(self):
        vocab, stats = self._fixture()
        token_ids = vocab.encode(["alpha", "alpha", "alpha", "alpha"])
        ex = mask_tfidf(token_ids, 0.5, stats, vocab)
        assert ex.mask_positions == [0, 1]

    def test_unique_max_selected(self):
        vocab, stats = self._fixture()
        # gamma is rarer than alpha (df 1 vs 3)
        token_ids = vocab.encode(["alpha", "gamma", "alpha"])
        ex = mask_tfidf(token_ids, 0.3, stats, vocab)
        assert ex.mask_positions == [1]

    def test_matches_sort_oracle(self):
        vocab, stats = self._fixture()
        rng = np.random.default_rng(5)
        pool = [t for t in vocab.id_to_token[5:]]
        for _ in range(25):
            tokens = [pool[int(i)] for i in rng.integers(0, len(pool), size=12)]
            token_ids = vocab.encode(tokens)
            ratio = float(rng.uniform(0.1, 0.9))
            ex = mask_tfidf(token_ids, ratio, stats, vocab)
            from collections import Counter
            tf = Counter(tokens)
            scored = sorted(((-tf_idf(t, tf, stats), i) for i, t in enumerate(tokens)))
            k = mask_count(ratio, len(tokens))
            expected = sorted(i for _, i in scored[:k])
            assert ex.mask_positions == expected


class TestSharedInvariants:
    @given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0), st.integers(1, 60))
    @settings(max_examples=60, deadline=None)
    def test_reconstruction_identity_random(self, seed, ratio, n):
        tokens = ids(n, seed=seed % 1000)
        ex = mask_random(tokens, ratio, derive_rng(seed, "h"))
        assert ex.restore() == tokens
        assert len(ex.mask_positions) == len(ex.target_ids)

    def test_reconstruction_identity_slots_and_tfidf(self):
        texts = ["one two three four five six"]
        vocab = build_vocab(texts)
        stats = build_stats([("d0", texts[0])])
        tokens = vocab.encode(texts[0].split())
        assert mask_slots(tokens, [(1, 3)]).restore() == tokens
        assert mask_tfidf(tokens, 0.5, stats, vocab).restore() == tokens

    @given(st.floats(0.01, 1.0), st.integers(1, 200))
    @settings(max_examples=100, deadline=None)
    def test_mask_count_round_half_up(self, ratio, n):
        k = mask_count(ratio, n)
        assert k == max(1, int(np.floor(ratio * n + 0.5)))
        assert 1 <= k <= n or k == n

    def test_policy_validation(self):
        with pytest.raises(ValueError):
            MaskPolicy(kind="nope")
        with pytest.raises(ValueError):
            MaskPolicy(kind="random", ratio=1.5)
