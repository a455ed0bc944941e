"""Corpus statistics: vocabulary, counting, lag covariances, whitening, IO."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import toy_vocab
from textlds.corpus import (
    NUM_TOKEN,
    OOV_TOKEN,
    accumulate_counts,
    apply_pseudocounts,
    build_vocab,
    lag_covariance,
    load_counts,
    merge_stats,
    save_counts,
    whiten_stats,
)


class TestBuildVocab:
    def test_frequency_then_lexicographic(self):
        vocab = build_vocab([["a", "b", "a"]], max_types=10)
        assert set(vocab.token_of_id) == {"a", "b", OOV_TOKEN, NUM_TOKEN}
        # descending frequency, ties broken lexicographically
        assert vocab.token_of_id[0] == "a"
        assert vocab.token_of_id[1] == "b"
        assert vocab.token_of_id[2] == NUM_TOKEN  # "NUM" < "OOV"
        assert vocab.token_of_id[3] == OOV_TOKEN

    def test_digits_map_to_num(self):
        vocab = build_vocab([["x", "7", "x"]], max_types=10)
        assert "7" not in vocab.id_of_token
        assert vocab.lookup("7") == vocab.num_id
        assert vocab.lookup("1,000") == vocab.num_id
        assert vocab.lookup("3.14") == vocab.num_id
        assert vocab.lookup("a4") != vocab.num_id

    def test_cutoff_sends_rest_to_oov(self):
        vocab = build_vocab([["a", "b", "c", "a"]], max_types=1)
        assert "a" in vocab.id_of_token
        assert "b" not in vocab.id_of_token
        assert vocab.lookup("b") == vocab.oov_id
        assert vocab.lookup("c") == vocab.oov_id

    def test_empty_corpus_raises(self):
        with pytest.raises(ValueError, match="empty corpus"):
            build_vocab([], max_types=5)

    def test_bijection(self):
        vocab = build_vocab([["a", "b", "c", "b"]], max_types=10)
        for i, tok in enumerate(vocab.token_of_id):
            assert vocab.id_of_token[tok] == i
        assert 0 <= vocab.oov_id < vocab.size
        assert 0 <= vocab.num_id < vocab.size


class TestAccumulateCounts:
    def test_hand_counted_pairs(self):
        vocab = build_vocab([["a", "b", "a"]], max_types=10)
        stats = accumulate_counts([["a", "b", "a"]], vocab, K_max=1)
        a, b = vocab.id_of_token["a"], vocab.id_of_token["b"]
        mu = np.zeros(vocab.size)
        mu[a], mu[b] = 2 / 3, 1 / 3
        assert np.allclose(stats.mu, mu)
        pc = stats.pair_counts[0].toarray()
        assert pc[a, b] == 1 and pc[b, a] == 1
        assert pc.sum() == 2

    def test_single_token_sentence_has_no_pairs(self):
        vocab = build_vocab([["a"]], max_types=10)
        stats = accumulate_counts([["a"]], vocab, K_max=2)
        assert stats.T == 1
        assert all(pc.nnz == 0 for pc in stats.pair_counts)

    def test_pairs_do_not_cross_sentences(self):
        vocab = build_vocab([["a", "b"], ["b", "a"]], max_types=10)
        stats = accumulate_counts([["a", "b"], ["b", "a"]], vocab, K_max=1)
        a, b = vocab.id_of_token["a"], vocab.id_of_token["b"]
        pc = stats.pair_counts[0].toarray()
        assert pc[a, b] == 1 and pc[b, a] == 1
        assert pc[b, b] == 0  # would require crossing the boundary

    def test_stream_mode_crosses_sentences(self):
        vocab = build_vocab([["a", "b"], ["b", "a"]], max_types=10)
        stats = accumulate_counts(
            [["a", "b"], ["b", "a"]], vocab, K_max=1, cross_sentences=True
        )
        b = vocab.id_of_token["b"]
        assert stats.pair_counts[0].toarray()[b, b] == 1

    def test_pair_total_matches_position_count(self):
        vocab = toy_vocab(6)
        sents = [np.array([0, 1, 2, 3]), np.array([4, 5])]
        stats = accumulate_counts(sents, vocab, K_max=3)
        # lag k contributes max(len-k, 0) pairs per sentence
        assert stats.n_pairs(1) == 3 + 1
        assert stats.n_pairs(2) == 2 + 0
        assert stats.n_pairs(3) == 1


class TestMergeStats:
    def test_merge_with_empty_is_identity(self):
        vocab = toy_vocab(4)
        s = accumulate_counts([np.array([0, 1, 2])], vocab, K_max=2)
        empty = accumulate_counts([], vocab, K_max=2)
        merged = merge_stats(s, empty)
        assert merged.T == s.T
        assert np.allclose(merged.mu, s.mu)
        for a, b in zip(merged.pair_counts, s.pair_counts):
            assert (a != b).nnz == 0

    def test_commutative(self):
        vocab = toy_vocab(4)
        s1 = accumulate_counts([np.array([0, 1, 2])], vocab, K_max=2)
        s2 = accumulate_counts([np.array([2, 3])], vocab, K_max=2)
        m12, m21 = merge_stats(s1, s2), merge_stats(s2, s1)
        assert np.allclose(m12.mu, m21.mu)
        for a, b in zip(m12.pair_counts, m21.pair_counts):
            assert (a != b).nnz == 0

    def test_chunked_equals_whole(self, rng):
        vocab = toy_vocab(5)
        sents = [rng.integers(0, 5, size=rng.integers(1, 9)) for _ in range(10)]
        whole = accumulate_counts(sents, vocab, K_max=3)
        part1 = accumulate_counts(sents[:4], vocab, K_max=3)
        part2 = accumulate_counts(sents[4:], vocab, K_max=3)
        merged = merge_stats(part1, part2)
        assert merged.T == whole.T
        assert np.allclose(merged.mu, whole.mu)
        for a, b in zip(merged.pair_counts, whole.pair_counts):
            assert (a != b).nnz == 0

    def test_vocab_mismatch_raises(self):
        s1 = accumulate_counts([np.array([0, 1])], toy_vocab(4), K_max=1)
        s2 = accumulate_counts([np.array([0, 1])], toy_vocab(5), K_max=1)
        with pytest.raises(ValueError, match="vocabulary"):
            merge_stats(s1, s2)

    @settings(max_examples=30, deadline=None)
    @given(
        chunks=st.lists(
            st.lists(
                st.lists(st.integers(0, 3), min_size=1, max_size=6),
                min_size=0,
                max_size=4,
            ),
            min_size=2,
            max_size=4,
        )
    )
    def test_merge_associative_property(self, chunks):
        vocab = toy_vocab(4)
        stats = [
            accumulate_counts([np.array(s) for s in chunk], vocab, K_max=2)
            for chunk in chunks
        ]
        left = stats[0]
        for s in stats[1:]:
            left = merge_stats(left, s)
        right = stats[-1]
        for s in reversed(stats[:-1]):
            right = merge_stats(s, right)
        assert left.T == right.T
        for a, b in zip(left.pair_counts, right.pair_counts):
            assert (a != b).nnz == 0


class TestPseudocounts:
    def test_zero_is_noop(self):
        vocab = toy_vocab(3)
        s = accumulate_counts([np.array([0, 1, 1])], vocab, K_max=1)
        assert np.allclose(apply_pseudocounts(s, 0).mu, s.mu)

    def test_arithmetic(self):
        vocab = toy_vocab(2)
        s = accumulate_counts([np.array([1, 1, 1, 1])], vocab, K_max=1)
        smoothed = apply_pseudocounts(s, 1)
        assert np.allclose(smoothed.mu, [1 / 6, 5 / 6])

    def test_positivity(self):
        vocab = toy_vocab(5)
        s = accumulate_counts([np.array([0, 0, 1])], vocab, K_max=1)
        assert (apply_pseudocounts(s, 0.5).mu > 0).all()
        assert np.isclose(apply_pseudocounts(s, 0.5).mu.sum(), 1.0)


class TestLagCovariance:
    def test_lag0_form(self):
        vocab = toy_vocab(2)
        s = accumulate_counts([np.array([0, 1, 0, 1])], vocab, K_max=1)
        psi0 = lag_covariance(s, 0).to_dense()
        assert np.allclose(psi0, [[0.25, -0.25], [-0.25, 0.25]])

    def test_row_col_sums_vanish(self, rng):
        vocab = toy_vocab(6)
        sents = [rng.integers(0, 6, size=rng.integers(2, 12)) for _ in range(8)]
        s = accumulate_counts(sents, vocab, K_max=3)
        for k in range(4):
            dense = lag_covariance(s, k).to_dense()
            assert np.abs(dense.sum(axis=0)).max() < 1e-12
            assert np.abs(dense.sum(axis=1)).max() < 1e-12

    def test_matches_dense_outer_product_oracle(self, rng):
        # Psi_k = E[w_{t+k} w_t^T] with per-lag pair-marginal centering
        vocab = toy_vocab(5)
        sents = [rng.integers(0, 5, size=20) for _ in range(50)]
        s = accumulate_counts(sents, vocab, K_max=2)
        V = 5
        for k in (1, 2):
            acc = np.zeros((V, V))
            late_m = np.zeros(V)
            early_m = np.zeros(V)
            n = 0
            for sent in sents:
                for t in range(len(sent) - k):
                    late = np.zeros(V)
                    late[sent[t + k]] = 1
                    early = np.zeros(V)
                    early[sent[t]] = 1
                    acc += np.outer(late, early)
                    late_m += late
                    early_m += early
                    n += 1
            want = acc / n - np.outer(late_m / n, early_m / n)
            got = lag_covariance(s, k).to_dense()
            assert np.allclose(got, want, atol=1e-12)

    def test_structured_matvec_agrees_with_dense(self, rng):
        vocab = toy_vocab(8)
        sents = [rng.integers(0, 8, size=30) for _ in range(30)]
        s = accumulate_counts(sents, vocab, K_max=2)
        for k in range(3):
            cov = lag_covariance(s, k)
            dense = cov.to_dense()
            x = rng.standard_normal(8)
            assert np.allclose(cov.matvec(x), dense @ x, rtol=1e-12, atol=1e-12)

    def test_out_of_range_lag(self):
        vocab = toy_vocab(3)
        s = accumulate_counts([np.array([0, 1, 2])], vocab, K_max=1)
        with pytest.raises(ValueError):
            lag_covariance(s, 2)


class TestWhitening:
    def test_whitener_formula(self):
        vocab = toy_vocab(2)
        s = accumulate_counts([np.array([0, 1, 1, 1])], vocab, K_max=1)
        _, w = whiten_stats(s)
        assert np.allclose(w, [2.0, 2.0 / np.sqrt(3.0)])

    def test_whitened_psi0_annihilates_musqrt(self, rng):
        vocab = toy_vocab(5)
        sents = [rng.integers(0, 5, size=15) for _ in range(10)]
        s = accumulate_counts(sents, vocab, K_max=2)
        s = apply_pseudocounts(s, 0.5)
        covs, w = whiten_stats(s)
        musqrt = np.sqrt(s.mu)
        assert np.abs(covs[0].matvec(musqrt)).max() < 1e-12

    def test_whitened_matches_dense_scaling(self, rng):
        vocab = toy_vocab(6)
        sents = [rng.integers(0, 6, size=25) for _ in range(20)]
        s = apply_pseudocounts(accumulate_counts(sents, vocab, K_max=2), 0.1)
        covs, w = whiten_stats(s)
        for k in range(3):
            dense = lag_covariance(s, k).to_dense()
            want = np.diag(w) @ dense @ np.diag(w)
            assert np.allclose(covs[k].to_dense(), want, atol=1e-12)

    def test_zero_frequency_raises(self):
        vocab = toy_vocab(4)
        s = accumulate_counts([np.array([0, 1])], vocab, K_max=1)
        with pytest.raises(ValueError, match="pseudocounts"):
            whiten_stats(s)


class TestCountsFile:
    def test_round_trip(self, rng, tmp_path):
        vocab = build_vocab([["a", "b", "7", "c", "a"]], max_types=4)
        sents = [["a", "b", "7"], ["c", "a", "b", "a"]]
        s = accumulate_counts(sents, vocab, K_max=3)
        s = apply_pseudocounts(s, 2.0)
        path = tmp_path / "counts.bin"
        save_counts(s, path)
        loaded = load_counts(path)
        assert loaded.T == s.T
        assert loaded.pseudocount == s.pseudocount
        assert loaded.vocab.token_of_id == s.vocab.token_of_id
        assert np.array_equal(loaded.mu, s.mu)
        for a, b in zip(loaded.pair_counts, s.pair_counts):
            assert (a != b).nnz == 0

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTCOUNTS" * 4)
        with pytest.raises(ValueError, match="magic"):
            load_counts(path)

    def test_memory_scales_with_triples(self, rng):
        # storage is the coordinate list, not a V x V array
        vocab = toy_vocab(1000)
        sents = [rng.integers(0, 1000, size=50) for _ in range(10)]
        s = accumulate_counts(sents, vocab, K_max=2)
        for k in (1, 2):
            assert s.pair_counts[k - 1].nnz <= s.n_pairs(k)
