"""Synthetic generators: reproducibility and moment sanity."""

import numpy as np
import pytest

from textlds.ssid import solve_lyapunov
from textlds.synth import (
    GroundTruthSystem,
    empirical_lag_covariances,
    random_ground_truth,
    sample_hmm_text,
    sample_lds,
)


class TestSampleLds:
    def test_degenerate_dynamics_iid_noise(self):
        system = random_ground_truth(2, 5, seed=0)
        frozen = GroundTruthSystem(
            A=np.zeros((2, 2)),
            C=np.zeros((5, 2)),
            D_core=np.zeros((2, 2)),
            u=system.u,
            seed=3,
        )
        W, _ = sample_lds(frozen, 40_000)
        D = frozen.noise_covariance()
        emp = W.T @ W / W.shape[0]
        assert np.abs(emp - D).max() < 4.0 / np.sqrt(40_000)

    def test_lag0_matches_model_covariance(self):
        system = random_ground_truth(2, 4, seed=1)
        T = 60_000
        W, _ = sample_lds(system, T, seed=2)
        sigma = solve_lyapunov(system.A)
        want = system.C @ sigma @ system.C.T + system.noise_covariance()
        emp = empirical_lag_covariances(W, 0)[0]
        scale = np.linalg.norm(want)
        assert np.linalg.norm(emp - want) < 3.0 / np.sqrt(T) * scale * 10

    def test_seed_reproducibility(self):
        system = random_ground_truth(3, 6, seed=4)
        W1, X1 = sample_lds(system, 100, seed=9)
        W2, X2 = sample_lds(system, 100, seed=9)
        assert np.array_equal(W1, W2)
        assert np.array_equal(X1, X2)

    def test_unstable_system_raises(self):
        system = random_ground_truth(2, 5, seed=5)
        bad = GroundTruthSystem(
            A=np.eye(2) * 1.01, C=system.C, D_core=system.D_core, u=system.u
        )
        with pytest.raises(ValueError, match="unstable"):
            sample_lds(bad, 10)

    def test_observations_orthogonal_to_u(self):
        system = random_ground_truth(3, 7, seed=6)
        W, _ = sample_lds(system, 500, seed=7)
        assert np.abs(W @ system.u).max() < 1e-10

    def test_controlled_spectrum(self):
        system = random_ground_truth(3, 6, seed=8, eigenvalues=(0.9, 0.6, 0.3))
        got = np.sort(np.linalg.eigvals(system.A).real)
        assert np.allclose(got, [0.3, 0.6, 0.9], atol=1e-10)


class TestSampleHmmText:
    def test_single_state_is_iid(self):
        sents, trans, emit, pi = sample_hmm_text(1, 8, 30_000, seed=0)
        psis = []
        V = 8
        # empirical centered lag-1 covariance should vanish for iid text
        onehots = [np.eye(V)[np.asarray(s)] for s in sents]
        mu = np.concatenate([s for s in sents])
        freq = np.bincount(mu, minlength=V) / mu.size
        acc = np.zeros((V, V))
        n = 0
        for s in onehots:
            acc += s[1:].T @ s[:-1]
            n += s.shape[0] - 1
        cov = acc / n - np.outer(freq, freq)
        assert np.abs(cov).max() < 5.0 / np.sqrt(30_000)

    def test_seed_reproducibility(self):
        s1, t1, e1, p1 = sample_hmm_text(4, 10, 500, seed=3)
        s2, t2, e2, p2 = sample_hmm_text(4, 10, 500, seed=3)
        assert all(np.array_equal(a, b) for a, b in zip(s1, s2))
        assert np.array_equal(t1, t2) and np.array_equal(e1, e2)

    def test_lag1_joint_matches_analytic(self):
        n_states, V, T = 3, 6, 120_000
        sents, trans, emit, pi = sample_hmm_text(n_states, V, T, seed=5)
        analytic = np.einsum("s,sa,st,tb->ab", pi, emit, trans, emit)
        acc = np.zeros((V, V))
        n = 0
        for s in sents:
            a = np.asarray(s)
            np.add.at(acc, (a[:-1], a[1:]), 1)
            n += a.size - 1
        emp = acc / n
        assert np.abs(emp - analytic).max() < 5.0 / np.sqrt(T)

    def test_sentence_lengths(self):
        sents, _, _, _ = sample_hmm_text(2, 5, 105, seed=6, sentence_len=20)
        assert [len(s) for s in sents] == [20, 20, 20, 20, 20, 5]


def test_empirical_lag_covariances_respects_boundaries(rng):
    V = 4
    chunks = [rng.standard_normal((10, V)), rng.standard_normal((7, V))]
    psis = empirical_lag_covariances(chunks, 2)
    want = np.zeros((V, V))
    n = 0
    for c in chunks:
        want += c[2:].T @ c[:-2]
        n += c.shape[0] - 2
    assert np.allclose(psis[2], want / n, atol=1e-12)
