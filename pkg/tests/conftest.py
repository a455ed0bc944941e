"""Shared oracles and fixtures: dense reference computations kept independent
of the structured implementation paths they check."""

import numpy as np
import pytest

from textlds.corpus import Vocabulary, accumulate_counts, apply_pseudocounts
from textlds.synth import sample_hmm_text


def toy_vocab(V):
    """A plain id vocabulary w000..w{V-1} with OOV/NUM aliased to 0/1."""
    tokens = tuple(f"w{i:03d}" for i in range(V))
    return Vocabulary(
        token_of_id=tokens,
        id_of_token={t: i for i, t in enumerate(tokens)},
        oov_id=0,
        num_id=1,
    )


def hmm_stats(V=12, T=4000, K_max=7, seed=0, n_states=4, sentence_len=25, pseudo=0.0):
    """Counts from synthetic HMM text, with every type guaranteed present."""
    sents, _, _, _ = sample_hmm_text(n_states, V, T, seed, sentence_len=sentence_len)
    stats = accumulate_counts(sents, toy_vocab(V), K_max)
    if pseudo or (stats.mu == 0).any():
        stats = apply_pseudocounts(stats, pseudo if pseudo else 1.0)
    return stats, sents


def dense_joint_conditioning(system, W):
    """Brute-force posterior of the latent states by dense Gaussian conditioning.

    Builds the joint covariance of (x_1..x_T, w_1..w_T) with x_0 = 0 and
    conditions the state block on the observed block via pseudoinverse.
    Returns (means T x h, marginal covariances T x h x h).
    """
    A, C = system.A, system.C
    D = system.noise_covariance()
    h, V = A.shape[0], C.shape[0]
    T = W.shape[0]
    P = [None] * (T + 1)
    P[1] = np.eye(h)
    for t in range(2, T + 1):
        P[t] = A @ P[t - 1] @ A.T + np.eye(h)
    covx = np.zeros((T * h, T * h))
    for t in range(1, T + 1):
        for s in range(t, T + 1):
            blk = P[t] @ np.linalg.matrix_power(A, s - t).T
            covx[(t - 1) * h : t * h, (s - 1) * h : s * h] = blk
            covx[(s - 1) * h : s * h, (t - 1) * h : t * h] = blk.T
    Cb = np.kron(np.eye(T), C)
    covw = Cb @ covx @ Cb.T + np.kron(np.eye(T), D)
    covxw = covx @ Cb.T
    pinv = np.linalg.pinv(covw, rcond=1e-12)
    mean = (covxw @ (pinv @ W.ravel())).reshape(T, h)
    cov_post = covx - covxw @ pinv @ covxw.T
    margs = np.stack(
        [cov_post[t * h : (t + 1) * h, t * h : (t + 1) * h] for t in range(T)]
    )
    return mean, margs


def dense_filter_conditioning(system, W):
    """Filtered posterior (given w_{1:t}) by dense conditioning, per step."""
    A, C = system.A, system.C
    D = system.noise_covariance()
    h, V = A.shape[0], C.shape[0]
    T = W.shape[0]
    P = [None] * (T + 1)
    P[1] = np.eye(h)
    for t in range(2, T + 1):
        P[t] = A @ P[t - 1] @ A.T + np.eye(h)
    covx = np.zeros((T * h, T * h))
    for t in range(1, T + 1):
        for s in range(t, T + 1):
            blk = P[t] @ np.linalg.matrix_power(A, s - t).T
            covx[(t - 1) * h : t * h, (s - 1) * h : s * h] = blk
            covx[(s - 1) * h : s * h, (t - 1) * h : t * h] = blk.T
    Cb = np.kron(np.eye(T), C)
    covw = Cb @ covx @ Cb.T + np.kron(np.eye(T), D)
    covxw = covx @ Cb.T
    wflat = W.ravel()
    means = np.zeros((T, h))
    covs = np.zeros((T, h, h))
    for t in range(1, T + 1):
        k = t * V
        pw = np.linalg.pinv(covw[:k, :k], rcond=1e-12)
        sl = slice((t - 1) * h, t * h)
        means[t - 1] = covxw[sl, :k] @ (pw @ wflat[:k])
        covs[t - 1] = covx[sl, sl] - covxw[sl, :k] @ pw @ covxw[sl, :k].T
    return means, covs


def random_woodbury_instance(rng, n=None, p=None, well_conditioned=True):
    """A diagonal-plus-low-rank instance with its dense realization."""
    n = n if n is not None else int(rng.integers(4, 33))
    p = p if p is not None else int(rng.integers(1, 5))
    if well_conditioned:
        diag = rng.uniform(0.5, 2.0, size=n)
        scale = 0.5
    else:
        diag = rng.uniform(0.05, 5.0, size=n)
        scale = 1.0
    U = scale * rng.standard_normal((n, p))
    S = scale * rng.standard_normal((p, p))
    S = S @ S.T + 0.2 * np.eye(p)
    Vt = scale * rng.standard_normal((p, n))
    dense = np.diag(diag) + U @ S @ Vt
    return diag, U, S, Vt, dense


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
