"""Synthetic data generators backing the oracle-based tests.

Two regimes: ground-truth Gaussian LDS sampling (well-specified, with the
same subspace-confined noise structure the text model uses) and indicator
data from a small random HMM (mis-specified, text-like).  Every generator
is a pure function of its configuration and seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from textlds.model import LdsParams, project_off, spectral_radius


@dataclass(frozen=True)
class GroundTruthSystem:
    """A small dense LDS with the text-style noise structure.

    D = I - u u^T - C @ D_core @ C^T for a positive unit vector u with
    col(C) orthogonal to u, so sampled observations live exactly on the
    subspace orthogonal to u, mimicking centered whitened one-hot data.
    """

    A: np.ndarray
    C: np.ndarray
    D_core: np.ndarray
    u: np.ndarray
    seed: int = 0

    @property
    def h(self):
        return self.A.shape[0]

    @property
    def V(self):
        return self.C.shape[0]

    def noise_covariance(self):
        V = self.V
        return np.eye(V) - np.outer(self.u, self.u) - self.C @ self.D_core @ self.C.T

    def to_params(self):
        """The same system as an LdsParams (mu = u^2, whitened coordinates)."""
        return LdsParams(
            A=self.A.copy(),
            C=self.C.copy(),
            D_core=self.D_core.copy(),
            mu=self.u**2,
        )


def random_ground_truth(
    h, V, seed, rho=0.9, emission_scale=2.0, noise_core_scale=0.2, eigenvalues=None
):
    """Sample a stable ground-truth system.

    The transition matrix is rescaled to spectral radius `rho`, or built
    with the given real `eigenvalues` under a random well-conditioned
    similarity (useful when every mode must be identifiable); emission
    columns are random, orthogonalized against u, and scaled so that
    observations are informative (which keeps the filter matrix well
    inside the unit disk).  The noise core is shrunk until D is PSD.
    """
    rng = np.random.default_rng(seed)
    if eigenvalues is not None:
        if len(eigenvalues) != h:
            raise ValueError("need exactly h eigenvalues")
        S = rng.standard_normal((h, h)) + np.eye(h)
        A = S @ np.diag(eigenvalues) @ np.linalg.inv(S)
    else:
        A = rng.standard_normal((h, h))
        A *= rho / spectral_radius(A)
    u = rng.uniform(0.2, 1.0, size=V)
    u /= np.linalg.norm(u)
    C = rng.standard_normal((V, h))
    C = project_off(C, u)
    C *= emission_scale / np.linalg.norm(C, axis=0, keepdims=True)
    M = rng.standard_normal((h, h))
    M = noise_core_scale * (M @ M.T) / h
    # shrink until I - uu^T - C M C^T is PSD on the subspace
    phi = C.T @ C
    vals, vecs = np.linalg.eigh(phi)
    L = vecs * np.sqrt(np.clip(vals, 0, None))[None, :]
    top = np.linalg.eigvalsh(L.T @ M @ L).max()
    if top >= 0.95:
        M *= 0.9 / top
    return GroundTruthSystem(A=A, C=C, D_core=M, u=u, seed=seed)


def sample_lds(system, T, seed=None):
    """Draw a length-T observation sequence from the generative model.

    x_t = A x_{t-1} + eta, w_t = C x_t + eps with eta ~ N(0, I) and
    eps ~ N(0, D); x_0 = 0.  Deterministic given the seed.

    Returns (W, X): observations (T, V) and latent states (T, h).
    """
    if spectral_radius(system.A) >= 1.0:
        raise ValueError("unstable system; refusing to sample")
    rng = np.random.default_rng(system.seed if seed is None else seed)
    D = system.noise_covariance()
    vals, vecs = np.linalg.eigh(D)
    vals = np.clip(vals, 0.0, None)
    # flush numerically-null directions so samples stay exactly on the
    # data subspace (mirroring one-hot text confined to mu_sqrt-perp)
    vals[vals < 1e-12 * max(vals.max(), 1.0)] = 0.0
    D_half = vecs * np.sqrt(vals)[None, :]
    h, V = system.h, system.V
    X = np.empty((T, h))
    W = np.empty((T, V))
    x = np.zeros(h)
    eta = rng.standard_normal((T, h))
    eps = rng.standard_normal((T, V)) @ D_half.T
    for t in range(T):
        x = system.A @ x + eta[t]
        X[t] = x
        W[t] = system.C @ x + eps[t]
    return W, X


def empirical_lag_covariances(W, max_lag):
    """Dense empirical E[w_{t+k} w_t^T] for k = 0..max_lag.

    `W` is either a (T, V) array or a list of such per-sentence arrays;
    pairs never cross array boundaries and each lag is normalized by its
    own number of valid pairs.
    """
    chunks = [W] if isinstance(W, np.ndarray) else list(W)
    V = chunks[0].shape[1]
    psis = []
    for k in range(max_lag + 1):
        acc = np.zeros((V, V))
        n = 0
        for chunk in chunks:
            if chunk.shape[0] <= k:
                continue
            late = chunk[k:] if k else chunk
            early = chunk[: chunk.shape[0] - k] if k else chunk
            acc += late.T @ early
            n += late.shape[0]
        psis.append(acc / max(n, 1))
    return psis


def sample_hmm_text(n_states, V, T, seed, sentence_len=20):
    """Token-id sentences from a random ergodic HMM.

    One stationary chain of length T is drawn and chopped into fixed-length
    sentences (the hidden state persists across the chop, so within-sentence
    pair statistics match the chain's analytic joint).  Deterministic given
    the seed.

    Returns (sentences, transition, emission, initial) where the last three
    expose the generating chain for analytic oracles.
    """
    rng = np.random.default_rng(seed)
    trans = rng.dirichlet(np.ones(n_states), size=n_states)
    emit = rng.dirichlet(np.full(V, 0.5), size=n_states)
    # stationary distribution of the (ergodic, since Dirichlet draws are
    # strictly positive) chain
    vals, vecs = np.linalg.eig(trans.T)
    idx = np.argmin(np.abs(vals - 1.0))
    pi = np.real(vecs[:, idx])
    pi = np.abs(pi) / np.abs(pi).sum()
    states = np.empty(T, dtype=np.int64)
    s = rng.choice(n_states, p=pi)
    for t in range(T):
        states[t] = s
        s = rng.choice(n_states, p=trans[s])
    # vectorized emission sampling given the state path
    uniforms = rng.random(T)
    cdf = np.cumsum(emit, axis=1)
    tokens = (uniforms[:, None] > cdf[states]).sum(axis=1).astype(np.int64)
    sentences = [
        tokens[i : i + sentence_len] for i in range(0, T, sentence_len)
    ]
    return sentences, trans, emit, pi
