"""Subspace identification (n4sid flavor) from whitened lag covariances.

Builds the block Hankel operator, factors it with a randomized truncated
SVD, reads transition/emission estimates off the factors, and assembles a
full parameter set with a PSD-corrected structured noise covariance.  No
step materializes a V x V dense matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from textlds.corpus import whiten_stats
from textlds.linalg import LinearOperator, StructuredMatrix, randomized_svd
from textlds.model import LdsParams, project_off, stabilize_transition

# Horizon defaults mirroring the full-scale text configuration.
R_SSID_DEFAULT = 4
R_EM_DEFAULT = 7
H_DEFAULT = 200

STABILIZE_MARGIN = 1e-6


def _as_structured(psi):
    if isinstance(psi, StructuredMatrix):
        return psi
    if hasattr(psi, "as_structured"):
        return psi.as_structured()
    return StructuredMatrix.from_dense(np.asarray(psi, dtype=np.float64))


def build_hankel_operator(psis, r):
    """Matrix-free block Hankel operator H_r with block (a, b) = Psi_{r+a-b}.

    `psis` is indexed by lag; lags 1..2r-1 must be present (index 0 may be
    None or the lag-0 covariance, which the Hankel matrix never uses).
    """
    if r < 1:
        raise ValueError("horizon r must be at least 1")
    needed = range(1, 2 * r)
    if len(psis) <= 2 * r - 2 or any(
        k < len(psis) and psis[k] is None for k in needed
    ):
        raise ValueError(f"Hankel horizon r={r} needs lags 1..{2 * r - 1}")
    blocks = {k: _as_structured(psis[k]) for k in needed}
    V = blocks[1].shape[0]

    def apply(X):
        X = X.reshape(r * V, -1)
        parts = [X[b * V : (b + 1) * V] for b in range(r)]
        out = np.zeros((r * V, X.shape[1]))
        for a in range(r):
            acc = out[a * V : (a + 1) * V]
            for b in range(r):
                acc += blocks[r + a - b].matmat(parts[b])
        return out

    def apply_transpose(Y):
        Y = Y.reshape(r * V, -1)
        parts = [Y[a * V : (a + 1) * V] for a in range(r)]
        out = np.zeros((r * V, Y.shape[1]))
        for b in range(r):
            acc = out[b * V : (b + 1) * V]
            for a in range(r):
                acc += blocks[r + a - b].rmatmat(parts[a])
        return out

    return LinearOperator((r * V, r * V), apply, apply_transpose)


@dataclass
class SsidIntermediate:
    """Rank-h Hankel factorization H_r ~ Gamma_r @ Delta_r."""

    Gamma: np.ndarray  # (rV, h)
    Delta: np.ndarray  # (h, rV)
    singular_values: np.ndarray
    r: int
    V: int

    @property
    def G(self):
        """Last block of Delta: the state-observation covariance at lag 0."""
        return self.Delta[:, (self.r - 1) * self.V :]


def factor_hankel(op, h, r=None, seed=0, oversample=10, power_iters=2):
    """Randomized rank-h factorization of the Hankel operator.

    Gamma = U sqrt(S) and Delta = sqrt(S) V^T, so Gamma @ Delta reconstructs
    the operator up to the discarded singular mass.
    """
    U, s, Vmat = randomized_svd(op, h, oversample=oversample, power_iters=power_iters, seed=seed)
    root = np.sqrt(s)
    gamma = U * root[None, :]
    delta = root[:, None] * Vmat.T
    nrows = op.shape[0]
    if r is None:
        raise ValueError("factor_hankel needs the horizon r to delimit blocks")
    V = nrows // r
    return SsidIntermediate(Gamma=gamma, Delta=delta, singular_values=s, r=r, V=V)


def recover_A(delta, V, stabilize=True):
    """Transition estimate from the shift structure of Delta_r.

    Solves A @ Delta^{2:r} = Delta^{1:(r-1)} in least squares; requires
    r >= 2 blocks and a full-rank trailing block row.
    """
    h, total = delta.shape
    r = total // V
    if r < 2:
        raise ValueError("recovering A needs a horizon of at least 2 blocks")
    past = delta[:, V:]  # blocks 2..r
    future = delta[:, : (r - 1) * V]  # blocks 1..r-1
    gram = past @ past.T
    if np.linalg.matrix_rank(gram, tol=1e-10 * max(1.0, np.trace(gram))) < h:
        raise np.linalg.LinAlgError("rank-deficient Delta blocks; cannot recover A")
    A = np.linalg.solve(gram, past @ future.T).T
    return stabilize_transition(A, STABILIZE_MARGIN) if stabilize else A


def recover_C(gamma, A, V, mode="regression"):
    """Emission estimate from the observability blocks of Gamma_r.

    The default regresses all blocks Gamma^{(k)} ~ C A^{k-1}; mode
    "first_block" reads off Gamma^{(1)} directly.
    """
    total, h = gamma.shape
    r = total // V
    if mode == "first_block" or r == 1:
        return gamma[:V].copy()
    if mode != "regression":
        raise ValueError(f"unknown recovery mode {mode!r}")
    num = np.zeros((V, h))
    den = np.zeros((h, h))
    B = np.eye(h)
    for k in range(r):
        block = gamma[k * V : (k + 1) * V]
        num += block @ B.T
        den += B @ B.T
        B = A @ B
    return np.linalg.solve(den, num.T).T


def solve_lyapunov(A, tol=1e-12, max_iters=100_000):
    """Fixed point of Sigma <- A Sigma A^T + I, with doubling acceleration.

    Each doubling step squares the propagator, so the geometric series
    converges in O(log) steps even near the stability margin; the returned
    matrix satisfies the fixed-point residual at the requested tolerance.
    """
    h = A.shape[0]
    sigma = np.eye(h)
    M = A.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(max_iters):
            update = M @ sigma @ M.T
            sigma = sigma + update
            if np.linalg.norm(update, "fro") < tol:
                sigma = 0.5 * (sigma + sigma.T)
                resid = np.linalg.norm(sigma - A @ sigma @ A.T - np.eye(h), "fro")
                if resid > max(tol, 1e-10 * np.linalg.norm(sigma, "fro")):
                    raise RuntimeError("Lyapunov fixed point did not satisfy residual")
                return sigma
            M = M @ M
            if not np.isfinite(M).all():
                break
    raise RuntimeError("Lyapunov iteration did not converge; transition unstable?")


def recover_D(whitened_psi0, C, sigma_unc):
    """Structured noise core implied by D = Psi_0 - C Sigma C^T.

    With the whitened anchor Psi_0 = I - mu_sqrt mu_sqrt^T, the subtracted
    term is already in emission coordinates, so the stored core is simply
    the unconditional state covariance (symmetrized).  The `whitened_psi0`
    argument documents the anchor; it is not consumed numerically.
    """
    del whitened_psi0, C
    return 0.5 * (sigma_unc + sigma_unc.T)


def psd_correct_D(C, D_core, tol=1e-13, max_iters=10_000):
    """Minimal shrinkage making D PSD on the data subspace.

    Finds s0, the top eigenvalue of C @ D_core @ C^T, by power iteration on
    the factored form (the iteration runs in emission coordinates through
    the Gram matrix, never forming a V x V matrix).  If s0 < 1 the core is
    returned unchanged with alpha0 = 0; otherwise alpha0 = (s0 - 1) / s0
    and the core is scaled by 1 - alpha0.
    """
    h = D_core.shape[0]
    if h == 0 or not np.any(D_core):
        return 0.0, D_core.copy()
    phi = C.T @ C
    y = np.ones(h) / np.sqrt(h)
    s_prev = np.inf
    for _ in range(max_iters):
        z = phi @ y
        w = D_core @ z
        denom = float(y @ z)  # |C y|^2
        if denom <= 0:
            return 0.0, D_core.copy()
        s0 = float(z @ w) / denom
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, D_core.copy()
        y = w / norm
        if abs(s0 - s_prev) <= tol * max(1.0, abs(s0)):
            break
        s_prev = s0
    else:
        raise RuntimeError("power iteration for the PSD correction did not converge")
    if s0 < 1.0:
        return 0.0, D_core.copy()
    alpha0 = (s0 - 1.0) / s0
    return alpha0, (1.0 - alpha0) * D_core


def ssid_from_covariances(psis, h, r, mu, seed=0, c_mode="regression"):
    """Full subspace identification from whitened lag covariances.

    `psis` is indexed by lag and must cover 1..2r-1.  Returns LdsParams in
    whitened coordinates with the PSD-corrected structured noise.
    """
    if h < 1:
        raise ValueError("latent dimension h must be at least 1")
    if r < 2:
        raise ValueError("SSID horizon r must be at least 2")
    mu = np.asarray(mu, dtype=np.float64)
    op = build_hankel_operator(psis, r)
    inter = factor_hankel(op, h, r=r, seed=seed)
    A = recover_A(inter.Delta, inter.V)
    C = recover_C(inter.Gamma, A, inter.V, mode=c_mode)
    C = project_off(C, np.sqrt(mu))
    sigma_unc = solve_lyapunov(A)
    D_core = recover_D(None, C, sigma_unc)
    alpha0, D_core = psd_correct_D(C, D_core)
    return LdsParams(
        A=A,
        C=C,
        D_core=D_core,
        mu=mu,
        meta={"r": r, "seed": seed, "ssid_alpha0": alpha0},
    )


def ssid_pipeline(stats, h, r=R_SSID_DEFAULT, seed=0, c_mode="regression"):
    """Counts-to-parameters subspace identification for a text corpus."""
    psis, _ = whiten_stats(stats, max_lag=2 * r - 1)
    params = ssid_from_covariances(psis, h, r, stats.mu, seed=seed, c_mode=c_mode)
    params.validate()
    return params
