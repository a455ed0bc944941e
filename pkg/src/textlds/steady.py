"""Steady-state posterior covariances, rank-aware Kalman gain, and likelihood.

The innovation covariance S = C Sigma1 C^T + D is singular along mu_sqrt,
so every solve here goes through its pseudoinverse on the data subspace:

    S+ = (I + C X C^T)^{-1} (I - mu_sqrt mu_sqrt^T),   X = Sigma1 - D_core,

where the inverse is applied through h x h systems only:

    (I + C X C^T)^{-1} = I - C X (I + Phi X)^{-1} C^T,      Phi = C^T C,
    K = Sigma1 C^T S+  = Sigma1 (I + Phi X)^{-1} C^T.

This grouping needs no inverse of X itself, so a singular Sigma1 - D_core
costs nothing; a ridge on (I + Phi X) covers the genuinely degenerate case.
No V x V matrix is ever formed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from textlds.model import spectral_radius

FIXED_POINT_TOL = 1e-12
FIXED_POINT_MAX_ITERS = 100_000
INNER_RIDGE = 1e-10


def _inner_solve(ip, rhs):
    """Solve (I + Phi X) systems, falling back to a scaled ridge."""
    cond = np.linalg.cond(ip)
    if np.isfinite(cond) and cond <= 1e12:
        return np.linalg.solve(ip, rhs)
    warnings.warn(
        f"near-singular steady-state inner system (cond ~ {cond:.3e}); "
        "applying a scaled ridge",
        stacklevel=3,
    )
    ridge = INNER_RIDGE * np.linalg.norm(ip, "fro")
    return np.linalg.solve(ip + ridge * np.eye(ip.shape[0]), rhs)


def _posterior_update(sigma1, phi, D_core):
    """Filtered covariance Sigma0 = Sigma1 - Sigma1 C^T S+ C Sigma1."""
    h = sigma1.shape[0]
    X = sigma1 - D_core
    gain_core = _inner_solve(np.eye(h) + phi @ X, phi)  # (I + Phi X)^{-1} Phi
    sigma0 = sigma1 - sigma1 @ gain_core @ sigma1
    return 0.5 * (sigma0 + sigma0.T)


def solve_posterior_steady_state(
    params, tol=FIXED_POINT_TOL, max_iters=FIXED_POINT_MAX_ITERS
):
    """Fixed point of the predict/update covariance recursion (the DARE).

    Iterates Sigma1 <- A Sigma0 A^T + I followed by the measurement update
    through the subspace pseudoinverse until the Frobenius change drops
    below `tol`.  Returns (Sigma1, Sigma0), both symmetric PSD.
    """
    A = params.A
    h = params.h
    phi = params.emission_gram()
    sigma0 = np.zeros((h, h))
    for _ in range(max_iters):
        sigma1 = A @ sigma0 @ A.T + np.eye(h)
        sigma1 = 0.5 * (sigma1 + sigma1.T)
        new_sigma0 = _posterior_update(sigma1, phi, params.D_core)
        if np.linalg.norm(new_sigma0 - sigma0, "fro") < tol:
            return sigma1, new_sigma0
        sigma0 = new_sigma0
    raise RuntimeError(
        "posterior steady-state iteration did not converge "
        f"within {max_iters} iterations"
    )


@dataclass
class GainOperator:
    """Applies the steady-state Kalman gain K = Sigma1 C^T S+ to V-vectors.

    `inner_core` carries the small matrices needed to apply S+ via the
    Woodbury grouping: X = Sigma1 - D_core, Y = X (I + Phi X)^{-1}, and
    KH = Sigma1 (I + Phi X)^{-1} with K = KH @ C^T.
    """

    C: np.ndarray
    mu_sqrt: np.ndarray
    inner_core: dict = field(repr=False)

    def apply(self, v):
        """K @ v in O(Vh + h^2); the mu_sqrt component is annihilated."""
        return self.inner_core["KH"] @ (self.C.T @ v)

    def sss_pinv_apply(self, v):
        """S+ @ v: project off mu_sqrt, then apply the Woodbury inverse."""
        v = np.asarray(v, dtype=np.float64)
        u = v - np.outer(self.mu_sqrt, self.mu_sqrt @ v) if v.ndim == 2 else (
            v - self.mu_sqrt * (self.mu_sqrt @ v)
        )
        Y = self.inner_core["Y"]
        return u - self.C @ (Y @ (self.C.T @ u))


def compute_gain(params, sigma1):
    """Gain operator for a given predicted covariance.

    Returns (inner_core, gain) where `gain` applies K without forming the
    V x V innovation covariance or its inverse.
    """
    h = params.h
    phi = params.emission_gram()
    X = sigma1 - params.D_core
    ip = np.eye(h) + phi @ X
    KH = _inner_solve(ip.T, sigma1.T).T  # Sigma1 (I + Phi X)^{-1}
    Y = _inner_solve(np.eye(h) + X @ phi, X.T).T  # X (I + Phi X)^{-1}, symmetric
    Y = 0.5 * (Y + Y.T)
    inner_core = {"X": X, "Y": Y, "KH": KH, "Phi": phi}
    gain = GainOperator(C=params.C, mu_sqrt=params.mu_sqrt, inner_core=inner_core)
    return inner_core, gain


def precompute_gain_columns(params, gain):
    """h x V matrix whose column i is K W (e_i - mu).

    The centering term drops inside K, so column i is just the i-th column
    of K W; total cost O(V h^2).
    """
    KH = gain.inner_core["KH"]
    return (KH @ params.C.T) * params.whitener[None, :]


def _subspace_log_spectrum(params, X):
    """Eigenvalues of S restricted to the data subspace, via h x h work.

    The restriction acts as identity off col(C); the informative
    eigenvalues are 1 + eig(L^T X L) with Phi = L L^T.
    """
    phi = params.emission_gram()
    vals, vecs = np.linalg.eigh(phi)
    L = vecs * np.sqrt(np.clip(vals, 0.0, None))[None, :]
    return 1.0 + np.linalg.eigvalsh(L.T @ X @ L)


@dataclass
class SteadyState:
    """Precomputed steady-state inference quantities for one parameter set."""

    Sigma1: np.ndarray
    Sigma0: np.ndarray
    F: np.ndarray  # filter matrix A - K C A
    J: np.ndarray  # smoother matrix Sigma0 A^T Sigma1^{-1}
    P_smooth: np.ndarray  # I - J A, the filtered weight in the smoother
    sigma_smooth: np.ndarray  # steady smoothed state covariance
    gain_columns: np.ndarray  # h x V, column i = K W (e_i - mu)
    gain: GainOperator
    logdet_sss: float
    h: int
    V: int

    def gain_matrix(self, mu_sqrt):
        """The dense h x V gain K (columns of K W rescaled by mu^{1/2})."""
        return self.gain_columns * mu_sqrt[None, :]

    @property
    def gain_rows(self):
        """gain_columns transposed into contiguous per-word rows (cached)."""
        if not hasattr(self, "_gain_rows"):
            self._gain_rows = np.ascontiguousarray(self.gain_columns.T)
        return self._gain_rows


def compute_steady_state(params, tol=FIXED_POINT_TOL):
    """Solve the steady state and assemble every precomputed quantity."""
    sigma1, sigma0 = solve_posterior_steady_state(params, tol=tol)
    inner_core, gain = compute_gain(params, sigma1)
    phi = inner_core["Phi"]
    F = params.A - inner_core["KH"] @ (phi @ params.A)
    rho_f = spectral_radius(F)
    if rho_f >= 1.0:
        raise RuntimeError(
            f"filter matrix unstable (spectral radius {rho_f:.6f}); "
            "check transition stability and noise PSD-ness"
        )
    J = np.linalg.solve(sigma1.T, params.A @ sigma0.T).T  # Sigma0 A^T Sigma1^{-1}
    sigma_smooth = sigma0.copy()
    for _ in range(FIXED_POINT_MAX_ITERS):
        new = sigma0 + J @ (sigma_smooth - sigma1) @ J.T
        if np.linalg.norm(new - sigma_smooth, "fro") < tol:
            sigma_smooth = 0.5 * (new + new.T)
            break
        sigma_smooth = new
    else:
        raise RuntimeError("smoothed covariance fixed point did not converge")
    spectrum = _subspace_log_spectrum(params, inner_core["X"])
    if spectrum.min() <= 0.0:
        raise RuntimeError("D not PSD on data subspace")
    logdet = float(np.log(spectrum).sum())
    gain_columns = precompute_gain_columns(params, gain)
    return SteadyState(
        Sigma1=sigma1,
        Sigma0=sigma0,
        F=F,
        J=J,
        P_smooth=np.eye(params.h) - J @ params.A,
        sigma_smooth=sigma_smooth,
        gain_columns=gain_columns,
        gain=gain,
        logdet_sss=logdet,
        h=params.h,
        V=params.V,
    )


def trace_sss_pinv(params, steady, mat):
    """tr(S+ M) for a StructuredMatrix or dense M, in h-sized work.

    With S+ = (I - C Y C^T)(I - mu_sqrt mu_sqrt^T) and C^T mu_sqrt = 0,
    tr(S+ M) = tr(M) - mu_sqrt^T M mu_sqrt - tr(Y C^T M C).
    """
    Y = steady.gain.inner_core["Y"]
    ms = params.mu_sqrt
    C = params.C
    if isinstance(mat, np.ndarray):
        tr_m = float(np.trace(mat))
        quad_mu = float(ms @ (mat @ ms))
        inner = C.T @ (mat @ C)
    else:
        tr_m = mat.trace()
        quad_mu = float(ms @ mat.matvec(ms))
        inner = C.T @ mat.matmat(C)
    return tr_m - quad_mu - float(np.sum(Y * inner.T))


@dataclass
class LogLikelihood:
    """Corpus log-likelihood in whitened coordinates on the data subspace."""

    total: float
    per_token: float
    n_tokens: int
    total_tokenwise: float  # token-by-token accumulation (equal by algebra)
    logdet: float
    quad_mean: float


def _ll_from_terms(n, V, logdet, quad_mean, quad_token_total):
    const = -0.5 * n * (V - 1) * np.log(2.0 * np.pi)
    total = const - 0.5 * n * logdet - 0.5 * n * quad_mean
    total_tokenwise = const - 0.5 * n * logdet - 0.5 * quad_token_total
    return LogLikelihood(
        total=float(total),
        per_token=float(total / n),
        n_tokens=int(n),
        total_tokenwise=float(total_tokenwise),
        logdet=float(logdet),
        quad_mean=float(quad_mean),
    )


def steady_log_likelihood(params, steady, data):
    """Steady-state log-likelihood of a corpus or of aggregate statistics.

    `data` is a list of sentences (token-id arrays, or dense (T, V)
    whitened observation matrices for the synthetic regimes), or a
    CooccurrenceStats, in which case the data-dependent traces come from
    the moment recursions and the cost is independent of corpus length.

    The residual is w_t - C A xhat_{t-1|t-1} with xhat_0 = 0 per sentence,
    the quadratic form goes through S+, and the normalization constant uses
    the (V - 1)-dimensional data subspace.
    """
    if hasattr(data, "pair_counts"):  # CooccurrenceStats
        from textlds.em import asos_log_likelihood_terms

        quad, logdet, n = asos_log_likelihood_terms(params, steady, data)
        return _ll_from_terms(n, params.V, logdet, quad, quad * n)
    return _corpus_log_likelihood(params, steady, data)


def _corpus_log_likelihood(params, steady, sentences):
    """Filter the corpus once, accumulating token and moment quadratics."""
    C = params.C
    A = params.A
    phi = steady.gain.inner_core["Phi"]
    Y = steady.gain.inner_core["Y"]
    F = steady.F
    gcols = steady.gain_columns
    w = params.whitener
    mu = params.mu
    h = params.h

    n = 0
    quad_tokens = 0.0
    token_counts = np.zeros(params.V)
    sxx_prev = np.zeros((h, h))  # sum of xhat_{t-1} xhat_{t-1}^T
    sxw_c = np.zeros((h, h))  # sum of xhat_{t-1} (omega_t^T C)
    dense_psi0_acc = None

    for sentence in sentences:
        sentence = np.asarray(sentence)
        dense_obs = sentence.ndim == 2
        if dense_obs:
            if dense_psi0_acc is None:
                dense_psi0_acc = np.zeros((params.V, params.V))
            dense_psi0_acc += sentence.T @ sentence
        else:
            np.add.at(token_counts, sentence, 1)
        x = np.zeros(h)
        for t in range(sentence.shape[0]):
            a = A @ x
            ca = phi @ a
            if dense_obs:
                omega = sentence[t]
                c_omega = C.T @ omega
                omega_sq = float(omega @ omega)
                kw = steady.gain.apply(omega)
            else:
                i = int(sentence[t])
                c_omega = w[i] * C[i]
                omega_sq = 1.0 / mu[i] - 1.0
                kw = gcols[:, i]
            # residual quadratic r^T S+ r in O(h^2)
            cr = c_omega - ca
            rr = omega_sq - 2.0 * float(c_omega @ a) + float(a @ ca)
            quad_tokens += rr - float(cr @ (Y @ cr))
            sxx_prev += np.outer(x, x)
            sxw_c += np.outer(x, c_omega)
            x = F @ x + kw
            n += 1
    if n == 0:
        raise ValueError("no data")

    # moment-expansion evaluation of the same quadratic
    G1 = np.linalg.solve(
        np.eye(h) + steady.gain.inner_core["X"] @ phi, np.eye(h)
    )  # (I + X Phi)^{-1}, so S+ C = C G1
    if dense_psi0_acc is not None:
        psi0 = dense_psi0_acc / n
        term0 = trace_sss_pinv(params, steady, psi0)
    else:
        freq = token_counts / n
        d = freq / mu
        ci = C * np.sqrt(d)[:, None]
        term0 = float(np.sum(d * (1.0 - mu))) - float(np.sum(Y * (ci.T @ ci).T))
    exw_c = sxw_c / n
    exx_prev = sxx_prev / n
    term1 = float(np.trace(G1 @ A @ exw_c))
    term2 = float(np.trace(G1 @ A @ exx_prev @ A.T @ phi))
    quad_mean = term0 - 2.0 * term1 + term2
    return _ll_from_terms(n, params.V, steady.logdet_sss, quad_mean, quad_tokens)
