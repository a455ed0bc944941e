"""EM for the text LDS: exact and moment-driven (ASOS-style) E-steps.

The exact E-step smooths every sentence with the time-varying recursions
and time-averages the posterior second moments (the test oracle and the
small-corpus path).  The approximate E-step never touches tokens: it
applies the steady-state filter and smoother recursions directly to the
time-averaged lag covariances, closing the recursions beyond the horizon
with model-implied covariances, so its cost is independent of corpus
length.  The M-step solves the closed-form least-squares updates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from textlds.corpus import whiten_stats
from textlds.linalg import StructuredMatrix
from textlds.model import LdsParams, project_off, spectral_radius, stabilize_transition
from textlds.ssid import solve_lyapunov
from textlds.steady import compute_steady_state, trace_sss_pinv

EXX_RIDGE = 1e-10
LL_TOL_DEFAULT = 1e-6
EM_MAX_ITERS_DEFAULT = 50


@dataclass
class SecondOrderStats:
    """Time-averaged posterior moments driving the M-step.

    Exx and Exx1 include the smoothed covariance contributions, not just
    outer products of means; Exw is stored against whitened observations.
    `Exx_pairs`, when present (exact mode), averages E[x_{t-1} x_{t-1}^T]
    over transition pairs so the transition regression uses exactly
    matching ranges; the approximate E-step leaves it None and the two
    averages coincide in its steady-state limit.
    """

    Exx: np.ndarray  # h x h, E[xbar_t xbar_t^T]
    Exx1: np.ndarray  # h x h, E[xbar_t xbar_{t+1}^T]
    Exw: np.ndarray  # h x V, E[xbar_t w_t^T]
    n_tokens: int = 0
    Exx_pairs: np.ndarray = None


def _psi_matmat(psi, X):
    """psi @ X for ndarray / StructuredMatrix / LagCovariance inputs."""
    if isinstance(psi, np.ndarray):
        return psi @ X
    return psi.matmat(X)


def _psi_rmatmat(psi, X):
    """psi.T @ X."""
    if isinstance(psi, np.ndarray):
        return psi.T @ X
    if isinstance(psi, StructuredMatrix):
        return psi.rmatmat(X)
    return psi.as_structured().rmatmat(X)


def _dlyap(F, Q):
    """Fixed point of S = F S F^T + Q by doubling; requires rho(F) < 1."""
    S = Q.copy()
    M = F.copy()
    for _ in range(200):
        update = M @ S @ M.T
        S = S + update
        if np.linalg.norm(update, "fro") < 1e-14 * max(1.0, np.linalg.norm(S, "fro")):
            return 0.5 * (S + S.T)
        M = M @ M
        if not np.isfinite(M).all():
            break
    raise RuntimeError("discrete Lyapunov iteration diverged; operator unstable")


def asos_estep(params, steady, psis, r=None):
    """Approximate E-step from lag covariances alone.

    `psis[k]` is the whitened lag-k covariance for k = 0..r (dense array,
    StructuredMatrix, or LagCovariance).  Filtered cross statistics
    E[xhat_t w_{t+j}^T] and E[xhat_t xhat_{t+j}^T] are propagated for
    |j| <= r with the steady-state filter recursion; values at the horizon
    are closed with model-implied covariances; the smoother recursion then
    converts filtered into smoothed statistics.  Runtime is independent of
    the corpus length.
    """
    if r is None:
        r = len(psis) - 1
    if r < 1 or len(psis) <= r:
        raise ValueError(f"approximate E-step with horizon {r} needs lags 0..{r}")
    A = params.A
    C = params.C
    h = params.h
    K = steady.gain_matrix(params.mu_sqrt)  # h x V
    F = steady.F
    J = steady.J
    P_sm = np.eye(h) - J @ A

    def cross_cov_product(j):
        """K @ E[w_t w_{t+j}^T], using Psi_j^T for j >= 0 and Psi_{-j} below."""
        if j >= 0:
            return _psi_matmat(psis[j], K.T).T  # K Psi_j^T
        return _psi_rmatmat(psis[-j], K.T).T  # K Psi_{-j}

    sigma_unc = solve_lyapunov(A)
    u0_model = sigma_unc - steady.Sigma0
    A_pow_r = np.linalg.matrix_power(A, r)

    # filtered-state / observation cross moments, top-down in the lag
    Vs = {r: (u0_model @ A_pow_r.T) @ C.T}
    for j in range(r - 1, -r - 1, -1):
        Vs[j] = F @ Vs[j + 1] + cross_cov_product(j)

    # filtered second moments via a steady Lyapunov equation, then the shift
    FV1K = F @ Vs[1] @ K.T
    rhs = FV1K + FV1K.T + cross_cov_product(0) @ K.T
    Us = {0: _dlyap(F, 0.5 * (rhs + rhs.T))}
    for s in range(1, r):
        Us[s] = Us[s - 1] @ F.T + Vs[s] @ K.T
    for s in range(1, r):
        Us[-s] = Us[s].T

    # smoothed/filtered cross moments, closed at the deep-past horizon
    Wb = {-r: A_pow_r @ Us[0]}
    for j in range(-r + 1, 1):
        Wb[j] = J @ Wb[j - 1] + P_sm @ Us[j]

    # smoothed-state / observation cross moments
    Zb = A_pow_r @ Vs[0]
    for j in range(-r + 1, 1):
        Zb = J @ Zb + P_sm @ Vs[j]

    # smoothed second moments: N0 = J N0 J^T + sym(J Wb_{-1} P^T + P Wb_0^T)
    S = J @ Wb[-1] @ P_sm.T + P_sm @ Wb[0].T
    N0 = _dlyap(J, 0.5 * (S + S.T))
    N1 = J @ N0 + P_sm @ Wb[-1].T

    exx = N0 + steady.sigma_smooth
    exx1 = N1 + J @ steady.sigma_smooth
    return SecondOrderStats(
        Exx=0.5 * (exx + exx.T), Exx1=exx1, Exw=Zb, n_tokens=0, Exx_pairs=None
    )


def asos_filtered_moments(params, steady, psis, r=None):
    """Filtered-only moments (U_0 and V_1) for the moment likelihood."""
    if r is None:
        r = len(psis) - 1
    A = params.A
    C = params.C
    K = steady.gain_matrix(params.mu_sqrt)
    F = steady.F

    def cross_cov_product(j):
        return _psi_matmat(psis[j], K.T).T  # K Psi_j^T

    sigma_unc = solve_lyapunov(A)
    u0_model = sigma_unc - steady.Sigma0
    Vs = {r: (u0_model @ np.linalg.matrix_power(A, r).T) @ C.T}
    for j in range(r - 1, 0, -1):
        Vs[j] = F @ Vs[j + 1] + cross_cov_product(j)
    FV1K = F @ Vs[1] @ K.T
    rhs = FV1K + FV1K.T + cross_cov_product(0) @ K.T
    U0 = _dlyap(F, 0.5 * (rhs + rhs.T))
    return U0, Vs[1]


def asos_log_likelihood_terms(params, steady, stats, r=None):
    """(mean quadratic, logdet, n) for the moment-based steady likelihood."""
    if r is None:
        r = min(stats.K_max, 10)
    psis, _ = whiten_stats(stats, max_lag=r)
    U0, V1 = asos_filtered_moments(params, steady, psis, r=r)
    h = params.h
    phi = steady.gain.inner_core["Phi"]
    X = steady.gain.inner_core["X"]
    G1 = np.linalg.solve(np.eye(h) + X @ phi, np.eye(h))
    A = params.A
    term0 = trace_sss_pinv(params, steady, psis[0].as_structured())
    term1 = float(np.trace(G1 @ A @ (V1 @ params.C)))
    term2 = float(np.trace(G1 @ A @ U0 @ A.T @ phi))
    quad = term0 - 2.0 * term1 + term2
    return quad, steady.logdet_sss, stats.T


def exact_estep(params, sentences, want_ll=False):
    """Exact per-sentence Kalman smoothing, time-averaged.

    Runs the time-varying filter and smoother; the covariance recursions
    are data-independent, so the forward schedule is shared across all
    sentences and the backward pass is cached per sentence length.  The
    three moment matrices include the posterior covariance contributions.
    With `want_ll` the exact innovation-form log-likelihood accumulates in
    the same pass and (moments, ll) is returned.
    """
    from textlds.inference import (
        _backward_means,
        _filter_schedule,
        _forward_means,
        _obs_projection,
        _smooth_schedule,
    )

    sents = [np.asarray(s) for s in sentences]
    sents = [s for s in sents if s.shape[0] > 0]
    if not sents:
        raise ValueError("no data")
    t_max = max(s.shape[0] for s in sents)
    sched = _filter_schedule(params, t_max, want_logdet=want_ll)
    back_cache = {}
    h, V = params.h, params.V
    A = params.A
    phi = sched["phi"]
    log2pi = np.log(2.0 * np.pi)

    n = 0
    sxx = np.zeros((h, h))
    sxx_pairs = np.zeros((h, h))
    sxx1 = np.zeros((h, h))
    sxw_cols = np.zeros((V, h))
    sxbar = np.zeros(h)
    any_dense = False
    any_ids = False
    ll = 0.0

    for sent in sents:
        T = sent.shape[0]
        if T not in back_cache:
            back_cache[T] = _smooth_schedule(sched, T)
        back = back_cache[T]
        c_obs, obs_sq, ids = _obs_projection(params, sent)
        xf = _forward_means(params, sched, c_obs)
        if want_ll:
            for t in range(1, T + 1):
                xpred = A @ xf[t - 1]
                cr = c_obs[t - 1] - phi @ xpred
                rr = (
                    obs_sq[t - 1]
                    - 2.0 * float(c_obs[t - 1] @ xpred)
                    + float(xpred @ (phi @ xpred))
                )
                quad = rr - float(cr @ (sched["Y"][t] @ cr))
                ll += -0.5 * ((V - 1) * log2pi + sched["logdet"][t] + quad)
        xbar = _backward_means(params, sched, xf)
        body = xbar[1:]  # T x h smoothed means
        sxx += back["ssm_sum"] + body.T @ body
        if T > 1:
            sxx1 += back["lag1_sum"] + body[:-1].T @ body[1:]
            sxx_pairs += (back["ssm_sum"] - back["ssm"][T]) + body[:-1].T @ body[:-1]
        if ids is None:
            any_dense = True
            sxw_cols += sent.T @ body
        else:
            any_ids = True
            np.add.at(sxw_cols, ids, params.whitener[ids, None] * body)
            sxbar += body.sum(axis=0)
        n += T
    exw = sxw_cols.T / n
    if any_ids:
        if any_dense:
            raise ValueError("mixing id and dense sentences is not supported")
        exw = exw - np.outer(sxbar / n, params.mu_sqrt)
    moments = SecondOrderStats(
        Exx=0.5 * (sxx + sxx.T) / n,
        Exx1=sxx1 / n,
        Exw=exw,
        n_tokens=n,
        Exx_pairs=0.5 * (sxx_pairs + sxx_pairs.T) / n,
    )
    return (moments, float(ll)) if want_ll else moments


def mstep(moments, psi0_whitened, mu, ridge=EXX_RIDGE):
    """Closed-form M-step.

    A and C come from least-squares regressions against the posterior
    moments; the noise update D = Psi_0 - C Exw - Exw^T C^T + C Exx C^T,
    evaluated at the fresh regression C (for which C Exw = C Exx C^T),
    collapses to the stored core D_core = Exx around the whitened anchor
    Psi_0 = I - mu_sqrt mu_sqrt^T.  `psi0_whitened` documents that anchor;
    when the supplied lag-0 covariance differs from it (possible only for
    non-indicator data) the update is the projection onto the structured
    family.
    """
    del psi0_whitened
    h = moments.Exx.shape[0]
    eps = ridge * np.trace(moments.Exx) / h
    exx_c = moments.Exx + eps * np.eye(h)
    exx_a = (
        moments.Exx_pairs + eps * np.eye(h)
        if moments.Exx_pairs is not None
        else exx_c
    )
    for name, mat in (("transition", exx_a), ("emission", exx_c)):
        if np.linalg.cond(mat) > 1e14:
            raise np.linalg.LinAlgError(
                f"singular posterior moment matrix in the {name} regression"
            )
    A = np.linalg.solve(exx_a, moments.Exx1).T
    if spectral_radius(A) >= 1.0 - 1e-6:
        A = stabilize_transition(A)
    C = np.linalg.solve(exx_c, moments.Exw).T
    C = project_off(C, np.sqrt(mu))
    return LdsParams(A=A, C=C, D_core=moments.Exx.copy(), mu=np.asarray(mu, float))


@dataclass
class EmTrace:
    """Per-iteration log of an EM run; index 0 is the initialization."""

    records: list = field(default_factory=list)
    aborted: str = None

    def log(self, iteration, ll, seconds, mode):
        self.records.append(
            {"iter": int(iteration), "ll": float(ll), "seconds": float(seconds), "mode": mode}
        )

    @property
    def lls(self):
        return [rec["ll"] for rec in self.records]


def em_run(
    init,
    mode,
    stats=None,
    sentences=None,
    psis=None,
    r=None,
    max_iters=EM_MAX_ITERS_DEFAULT,
    ll_tol=LL_TOL_DEFAULT,
    n_tokens=None,
):
    """Alternate E and M steps, tracking the likelihood.

    mode "exact" smooths `sentences` and monitors the exact innovation
    log-likelihood; mode "asos" consumes whitened lag covariances (from
    `stats` or given directly as `psis`) and monitors the steady-state
    moment likelihood.  The steady state is recomputed every iteration and
    the best-likelihood parameters are returned together with the trace.
    """
    if mode not in ("asos", "exact"):
        raise ValueError(f"unknown EM mode {mode!r}")
    if mode == "exact" and sentences is None:
        raise ValueError("exact mode needs a corpus")
    if mode == "asos":
        if psis is None:
            if stats is None:
                raise ValueError("asos mode needs stats or lag covariances")
            if r is None:
                r = min(stats.K_max, 7)
            psis, _ = whiten_stats(stats, max_lag=r)
        if r is None:
            r = len(psis) - 1
        if n_tokens is None:
            n_tokens = stats.T if stats is not None else 0

    trace = EmTrace()
    params = init
    best = init
    best_ll = -np.inf
    prev_ll = None
    start = time.perf_counter()

    for iteration in range(max_iters + 1):
        try:
            steady = compute_steady_state(params)
            if mode == "exact":
                moments, ll = exact_estep(params, sentences, want_ll=True)
            else:
                moments = asos_estep(params, steady, psis, r=r)
                quad, logdet, _ = _asos_quad_terms(params, steady, psis, r)
                n_eff = n_tokens or 1
                ll = -0.5 * n_eff * (
                    (params.V - 1) * np.log(2.0 * np.pi) + logdet + quad
                )
        except (RuntimeError, np.linalg.LinAlgError, ValueError) as exc:
            trace.aborted = f"iteration {iteration}: {exc}"
            break
        trace.log(iteration, ll, time.perf_counter() - start, mode)
        if ll > best_ll:
            best_ll = ll
            best = params
        if iteration == max_iters:
            break
        if prev_ll is not None and ll - prev_ll < ll_tol * abs(prev_ll):
            break
        prev_ll = ll
        params = mstep(moments, None, params.mu)
    return best, trace


def _asos_quad_terms(params, steady, psis, r):
    """Mean residual quadratic of the surrogate likelihood from psis."""
    U0, V1 = asos_filtered_moments(params, steady, psis, r=r)
    h = params.h
    phi = steady.gain.inner_core["Phi"]
    X = steady.gain.inner_core["X"]
    G1 = np.linalg.solve(np.eye(h) + X @ phi, np.eye(h))
    A = params.A
    psi0 = psis[0]
    if not isinstance(psi0, np.ndarray) and hasattr(psi0, "as_structured"):
        psi0 = psi0.as_structured()
    term0 = trace_sss_pinv(params, steady, psi0)
    term1 = float(np.trace(G1 @ A @ (V1 @ params.C)))
    term2 = float(np.trace(G1 @ A @ U0 @ A.T @ phi))
    return term0 - 2.0 * term1 + term2, steady.logdet_sss, None
