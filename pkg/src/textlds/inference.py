"""Per-sentence inference, token embeddings, and RNN-initialization export.

Steady-state filtering and smoothing run in O(T h^2) with no V-sized work
per token.  The exact time-varying filter/smoother exists as a test oracle
for small vocabularies; its covariance recursions are data-independent, so
they are computed once per sentence length and shared.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from textlds.model import LdsParams

EXACT_ORACLE_MAX_V = 512

_RNN_MAGIC = b"TLDSRNN1"
_RNN_VERSION = 1
# Input-matrix convention: column i of the input matrix is K W (e_i - mu),
# i.e. the gain applied to the whitened centered indicator of word i.
_RNN_CONVENTION = b"input-cols=KW(e_i-mu);state=A-KCA;output=unwhitened-C"


def filter_sentence(steady, token_ids):
    """Steady-state filtered means for one sentence of token ids.

    x_t = F x_{t-1} + gain_column(token_t), starting from zero; ids outside
    the vocabulary fall back to the OOV column (index 0 convention is the
    caller's; anything out of range maps to column 0).
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    T = ids.shape[0]
    h = steady.h
    out = np.empty((T, h))
    F = steady.F
    # row-contiguous gain lookup and allocation-free updates keep the
    # per-token cost at O(h^2) + O(h)
    grows = steady.gain_rows
    V = grows.shape[0]
    ids = np.where((ids < 0) | (ids >= V), 0, ids)
    prev = np.zeros(h)
    for t in range(T):
        row = out[t]
        np.dot(F, prev, out=row)
        row += grows[ids[t]]
        prev = row
    return out


def smooth_sentence(steady, filtered):
    """Backward smoothing pass: xbar_t = J xbar_{t+1} + (I - J A) xhat_t."""
    filtered = np.asarray(filtered, dtype=np.float64)
    T = filtered.shape[0]
    if T == 0:
        return filtered.copy()
    out = np.empty_like(filtered)
    out[-1] = filtered[-1]
    J = steady.J
    fwd = filtered @ steady.P_smooth.T  # (I - J A) xhat_t for every t at once
    for t in range(T - 2, -1, -1):
        row = out[t]
        np.dot(J, out[t + 1], out=row)
        row += fwd[t]
    return out


def _obs_projection(params, sentence):
    """Per-token (C^T omega, |omega|^2, ids) for id or dense observations."""
    sentence = np.asarray(sentence)
    if sentence.ndim == 2:
        c_obs = sentence @ params.C
        obs_sq = np.einsum("tv,tv->t", sentence, sentence)
        return c_obs, obs_sq, None
    ids = sentence.astype(np.int64)
    w = params.whitener
    c_obs = w[ids, None] * params.C[ids]
    obs_sq = 1.0 / params.mu[ids] - 1.0
    return c_obs, obs_sq, ids


def _filter_schedule(params, t_max, want_logdet=False):
    """Data-independent filter covariance quantities for t = 1..t_max.

    Returns per-step predicted and filtered covariances, the mean-update
    matrices M1_t = P_t (I + Phi X_t)^{-1}, the quadratic-form cores
    Y_t = X_t (I + Phi X_t)^{-1}, smoother gains J_t = S_t A^T P_{t+1}^{-1},
    and (optionally) the subspace log-determinants of the innovation
    covariances.
    """
    h = params.h
    A = params.A
    phi = params.emission_gram()
    eye = np.eye(h)
    vals, vecs = np.linalg.eigh(phi)
    L = vecs * np.sqrt(np.clip(vals, 0.0, None))[None, :]

    pred = [None] * (t_max + 2)
    filt = [None] * (t_max + 1)
    mean_gain = [None] * (t_max + 1)
    Y = [None] * (t_max + 1)
    logdet = [None] * (t_max + 1)
    S_prev = np.zeros((h, h))  # x_0 is a known constant
    for t in range(1, t_max + 2):
        P = A @ S_prev @ A.T + eye
        P = 0.5 * (P + P.T)
        pred[t] = P
        if t > t_max:
            break
        X = P - params.D_core
        ip = eye + phi @ X
        M1 = np.linalg.solve(ip.T, P.T).T  # P (I + Phi X)^{-1}
        S = P - M1 @ phi @ P
        S = 0.5 * (S + S.T)
        filt[t] = S
        mean_gain[t] = M1
        Yt = np.linalg.solve((eye + X @ phi).T, X.T).T
        Y[t] = 0.5 * (Yt + Yt.T)
        if want_logdet:
            spectrum = 1.0 + np.linalg.eigvalsh(L.T @ X @ L)
            if spectrum.min() <= 0.0:
                raise RuntimeError("D not PSD on data subspace")
            logdet[t] = float(np.log(spectrum).sum())
        S_prev = S
    smoother_gain = [None] * (t_max + 1)
    for t in range(1, t_max):
        smoother_gain[t] = np.linalg.solve(pred[t + 1].T, A @ filt[t].T).T
    return {
        "phi": phi,
        "pred_cov": pred,
        "filt_cov": filt,
        "mean_gain": mean_gain,
        "Y": Y,
        "logdet": logdet,
        "smoother_gain": smoother_gain,
        "t_max": t_max,
    }


def _smooth_schedule(sched, T):
    """Backward covariance pass for sentences of length T.

    Returns smoothed covariances (index 1..T), lag-one smoothed
    cross-covariances cov(x_t, x_{t+1} | data) = J_t Ssm_{t+1} (index
    1..T-1), and their sums for vectorized moment accumulation.
    """
    filt = sched["filt_cov"]
    pred = sched["pred_cov"]
    J = sched["smoother_gain"]
    ssm = [None] * (T + 1)
    lag1 = [None] * T
    ssm[T] = filt[T]
    for t in range(T - 1, 0, -1):
        ssm[t] = filt[t] + J[t] @ (ssm[t + 1] - pred[t + 1]) @ J[t].T
        ssm[t] = 0.5 * (ssm[t] + ssm[t].T)
        lag1[t] = J[t] @ ssm[t + 1]
    ssm_sum = sum(ssm[1:])
    lag1_sum = sum(lag1[1:]) if T > 1 else np.zeros_like(filt[1])
    return {"ssm": ssm, "lag1": lag1, "ssm_sum": ssm_sum, "lag1_sum": lag1_sum}


def _forward_means(params, sched, c_obs):
    """Filtered means for one sentence given per-token C^T omega."""
    T = c_obs.shape[0]
    h = params.h
    A = params.A
    phi = sched["phi"]
    xf = np.zeros((T + 1, h))
    for t in range(1, T + 1):
        xpred = A @ xf[t - 1]
        xf[t] = xpred + sched["mean_gain"][t] @ (c_obs[t - 1] - phi @ xpred)
    return xf


def _backward_means(params, sched, xf):
    T = xf.shape[0] - 1
    A = params.A
    J = sched["smoother_gain"]
    xbar = np.empty_like(xf)
    xbar[T] = xf[T]
    for t in range(T - 1, 0, -1):
        xbar[t] = xf[t] + J[t] @ (xbar[t + 1] - A @ xf[t])
    xbar[0] = 0.0
    return xbar


def exact_filter_smooth(params, observations):
    """Time-varying Kalman filter and smoother (test oracle, V <= 512).

    `observations` is a token-id array or a dense (T, V) matrix of whitened
    observations.  Per-step gains are computed through structured h x h
    solves.  Returns (filtered means, filtered covariances, smoothed means,
    smoothed covariances), each a length-T array.
    """
    if params.V > EXACT_ORACLE_MAX_V:
        raise ValueError(
            f"exact filter is an oracle only; V={params.V} exceeds {EXACT_ORACLE_MAX_V}"
        )
    obs = np.asarray(observations)
    T = obs.shape[0]
    if T == 0:
        h = params.h
        empty = np.zeros((0, h))
        return empty, np.zeros((0, h, h)), empty.copy(), np.zeros((0, h, h))
    sched = _filter_schedule(params, T)
    c_obs, _, _ = _obs_projection(params, obs)
    xf = _forward_means(params, sched, c_obs)
    xbar = _backward_means(params, sched, xf)
    back = _smooth_schedule(sched, T)
    filt_cov = np.stack(sched["filt_cov"][1 : T + 1])
    smooth_cov = np.stack(back["ssm"][1 : T + 1])
    return xf[1:], filt_cov, xbar[1:], smooth_cov


def exact_log_likelihood(params, sentences):
    """Exact innovation-form log-likelihood of a corpus (subspace convention).

    Each sentence restarts the filter from the constant zero initial state;
    the per-step innovation covariance is handled through its pseudoinverse
    on the data subspace, with the normalization constant on V - 1
    dimensions.
    """
    from textlds.em import exact_estep

    _, ll = exact_estep(params, sentences, want_ll=True)
    return ll


@dataclass
class EmbeddingContext:
    """Coordinates for comparable embeddings: M = E[xbar xbar^T] and M^{-1/2}."""

    M: np.ndarray
    M_inv_sqrt: np.ndarray

    @classmethod
    def from_posterior_covariance(cls, M, floor=1e-10):
        M = 0.5 * (M + M.T)
        vals, vecs = np.linalg.eigh(M)
        vals = np.maximum(vals, floor)
        inv_sqrt = (vecs / np.sqrt(vals)[None, :]) @ vecs.T
        return cls(M=M, M_inv_sqrt=inv_sqrt)


@dataclass
class TokenEmbeddingSequence:
    """Per-token latent-state embeddings for one sentence."""

    token_ids: np.ndarray
    filtered: np.ndarray  # T x h
    smoothed: np.ndarray  # T x h
    normalized: np.ndarray  # T x h, unit rows (zero rows left zero)
    zero_rows: np.ndarray  # bool flags for rows that could not be normalized


def embed_corpus(steady, context, sentences):
    """Filtered, smoothed, and sphere-normalized embeddings per sentence.

    Smoothed states are whitened by M^{-1/2} and projected onto the unit
    sphere; rows that are exactly zero before normalization stay zero and
    are flagged rather than turned into NaNs.
    """
    out = []
    for sentence in sentences:
        ids = np.asarray(sentence, dtype=np.int64)
        filtered = filter_sentence(steady, ids)
        smoothed = smooth_sentence(steady, filtered)
        whitened = smoothed @ context.M_inv_sqrt.T
        norms = np.linalg.norm(whitened, axis=1)
        zero = norms == 0.0
        safe = np.where(zero, 1.0, norms)
        normalized = whitened / safe[:, None]
        out.append(
            TokenEmbeddingSequence(
                token_ids=ids,
                filtered=filtered,
                smoothed=smoothed,
                normalized=normalized,
                zero_rows=zero,
            )
        )
    return out


@dataclass
class TransitionPair:
    """One singular pair of the transition operator with its top words."""

    singular_value: float
    right_words: list
    left_words: list


def transition_singular_pairs(params, vocab, top_n=3, whitened_scores=False):
    """Word-level view of the transition operator's singular structure.

    For each singular pair (u_i, v_i) of A (which maps right vectors to
    left), reports the `top_n` vocabulary items with the highest emission
    score C v_i (right) and C u_i (left).  Scores use the unwhitened
    emission by default.
    """
    U, s, Vt = np.linalg.svd(params.A)
    C = params.C if whitened_scores else params.emission_unwhitened()
    pairs = []
    for i in range(s.shape[0]):
        right_scores = C @ Vt[i]
        left_scores = C @ U[:, i]
        right_idx = np.argsort(-right_scores, kind="stable")[:top_n]
        left_idx = np.argsort(-left_scores, kind="stable")[:top_n]
        pairs.append(
            TransitionPair(
                singular_value=float(s[i]),
                right_words=[vocab.token_of_id[j] for j in right_idx],
                left_words=[vocab.token_of_id[j] for j in left_idx],
            )
        )
    return pairs


@dataclass
class RnnInit:
    """Linear-RNN initialization extracted from the steady-state filter.

    The recurrent matrix equals the filter matrix A - K C A, the input
    matrix columns are the precomputed gain columns, the output matrix is
    the unwhitened emission, and the initial state is zero.
    """

    A_rnn: np.ndarray  # h x h
    B_rnn: np.ndarray  # h x V
    C_rnn: np.ndarray  # V x h
    h0: np.ndarray  # h
    convention: bytes = _RNN_CONVENTION


def export_rnn_init(params, steady):
    return RnnInit(
        A_rnn=steady.F.copy(),
        B_rnn=steady.gain_columns.copy(),
        C_rnn=params.emission_unwhitened(),
        h0=np.zeros(params.h),
    )


def save_rnn_init(init, path):
    """Binary export; the header records the input-matrix convention."""
    h, V = init.B_rnn.shape
    with open(path, "wb") as f:
        f.write(_RNN_MAGIC)
        f.write(struct.pack("<IQQ", _RNN_VERSION, V, h))
        f.write(struct.pack("<I", len(init.convention)))
        f.write(init.convention)
        for arr in (init.A_rnn, init.B_rnn, init.C_rnn, init.h0):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_rnn_init(path):
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _RNN_MAGIC:
            raise ValueError(f"not an RNN init file: bad magic {magic!r}")
        version, V, h = struct.unpack("<IQQ", f.read(20))
        if version != _RNN_VERSION:
            raise ValueError(f"unsupported RNN init version {version}")
        (conv_len,) = struct.unpack("<I", f.read(4))
        convention = f.read(conv_len)
        A = np.frombuffer(f.read(8 * h * h), dtype="<f8").reshape(h, h).copy()
        B = np.frombuffer(f.read(8 * h * V), dtype="<f8").reshape(h, V).copy()
        C = np.frombuffer(f.read(8 * V * h), dtype="<f8").reshape(V, h).copy()
        h0 = np.frombuffer(f.read(8 * h), dtype="<f8").copy()
    return RnnInit(A_rnn=A, B_rnn=B, C_rnn=C, h0=h0, convention=convention)


def linear_rnn_states(init, token_ids):
    """Drive the exported linear recurrence with token indicators."""
    ids = np.asarray(token_ids, dtype=np.int64)
    h = init.h0.shape[0]
    out = np.empty((ids.shape[0], h))
    brows = np.ascontiguousarray(init.B_rnn.T)
    prev = init.h0.copy()
    for t in range(ids.shape[0]):
        row = out[t]
        np.dot(init.A_rnn, prev, out=row)
        row += brows[ids[t]]
        prev = row
    return out
