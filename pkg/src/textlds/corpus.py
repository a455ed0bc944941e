"""Streaming corpus statistics: vocabulary, unigram frequencies, lagged pair counts.

One pass over a sentence-segmented token stream produces everything the
learners ever touch: relative frequencies, a token count, and one sparse
pair-count matrix per lag.  Lag covariances are exposed in structured
(sparse-minus-rank-one / diagonal-minus-rank-one) form and are never
materialized densely in production paths.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

from textlds.linalg import StructuredMatrix

OOV_TOKEN = "OOV"
NUM_TOKEN = "NUM"

_COUNTS_MAGIC = b"TLDSCNT1"
_COUNTS_VERSION = 1


def _map_digits(token):
    """Tokens made of digits (with optional . or , separators) become NUM."""
    has_digit = False
    for ch in token:
        if ch.isdigit():
            has_digit = True
        elif ch not in ".,":
            return token
    return NUM_TOKEN if has_digit else token


@dataclass(frozen=True)
class Vocabulary:
    """Bijection between token strings and contiguous word indices.

    Ids are assigned by descending frequency with lexicographic tie-break;
    OOV and NUM are always present.
    """

    token_of_id: tuple
    id_of_token: dict = field(repr=False)
    oov_id: int = 0
    num_id: int = 0

    @property
    def size(self):
        return len(self.token_of_id)

    def lookup(self, token):
        """Id for a raw token, applying the digit mapping and OOV fallback."""
        return self.id_of_token.get(_map_digits(token), self.oov_id)

    def encode_sentence(self, tokens):
        return np.array([self.lookup(t) for t in tokens], dtype=np.int64)


def build_vocab(sentences, max_types):
    """Two-pass frequency cutoff over a sentence iterable.

    The `max_types` most frequent non-special types (after the digit
    mapping) receive ids alongside the OOV and NUM specials; everything
    else maps to OOV.  Ties break lexicographically for determinism.
    """
    if max_types < 1:
        raise ValueError("max_types must be at least 1")
    freqs = {}
    saw_any = False
    for sentence in sentences:
        for token in sentence:
            saw_any = True
            token = _map_digits(token)
            freqs[token] = freqs.get(token, 0) + 1
    if not saw_any:
        raise ValueError("empty corpus")
    specials = {OOV_TOKEN, NUM_TOKEN}
    regular = sorted(
        (t for t in freqs if t not in specials), key=lambda t: (-freqs[t], t)
    )
    kept = set(regular[:max_types]) | specials
    ordered = sorted(kept, key=lambda t: (-freqs.get(t, 0), t))
    id_of = {t: i for i, t in enumerate(ordered)}
    return Vocabulary(
        token_of_id=tuple(ordered),
        id_of_token=id_of,
        oov_id=id_of[OOV_TOKEN],
        num_id=id_of[NUM_TOKEN],
    )


@dataclass(frozen=True)
class CooccurrenceStats:
    """Aggregate single-pass corpus statistics.

    mu sums to one and already includes any pseudocounts; pair_counts[k]
    (k = 1..K_max, stored at index k-1) holds integer counts with entry
    (i, j) = number of in-sentence occurrences of word i at position t and
    word j at position t+k.
    """

    vocab: Vocabulary
    mu: np.ndarray
    T: int
    pair_counts: tuple  # of scipy CSR matrices, index k-1 for lag k
    pseudocount: float = 0.0

    @property
    def K_max(self):
        return len(self.pair_counts)

    @property
    def V(self):
        return self.vocab.size

    def unigram_counts(self):
        """Raw (pre-pseudocount) unigram counts recovered from mu."""
        denom = self.T + self.V * self.pseudocount
        return self.mu * denom - self.pseudocount

    def n_pairs(self, k):
        """Number of valid in-sentence position pairs at lag k."""
        return int(self.pair_counts[k - 1].sum())

    def validate(self):
        if abs(self.mu.sum() - 1.0) > 1e-12:
            raise ValueError("mu must sum to 1")
        if (self.mu < 0).any():
            raise ValueError("mu must be nonnegative")


def accumulate_counts(sentences, vocab, K_max, cross_sentences=False):
    """Single pass accumulating unigram and lagged pair counts.

    Pairs never cross sentence boundaries unless `cross_sentences` is set,
    in which case the stream is treated as one unbroken sequence (ablation
    mode).
    """
    if K_max < 1:
        raise ValueError("K_max must be at least 1")
    V = vocab.size
    uni = np.zeros(V, dtype=np.int64)
    rows = [[] for _ in range(K_max)]
    cols = [[] for _ in range(K_max)]
    total = 0
    encoded = []
    for sentence in sentences:
        ids = sentence if isinstance(sentence, np.ndarray) else vocab.encode_sentence(sentence)
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            continue
        if cross_sentences:
            encoded.append(ids)
            continue
        np.add.at(uni, ids, 1)
        total += ids.size
        for k in range(1, min(K_max, ids.size - 1) + 1):
            rows[k - 1].append(ids[:-k])
            cols[k - 1].append(ids[k:])
    if cross_sentences:
        if encoded:
            ids = np.concatenate(encoded)
            np.add.at(uni, ids, 1)
            total = ids.size
            for k in range(1, min(K_max, ids.size - 1) + 1):
                rows[k - 1].append(ids[:-k])
                cols[k - 1].append(ids[k:])
    pair_counts = []
    for k in range(K_max):
        if rows[k]:
            i = np.concatenate(rows[k])
            j = np.concatenate(cols[k])
            mat = scipy.sparse.coo_matrix(
                (np.ones(i.size, dtype=np.int64), (i, j)), shape=(V, V)
            ).tocsr()
            mat.sum_duplicates()
        else:
            mat = scipy.sparse.csr_matrix((V, V), dtype=np.int64)
        pair_counts.append(mat)
    mu = uni / total if total else np.zeros(V)
    return CooccurrenceStats(
        vocab=vocab, mu=mu, T=total, pair_counts=tuple(pair_counts), pseudocount=0.0
    )


def merge_stats(s1, s2):
    """Combine statistics from two corpus chunks (sentence-aligned split)."""
    if s1.vocab.token_of_id != s2.vocab.token_of_id:
        raise ValueError("vocabulary mismatch between statistics")
    if s1.K_max != s2.K_max:
        raise ValueError("lag mismatch between statistics")
    if s1.pseudocount != s2.pseudocount:
        raise ValueError("pseudocount mismatch; merge raw stats, then smooth")
    counts = s1.unigram_counts() + s2.unigram_counts()
    T = s1.T + s2.T
    denom = T + s1.V * s1.pseudocount
    mu = (counts + s1.pseudocount) / denom if denom else np.zeros(s1.V)
    pair_counts = tuple(
        (a + b).tocsr() for a, b in zip(s1.pair_counts, s2.pair_counts)
    )
    return CooccurrenceStats(
        vocab=s1.vocab, mu=mu, T=T, pair_counts=pair_counts, pseudocount=s1.pseudocount
    )


def apply_pseudocounts(stats, pseudo):
    """Smooth mu with `pseudo` extra counts per type; pair counts unchanged."""
    if pseudo < 0:
        raise ValueError("pseudocount must be nonnegative")
    counts = stats.unigram_counts()
    mu = (counts + pseudo) / (stats.T + stats.V * pseudo)
    return CooccurrenceStats(
        vocab=stats.vocab,
        mu=mu,
        T=stats.T,
        pair_counts=stats.pair_counts,
        pseudocount=float(pseudo),
    )


@dataclass(frozen=True)
class LagCovariance:
    """Structured lag-k covariance of centered one-hot observations.

    Orientation is fixed to E[w_{t+k} w_t^T] everywhere.  For k >= 1 the
    representation is sparse_part - rank_one_left rank_one_right^T, where
    the rank-one factors are the empirical pair marginals (so row and
    column sums vanish exactly); for k = 0 it is
    diag(diagonal_part) - rank_one_left rank_one_right^T.
    """

    k: int
    sparse_part: object  # scipy CSR, or None for k = 0
    rank_one_left: np.ndarray
    rank_one_right: np.ndarray
    diagonal_part: np.ndarray = None
    whitened: bool = False

    def as_structured(self):
        factors = [
            (
                -1.0,
                self.rank_one_left[:, None],
                np.eye(1),
                self.rank_one_right[None, :],
            )
        ]
        V = self.rank_one_left.shape[0]
        if self.k == 0:
            return StructuredMatrix((V, V), diag=self.diagonal_part, factors=factors)
        return StructuredMatrix((V, V), sparse=self.sparse_part, factors=factors)

    def matvec(self, x):
        return self.as_structured().matvec(x)

    def matmat(self, X):
        return self.as_structured().matmat(X)

    def to_dense(self, guard=600):
        return self.as_structured().to_dense(guard)

    def whiten(self, w):
        """Return diag(w) @ Psi_k @ diag(w) in the same structured form."""
        sparse = None
        if self.sparse_part is not None:
            sparse = (
                scipy.sparse.diags(w) @ self.sparse_part @ scipy.sparse.diags(w)
            ).tocsr()
        diag = None if self.diagonal_part is None else w * self.diagonal_part * w
        return LagCovariance(
            k=self.k,
            sparse_part=sparse,
            rank_one_left=w * self.rank_one_left,
            rank_one_right=w * self.rank_one_right,
            diagonal_part=diag,
            whitened=True,
        )


def lag_covariance(stats, k):
    """Structured Psi_k = E[w_{t+k} w_t^T] from accumulated counts.

    Lag 0 is diag(mu) - mu mu^T.  For k >= 1 the pair counts (divided by
    the number of valid pairs at that lag) are transposed into the
    E[w_{t+k} w_t^T] orientation, and the subtracted rank-one term uses the
    empirical pair marginals so that the represented matrix annihilates the
    all-ones vector exactly.
    """
    if k < 0 or k > stats.K_max:
        raise ValueError(f"lag {k} outside accumulated range 0..{stats.K_max}")
    mu = stats.mu
    if k == 0:
        return LagCovariance(
            k=0,
            sparse_part=None,
            rank_one_left=mu.copy(),
            rank_one_right=mu.copy(),
            diagonal_part=mu.copy(),
        )
    counts = stats.pair_counts[k - 1]
    n = counts.sum()
    if n == 0:
        V = stats.V
        zero = np.zeros(V)
        return LagCovariance(
            k=k,
            sparse_part=scipy.sparse.csr_matrix((V, V)),
            rank_one_left=zero,
            rank_one_right=zero.copy(),
        )
    # counts(i, j) = #(i at t, j at t+k); transpose into E[w_{t+k} w_t^T].
    joint = (counts.T / n).tocsr()
    late = np.asarray(joint.sum(axis=1)).ravel()  # marginal of w_{t+k}
    early = np.asarray(joint.sum(axis=0)).ravel()  # marginal of w_t
    return LagCovariance(
        k=k, sparse_part=joint, rank_one_left=late, rank_one_right=early
    )


def whiten_stats(stats, max_lag=None):
    """Whitened lag covariances and the whitening vector mu^{-1/2}.

    Returns (list of LagCovariance for k = 0..max_lag, w) where
    w_i = mu_i^{-1/2}.  Requires strictly positive frequencies.
    """
    if max_lag is None:
        max_lag = stats.K_max
    if (stats.mu <= 0).any():
        raise ValueError("zero-frequency type; apply pseudocounts")
    w = 1.0 / np.sqrt(stats.mu)
    covs = [lag_covariance(stats, k).whiten(w) for k in range(max_lag + 1)]
    return covs, w


def save_counts(stats, path):
    """Binary counts file: header, vocab table, mu, per-lag sorted triples.

    All integers are little-endian; layout is documented in the README.
    """
    with open(path, "wb") as f:
        f.write(_COUNTS_MAGIC)
        f.write(
            struct.pack(
                "<IQQId",
                _COUNTS_VERSION,
                stats.V,
                stats.T,
                stats.K_max,
                stats.pseudocount,
            )
        )
        for token in stats.vocab.token_of_id:
            raw = token.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
        f.write(np.ascontiguousarray(stats.mu, dtype="<f8").tobytes())
        for k in range(1, stats.K_max + 1):
            coo = stats.pair_counts[k - 1].tocoo()
            order = np.lexsort((coo.col, coo.row))
            i = coo.row[order].astype("<u4")
            j = coo.col[order].astype("<u4")
            c = coo.data[order].astype("<u8")
            f.write(struct.pack("<Q", i.size))
            f.write(i.tobytes())
            f.write(j.tobytes())
            f.write(c.tobytes())


def load_counts(path):
    """Read a counts file written by `save_counts`."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _COUNTS_MAGIC:
            raise ValueError(f"not a counts file: bad magic {magic!r}")
        version, V, T, K_max, pseudo = struct.unpack("<IQQId", f.read(32))
        if version != _COUNTS_VERSION:
            raise ValueError(f"unsupported counts version {version}")
        tokens = []
        for _ in range(V):
            (n,) = struct.unpack("<I", f.read(4))
            tokens.append(f.read(n).decode("utf-8"))
        mu = np.frombuffer(f.read(8 * V), dtype="<f8").copy()
        pair_counts = []
        for _ in range(K_max):
            (nnz,) = struct.unpack("<Q", f.read(8))
            i = np.frombuffer(f.read(4 * nnz), dtype="<u4").astype(np.int64)
            j = np.frombuffer(f.read(4 * nnz), dtype="<u4").astype(np.int64)
            c = np.frombuffer(f.read(8 * nnz), dtype="<u8").astype(np.int64)
            pair_counts.append(
                scipy.sparse.coo_matrix((c, (i, j)), shape=(V, V)).tocsr()
            )
    id_of = {t: i for i, t in enumerate(tokens)}
    vocab = Vocabulary(
        token_of_id=tuple(tokens),
        id_of_token=id_of,
        oov_id=id_of.get(OOV_TOKEN, 0),
        num_id=id_of.get(NUM_TOKEN, 0),
    )
    return CooccurrenceStats(
        vocab=vocab, mu=mu, T=T, pair_counts=tuple(pair_counts), pseudocount=pseudo
    )


def read_sentences(path):
    """Yield whitespace-tokenized sentences, one per line, skipping blanks."""
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            tokens = line.split()
            if tokens:
                yield tokens
