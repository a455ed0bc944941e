"""Kernels for matrices represented as (diagonal or sparse) plus/minus low rank.

Everything here operates on the factored representation: matvecs, Woodbury
solves, log-determinants, trace identities, and a randomized truncated SVD of
implicitly defined operators.  Dense realizations exist only as test oracles
for small dimensions.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg
import scipy.sparse

# Inner p x p solves warn above this condition number and fail when singular.
CONDITION_WARN_THRESHOLD = 1e12

# Guard: structured matrices are never densified above this dimension.
DENSE_GUARD = 600


class StructuredMatrix:
    """A matrix ``base + sum_k sign_k * U_k @ S_k @ Vt_k``.

    The base is either a diagonal (stored as a vector) or a scipy sparse
    matrix; each low-rank term carries an explicit sign so that
    sparse-minus-rank-one lag covariances keep exact structure.

    Parameters
    ----------
    shape : (int, int)
    diag : array, optional
        Diagonal of the base, mutually exclusive with `sparse`.
    sparse : scipy sparse matrix, optional
        Sparse base, mutually exclusive with `diag`.
    factors : sequence of (sign, U, S, Vt)
        Low-rank terms; sign is +1 or -1, U is (nrows, p), S is (p, p),
        Vt is (p, ncols).
    """

    def __init__(self, shape, diag=None, sparse=None, factors=()):
        self.shape = (int(shape[0]), int(shape[1]))
        if diag is not None and sparse is not None:
            raise ValueError("give either a diagonal or a sparse base, not both")
        self.diag = None if diag is None else np.asarray(diag, dtype=np.float64)
        if self.diag is not None and self.diag.shape != (min(self.shape),):
            if self.shape[0] != self.shape[1]:
                raise ValueError("diagonal base requires a square shape")
        self.sparse = None if sparse is None else sparse.tocsr()
        self.factors = []
        for sign, U, S, Vt in factors:
            U = np.atleast_2d(np.asarray(U, dtype=np.float64))
            S = np.atleast_2d(np.asarray(S, dtype=np.float64))
            Vt = np.atleast_2d(np.asarray(Vt, dtype=np.float64))
            if U.shape[0] != self.shape[0] or Vt.shape[1] != self.shape[1]:
                raise ValueError("factor dimensions do not match matrix shape")
            self.factors.append((float(sign), U, S, Vt))

    @classmethod
    def from_dense(cls, dense):
        """Wrap a small dense matrix (stored as a sparse base). Test use only."""
        dense = np.asarray(dense, dtype=np.float64)
        return cls(dense.shape, sparse=scipy.sparse.csr_matrix(dense))

    @classmethod
    def identity_minus_outer(cls, u):
        """I - u u^T for a vector u (the whitened lag-0 covariance shape)."""
        u = np.asarray(u, dtype=np.float64)
        n = u.shape[0]
        return cls(
            (n, n),
            diag=np.ones(n),
            factors=[(-1.0, u[:, None], np.eye(1), u[None, :])],
        )

    def _base_matmat(self, X):
        if self.diag is not None:
            return self.diag[:, None] * X
        if self.sparse is not None:
            return np.asarray(self.sparse @ X)
        return np.zeros((self.shape[0], X.shape[1]))

    def _base_rmatmat(self, X):
        if self.diag is not None:
            return self.diag[:, None] * X
        if self.sparse is not None:
            return np.asarray(self.sparse.T @ X)
        return np.zeros((self.shape[1], X.shape[1]))

    def matmat(self, X):
        """Return ``self @ X`` for a dense X of shape (ncols, k) or (ncols,)."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[:, None]
        out = self._base_matmat(X)
        for sign, U, S, Vt in self.factors:
            out = out + sign * (U @ (S @ (Vt @ X)))
        return out[:, 0] if single else out

    def rmatmat(self, X):
        """Return ``self.T @ X``."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[:, None]
        out = self._base_rmatmat(X)
        for sign, U, S, Vt in self.factors:
            out = out + sign * (Vt.T @ (S.T @ (U.T @ X)))
        return out[:, 0] if single else out

    def matvec(self, x):
        return self.matmat(x)

    def rmatvec(self, y):
        return self.rmatmat(y)

    def scale(self, left, right):
        """Return diag(left) @ self @ diag(right), preserving structure."""
        left = np.asarray(left, dtype=np.float64)
        right = np.asarray(right, dtype=np.float64)
        diag = None
        sparse = None
        if self.diag is not None:
            diag = left * self.diag * right
        if self.sparse is not None:
            sparse = scipy.sparse.diags(left) @ self.sparse @ scipy.sparse.diags(right)
        factors = [
            (sign, left[:, None] * U, S, Vt * right[None, :])
            for sign, U, S, Vt in self.factors
        ]
        return StructuredMatrix(self.shape, diag=diag, sparse=sparse, factors=factors)

    def transpose(self):
        sparse = None if self.sparse is None else self.sparse.T.tocsr()
        factors = [(sign, Vt.T, S.T, U.T) for sign, U, S, Vt in self.factors]
        return StructuredMatrix(
            (self.shape[1], self.shape[0]), diag=self.diag, sparse=sparse, factors=factors
        )

    @property
    def T(self):
        return self.transpose()

    def trace(self):
        if self.shape[0] != self.shape[1]:
            raise ValueError("trace of a non-square matrix")
        total = 0.0
        if self.diag is not None:
            total += float(self.diag.sum())
        if self.sparse is not None:
            total += float(self.sparse.diagonal().sum())
        for sign, U, S, Vt in self.factors:
            # tr(U S Vt) = sum_ij (U S)_ij Vt^T_ij
            total += sign * float(np.sum((U @ S) * Vt.T))
        return total

    def to_dense(self, guard=DENSE_GUARD):
        """Dense realization; refuses above `guard` (oracle/test use only)."""
        if max(self.shape) > guard:
            raise ValueError(
                f"refusing to densify a {self.shape} structured matrix (guard={guard})"
            )
        out = np.zeros(self.shape)
        if self.diag is not None:
            out[np.arange(self.shape[0]), np.arange(self.shape[1])] = self.diag
        if self.sparse is not None:
            out += self.sparse.toarray()
        for sign, U, S, Vt in self.factors:
            out += sign * (U @ S @ Vt)
        return out

    def __matmul__(self, X):
        return self.matmat(X)


class LinearOperator:
    """Minimal matrix-free operator: shape plus apply / apply_transpose."""

    def __init__(self, shape, apply, apply_transpose):
        self.shape = (int(shape[0]), int(shape[1]))
        self._apply = apply
        self._apply_transpose = apply_transpose

    @property
    def nrows(self):
        return self.shape[0]

    @property
    def ncols(self):
        return self.shape[1]

    def apply(self, X):
        return self._apply(np.asarray(X, dtype=np.float64))

    def apply_transpose(self, Y):
        return self._apply_transpose(np.asarray(Y, dtype=np.float64))


def as_linear_operator(mat):
    """Adapt an ndarray or StructuredMatrix to the LinearOperator interface."""
    if isinstance(mat, LinearOperator):
        return mat
    if isinstance(mat, StructuredMatrix):
        return LinearOperator(mat.shape, mat.matmat, mat.rmatmat)
    arr = np.asarray(mat, dtype=np.float64)
    return LinearOperator(arr.shape, lambda X: arr @ X, lambda Y: arr.T @ Y)


def _solve_inner(inner, rhs):
    """Pivoted solve of the small inner system with a condition warning."""
    inner = np.atleast_2d(inner)
    cond = np.linalg.cond(inner)
    if not np.isfinite(cond) or cond > 1e15:
        raise np.linalg.LinAlgError(
            f"inner Woodbury system is numerically singular (cond ~ {cond:.3e})"
        )
    if cond > CONDITION_WARN_THRESHOLD:
        warnings.warn(
            f"inner Woodbury system badly conditioned (cond ~ {cond:.3e})",
            stacklevel=3,
        )
    lu, piv = scipy.linalg.lu_factor(inner)
    return scipy.linalg.lu_solve((lu, piv), rhs)


def woodbury_solve(Ainv_apply, U, S, Vt, rhs):
    """Solve ``(A + U S Vt) x = rhs`` given the action of A^{-1}.

    Uses A^{-1} - A^{-1} U (S^{-1} + Vt A^{-1} U)^{-1} Vt A^{-1} with
    parenthesization that never forms a full-size matrix.  Pass U/S/Vt as
    None (or rank 0) for the no-factor case.  `Ainv_apply` may itself hide a
    Woodbury solve, which makes the identity usable recursively.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    y = Ainv_apply(rhs)
    if U is None or S is None or Vt is None or np.size(S) == 0:
        return y
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    Vt = np.atleast_2d(np.asarray(Vt, dtype=np.float64))
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    AinvU = Ainv_apply(U)
    inner = np.linalg.inv(S) + Vt @ AinvU
    correction = AinvU @ _solve_inner(inner, Vt @ y)
    return y - correction


def woodbury_logdet(A_logdet, Ainv_apply, U, S, Vt):
    """log det(A + U S Vt) = log det S + log det A + log det(S^{-1} + Vt A^{-1} U).

    Raises when either determinant on the low-rank side is non-positive
    (the update is not positive definite on the intended subspace).
    """
    if U is None or S is None or Vt is None or np.size(S) == 0:
        return float(A_logdet)
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    Vt = np.atleast_2d(np.asarray(Vt, dtype=np.float64))
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    sign_s, logdet_s = np.linalg.slogdet(S)
    inner = np.linalg.inv(S) + Vt @ Ainv_apply(U)
    sign_i, logdet_i = np.linalg.slogdet(inner)
    if sign_s * sign_i <= 0:
        raise np.linalg.LinAlgError(
            "non-positive determinant in Woodbury logdet; "
            "matrix is not positive definite on the intended subspace"
        )
    return float(A_logdet + logdet_s + logdet_i)


def trace_product(X, Y):
    """tr(X Y^T) = sum_ij X_ij Y_ij, in O(Vk) for V x k factors."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape:
        raise ValueError(f"shape mismatch {X.shape} vs {Y.shape}")
    return float(np.sum(X * Y))


def trace_woodbury_inverse(Ainv_trace, Ainv_apply, U, S, Vt):
    """tr[(A + U S Vt)^{-1}] without any full-size intermediate.

    Assumes A is symmetric (diagonal in all our uses) so the transposed
    inverse action coincides with `Ainv_apply`.
    """
    if U is None or S is None or Vt is None or np.size(S) == 0:
        return float(Ainv_trace)
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    Vt = np.atleast_2d(np.asarray(Vt, dtype=np.float64))
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    AinvU = Ainv_apply(U)
    inner = np.linalg.inv(S) + Vt @ AinvU
    X = AinvU @ np.linalg.inv(inner)
    Y = Ainv_apply(Vt.T)
    return float(Ainv_trace - trace_product(X, Y))


def trace_woodbury_product(Ainv_apply, U, S, Vt, Z, W):
    """tr[(A + U S Vt)^{-1} Z W^T] for tall Z, W, without full-size work."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    AinvZ = Ainv_apply(Z)
    total = trace_product(AinvZ, W)
    if U is None or S is None or Vt is None or np.size(S) == 0:
        return float(total)
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    Vt = np.atleast_2d(np.asarray(Vt, dtype=np.float64))
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    AinvU = Ainv_apply(U)
    inner = np.linalg.inv(S) + Vt @ AinvU
    X = AinvU @ np.linalg.inv(inner)
    # tr[X (Vt A^{-1} Z W^T)] = tr[X ((W (AinvZ^T Vt^T))^T)]
    Y = W @ (AinvZ.T @ Vt.T)
    return float(total - trace_product(X, Y))


def randomized_svd(op, rank, oversample=10, power_iters=2, seed=0):
    """Truncated SVD of a matrix-free operator (Halko-style).

    Parameters
    ----------
    op : LinearOperator, StructuredMatrix, or ndarray
    rank : int
        Number of singular triplets to return.
    oversample : int
        Extra sketch columns; clamped so the sketch fits the operator.
    power_iters : int
        Subspace (power) iterations, each re-orthonormalized.
    seed : int
        Seed for the Gaussian sketch; the result is deterministic given it.

    Returns
    -------
    (U, s, V) with U: nrows x rank, s nonincreasing, V: ncols x rank.
    """
    op = as_linear_operator(op)
    m, n = op.shape
    if rank < 1 or rank > min(m, n):
        raise ValueError(f"rank {rank} invalid for a {m} x {n} operator")
    sketch = min(rank + oversample, min(m, n))
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((n, sketch))
    Y = op.apply(omega)
    Q, _ = np.linalg.qr(Y)
    for _ in range(power_iters):
        Z, _ = np.linalg.qr(op.apply_transpose(Q))
        Q, _ = np.linalg.qr(op.apply(Z))
    B = op.apply_transpose(Q).T  # sketch x n
    Ub, s, Vt = np.linalg.svd(B, full_matrices=False)
    U = Q @ Ub
    return U[:, :rank], s[:rank], Vt[:rank].T
