"""Structured linear algebra against dense oracles."""

import numpy as np
import pytest
import scipy.sparse

from conftest import random_woodbury_instance
from textlds.linalg import (
    LinearOperator,
    StructuredMatrix,
    randomized_svd,
    trace_product,
    trace_woodbury_inverse,
    trace_woodbury_product,
    woodbury_logdet,
    woodbury_solve,
)


def diag_apply(d):
    return lambda x: x / d if x.ndim == 1 else x / d[:, None]


class TestWoodburySolve:
    def test_rank_one_identity(self):
        # (I + e1 e1^T)^{-1} e1 = 0.5 e1
        e1 = np.zeros(2)
        e1[0] = 1.0
        x = woodbury_solve(lambda v: v, e1[:, None], np.eye(1), e1[None, :], e1)
        assert np.allclose(x, 0.5 * e1)

    def test_no_factor_returns_base_solve(self, rng):
        d = rng.uniform(0.5, 2.0, size=6)
        rhs = rng.standard_normal(6)
        x = woodbury_solve(diag_apply(d), None, None, None, rhs)
        assert np.allclose(x, rhs / d)

    def test_matches_dense_inverse(self, rng):
        diag, U, S, Vt, dense = random_woodbury_instance(rng, n=8, p=2)
        rhs = rng.standard_normal(8)
        x = woodbury_solve(diag_apply(diag), U, S, Vt, rhs)
        assert np.allclose(x, np.linalg.solve(dense, rhs), atol=1e-10)

    def test_matrix_rhs(self, rng):
        diag, U, S, Vt, dense = random_woodbury_instance(rng, n=10, p=3)
        rhs = rng.standard_normal((10, 4))
        x = woodbury_solve(diag_apply(diag), U, S, Vt, rhs)
        assert np.allclose(x, np.linalg.solve(dense, rhs), atol=1e-10)

    def test_singular_inner_system_raises(self):
        # A = I, U = e1, S = [1], Vt = -e1^T makes S^{-1} + Vt U = 0
        e1 = np.zeros(3)
        e1[0] = 1.0
        with pytest.raises(np.linalg.LinAlgError, match="cond"):
            woodbury_solve(
                lambda v: v, e1[:, None], np.eye(1), -e1[None, :], np.ones(3)
            )

    def test_nested_woodbury(self, rng):
        # base inverse itself hides a Woodbury solve; checked against dense
        d1, U1, S1, Vt1, dense1 = random_woodbury_instance(rng, n=9, p=2)
        U2 = rng.standard_normal((9, 2))
        S2 = np.eye(2)
        Vt2 = rng.standard_normal((2, 9))
        dense = dense1 + U2 @ S2 @ Vt2

        def inner_inv(x):
            return woodbury_solve(diag_apply(d1), U1, S1, Vt1, x)

        rhs = rng.standard_normal(9)
        x = woodbury_solve(inner_inv, U2, S2, Vt2, rhs)
        assert np.allclose(x, np.linalg.solve(dense, rhs), atol=1e-9)


class TestWoodburyLogdet:
    def test_rank_one(self):
        e1 = np.zeros(2)
        e1[0] = 1.0
        val = woodbury_logdet(0.0, lambda v: v, e1[:, None], np.eye(1), e1[None, :])
        assert np.isclose(val, np.log(2.0))

    def test_no_factor(self):
        assert woodbury_logdet(1.75, lambda v: v, None, None, None) == 1.75

    def test_matches_dense(self, rng):
        diag, U, S, Vt, dense = random_woodbury_instance(rng, n=7, p=2)
        # symmetrize into a PD update so dense logdet is well-defined
        dense_pd = np.diag(diag) + U @ S @ U.T
        got = woodbury_logdet(
            np.log(diag).sum(), diag_apply(diag), U, S, U.T
        )
        want = np.linalg.slogdet(dense_pd)[1]
        assert np.isclose(got, want, atol=1e-9)

    def test_nonpositive_raises(self):
        e1 = np.zeros(2)
        e1[0] = 1.0
        with pytest.raises(np.linalg.LinAlgError):
            woodbury_logdet(
                0.0, lambda v: v, e1[:, None], -2.0 * np.eye(1), e1[None, :]
            )


class TestTraces:
    def test_trace_product_unit(self):
        e1 = np.zeros((4, 1))
        e1[0] = 1.0
        assert trace_product(e1, e1) == 1.0

    def test_trace_product_zero(self, rng):
        X = rng.standard_normal((5, 2))
        assert trace_product(X, np.zeros_like(X)) == 0.0

    def test_trace_product_dense(self, rng):
        X = rng.standard_normal((6, 2))
        Y = rng.standard_normal((6, 2))
        assert np.isclose(trace_product(X, Y), np.trace(X @ Y.T))

    def test_trace_inverse_identity(self):
        val = trace_woodbury_inverse(5.0, lambda v: v, None, None, None)
        assert val == 5.0

    def test_trace_inverse_rank_one(self):
        # eigenvalues of I + e1 e1^T are (2, 1) so the inverse traces to 1.5
        e1 = np.zeros(2)
        e1[0] = 1.0
        val = trace_woodbury_inverse(
            2.0, lambda v: v, e1[:, None], np.eye(1), e1[None, :]
        )
        assert np.isclose(val, 1.5)

    def test_trace_inverse_dense(self, rng):
        diag, U, S, Vt, _ = random_woodbury_instance(rng, n=8, p=2)
        dense_sym = np.diag(diag) + U @ S @ U.T
        got = trace_woodbury_inverse(
            (1.0 / diag).sum(), diag_apply(diag), U, S, U.T
        )
        assert np.isclose(got, np.trace(np.linalg.inv(dense_sym)), atol=1e-10)

    def test_trace_product_inverse_dense(self, rng):
        diag, U, S, Vt, _ = random_woodbury_instance(rng, n=8, p=2)
        dense_sym = np.diag(diag) + U @ S @ U.T
        Z = rng.standard_normal((8, 3))
        W = rng.standard_normal((8, 3))
        got = trace_woodbury_product(diag_apply(diag), U, S, U.T, Z, W)
        want = np.trace(np.linalg.inv(dense_sym) @ Z @ W.T)
        assert np.isclose(got, want, atol=1e-10)


class TestStructuredMatrix:
    def test_matvec_matches_dense(self, rng):
        base = scipy.sparse.random(12, 12, density=0.3, random_state=7, format="csr")
        U = rng.standard_normal((12, 2))
        Vt = rng.standard_normal((2, 12))
        sm = StructuredMatrix(
            (12, 12), sparse=base, factors=[(-1.0, U, np.eye(2), Vt)]
        )
        dense = base.toarray() - U @ Vt
        x = rng.standard_normal(12)
        assert np.allclose(sm.matvec(x), dense @ x, atol=1e-12)
        assert np.allclose(sm.rmatvec(x), dense.T @ x, atol=1e-12)
        assert np.allclose(sm.to_dense(), dense, atol=1e-14)

    def test_adjoint_consistency(self, rng):
        # <Mx, y> == <x, M^T y>
        diag = rng.uniform(0.5, 2.0, size=10)
        U = rng.standard_normal((10, 3))
        Vt = rng.standard_normal((3, 10))
        sm = StructuredMatrix((10, 10), diag=diag, factors=[(1.0, U, np.eye(3), Vt)])
        x = rng.standard_normal(10)
        y = rng.standard_normal(10)
        assert np.isclose(sm.matvec(x) @ y, x @ sm.rmatvec(y), rtol=1e-10)

    def test_scale_matches_dense(self, rng):
        diag = rng.uniform(0.5, 2.0, size=6)
        U = rng.standard_normal((6, 2))
        Vt = rng.standard_normal((2, 6))
        sm = StructuredMatrix((6, 6), diag=diag, factors=[(-1.0, U, np.eye(2), Vt)])
        left = rng.uniform(0.5, 1.5, size=6)
        right = rng.uniform(0.5, 1.5, size=6)
        scaled = sm.scale(left, right)
        want = np.diag(left) @ sm.to_dense() @ np.diag(right)
        assert np.allclose(scaled.to_dense(), want, atol=1e-12)

    def test_trace(self, rng):
        diag = rng.uniform(0.5, 2.0, size=6)
        U = rng.standard_normal((6, 2))
        Vt = rng.standard_normal((2, 6))
        sm = StructuredMatrix((6, 6), diag=diag, factors=[(1.0, U, np.eye(2), Vt)])
        assert np.isclose(sm.trace(), np.trace(sm.to_dense()))

    def test_dense_guard(self):
        sm = StructuredMatrix((1000, 1000), diag=np.ones(1000))
        with pytest.raises(ValueError, match="refusing"):
            sm.to_dense()


class TestRandomizedSvd:
    def test_rank_one_exact(self, rng):
        u = rng.standard_normal(15)
        u /= np.linalg.norm(u)
        v = rng.standard_normal(12)
        v *= 3.0 / np.linalg.norm(v)
        op = np.outer(u, v)
        U, s, V = randomized_svd(op, 1, seed=0)
        assert abs(s[0] - 3.0) < 1e-8

    def test_diagonal_spectrum(self):
        op = np.diag([5.0, 4.0, 3.0, 2.0, 1.0])
        U, s, V = randomized_svd(op, 2, seed=0)
        assert np.allclose(s, [5.0, 4.0], atol=1e-8)

    def test_known_svd_recovery(self, rng):
        # construct a 40x40 operator from random orthonormal factors
        q1, _ = np.linalg.qr(rng.standard_normal((40, 40)))
        q2, _ = np.linalg.qr(rng.standard_normal((40, 40)))
        svals = np.exp(-np.arange(40) / 4.0) * 10
        op = q1 @ np.diag(svals) @ q2.T
        U, s, V = randomized_svd(op, 10, seed=3)
        assert np.allclose(s, svals[:10], atol=1e-6)
        # orthonormal columns, nonincreasing values
        assert np.allclose(U.T @ U, np.eye(10), atol=1e-8)
        assert np.allclose(V.T @ V, np.eye(10), atol=1e-8)
        assert (np.diff(s) <= 1e-12).all()
        # reconstruction close to the optimal rank-10 error
        err = np.linalg.norm(op - U @ np.diag(s) @ V.T)
        opt = np.linalg.norm(svals[10:])
        assert err < opt * 1.5 + 1e-8

    def test_deterministic_given_seed(self, rng):
        op = rng.standard_normal((20, 16))
        out1 = randomized_svd(op, 4, seed=11)
        out2 = randomized_svd(op, 4, seed=11)
        for a, b in zip(out1, out2):
            assert np.array_equal(a, b)

    def test_dimension_violation(self, rng):
        with pytest.raises(ValueError):
            randomized_svd(rng.standard_normal((5, 5)), 6)

    def test_linear_operator_input(self, rng):
        dense = rng.standard_normal((18, 14))
        op = LinearOperator(dense.shape, lambda X: dense @ X, lambda Y: dense.T @ Y)
        U, s, V = randomized_svd(op, 5, seed=0)
        want = np.linalg.svd(dense, compute_uv=False)[:5]
        assert np.allclose(s, want, atol=1e-6)


def test_property_structured_vs_dense_sweep(rng):
    # random structured instances agree with dense counterparts
    for trial in range(50):
        n = int(rng.integers(4, 33))
        p = int(rng.integers(1, 5))
        diag, U, S, Vt, dense = random_woodbury_instance(rng, n=n, p=p)
        rhs = rng.standard_normal(n)
        x = woodbury_solve(diag_apply(diag), U, S, Vt, rhs)
        want = np.linalg.solve(dense, rhs)
        assert np.allclose(x, want, rtol=1e-9, atol=1e-9)
