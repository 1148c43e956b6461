"""Core matrix and SVD contracts, each checked against an independent oracle."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvfactor.densemat import (
    Matrix,
    condition_number,
    frobenius_rel_error,
    matmul,
    reconstruct,
    spectral_norm,
    svd,
    truncate,
)
from kvfactor.errors import ContractViolationError, UndefinedInputError


def _matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Naive triple loop, summed left to right."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def _sigma_oracle(a: np.ndarray) -> np.ndarray:
    """Singular values via eigenvalues of the Gram matrix."""
    g = a.T @ a if a.shape[0] >= a.shape[1] else a @ a.T
    lam = np.linalg.eigvalsh(g)
    return np.sqrt(np.clip(lam, 0.0, None))[::-1]


def _power_iteration_norm(a: np.ndarray, iters: int = 500) -> float:
    rng = np.random.default_rng(1234)
    x = rng.standard_normal(a.shape[1])
    x /= np.linalg.norm(x)
    for _ in range(iters):
        y = a.T @ (a @ x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
    return float(np.linalg.norm(a @ x))


def _spectral_matrix(rng, m, n, gamma, smax=1.0):
    r = min(m, n)
    q1, _ = np.linalg.qr(rng.standard_normal((m, r)))
    q2, _ = np.linalg.qr(rng.standard_normal((n, r)))
    return q1 @ np.diag(smax * gamma ** np.arange(r)) @ q2.T


class TestMatrix:
    def test_rejects_non_2d(self):
        with pytest.raises(ContractViolationError):
            Matrix([1.0, 2.0])

    def test_rejects_nonfinite(self):
        with pytest.raises(ContractViolationError):
            Matrix([[1.0, np.nan]])
        with pytest.raises(ContractViolationError):
            Matrix([[np.inf, 0.0]])

    def test_immutable_buffer(self):
        m = Matrix([[1.0, 2.0]])
        with pytest.raises(ValueError):
            m.data[0, 0] = 5.0

    def test_shape_accessors(self):
        m = Matrix(np.zeros((3, 5)))
        assert (m.rows, m.cols) == (3, 5)
        assert (m.T.rows, m.T.cols) == (5, 3)


class TestMatmul:
    def test_known_product(self):
        a = Matrix([[1.0, 2.0], [3.0, 4.0]])
        b = Matrix([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolationError):
            matmul(Matrix(np.ones((2, 3))), Matrix(np.ones((2, 3))))

    def test_against_triple_loop_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((20, 30))
        b = rng.standard_normal((30, 10))
        got = matmul(Matrix(a), Matrix(b)).data
        want = _matmul_oracle(a, b)
        assert np.abs(got - want).max() < 1e-12

    def test_operator_form(self):
        a = Matrix(np.eye(3))
        b = Matrix(np.arange(9.0).reshape(3, 3))
        assert np.array_equal((a @ b).data, b.data)


class TestSvd:
    def test_diagonal(self):
        res = svd(Matrix.diag([3.0, 2.0, 1.0]))
        assert np.allclose(res.sigma, [3.0, 2.0, 1.0], atol=1e-14)
        assert np.allclose(res.u.data, np.eye(3), atol=1e-12)
        assert np.allclose(res.vt.data, np.eye(3), atol=1e-12)

    def test_rank_deficient(self):
        res = svd(Matrix([[1.0, 1.0], [0.0, 0.0]]))
        assert np.allclose(res.sigma, [math.sqrt(2.0), 0.0], atol=1e-14)
        # u stays a full orthonormal frame even with a zero singular value
        assert np.abs(res.u.data.T @ res.u.data - np.eye(2)).max() < 1e-8

    @pytest.mark.parametrize("shape,gamma", [
        ((64, 16), 0.9),
        ((16, 64), 0.9),
        ((64, 32), 0.5),
        ((40, 40), 0.7),
    ])
    def test_contracts_on_spectral_matrices(self, shape, gamma):
        rng = np.random.default_rng(hash(shape) % (2**32))
        a = _spectral_matrix(rng, *shape, gamma)
        res = svd(Matrix(a))
        r = min(shape)
        assert res.u.data.shape == (shape[0], r)
        assert res.vt.data.shape == (r, shape[1])
        assert np.all(np.diff(res.sigma) <= 1e-300)
        assert np.abs(res.u.data.T @ res.u.data - np.eye(r)).max() < 1e-8
        assert np.abs(res.vt.data @ res.vt.data.T - np.eye(r)).max() < 1e-8
        rel = np.linalg.norm(a - reconstruct(res).data) / np.linalg.norm(a)
        assert rel < 1e-10
        assert np.abs(res.sigma - _sigma_oracle(a)).max() < 1e-8

    def test_sign_convention(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((12, 8))
        res = svd(Matrix(a))
        for i in range(res.rank_dim):
            col = res.u.data[:, i]
            nz = col[col != 0.0]
            assert nz.size == 0 or nz[0] >= 0.0

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((30, 20))
        r1 = svd(Matrix(a))
        r2 = svd(Matrix(a))
        assert np.array_equal(r1.u.data, r2.u.data)
        assert np.array_equal(r1.sigma, r2.sigma)
        assert np.array_equal(r1.vt.data, r2.vt.data)

    def test_agrees_with_lapack_route(self):
        rng = np.random.default_rng(19)
        a = rng.standard_normal((24, 10))
        ours = svd(Matrix(a)).sigma
        lapack = np.linalg.svd(a, compute_uv=False)
        assert np.abs(ours - lapack).max() < 1e-10


class TestTruncate:
    def test_full_rank_is_lossless(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((15, 9))
        res = svd(Matrix(a))
        kept = truncate(res, res.rank_dim)
        rel = np.linalg.norm(a - reconstruct(kept).data) / np.linalg.norm(a)
        assert rel < 1e-10

    def test_diagonal_truncation(self):
        res = truncate(svd(Matrix.diag([3.0, 2.0, 1.0])), 2)
        assert np.allclose(reconstruct(res).data, np.diag([3.0, 2.0, 0.0]), atol=1e-13)

    def test_rank_out_of_range(self):
        res = svd(Matrix(np.eye(4)))
        with pytest.raises(ContractViolationError):
            truncate(res, 0)
        with pytest.raises(ContractViolationError):
            truncate(res, 5)

    def test_eckart_young(self):
        # || M - M_k ||_F^2 equals the discarded sigma_i^2 tail
        rng = np.random.default_rng(23)
        a = _spectral_matrix(rng, 32, 8, 0.6)
        res = svd(Matrix(a))
        total = np.linalg.norm(a) ** 2
        for k in range(1, res.rank_dim):
            err = np.linalg.norm(a - reconstruct(truncate(res, k)).data) ** 2
            tail = float(np.sum(res.sigma[k:] ** 2))
            assert abs(err - tail) <= 1e-9 * total


class TestSpectralNorm:
    def test_identity(self):
        assert spectral_norm(Matrix(np.eye(5))) == pytest.approx(1.0, abs=1e-12)

    def test_diagonal_with_signs(self):
        assert spectral_norm(Matrix.diag([3.0, -5.0, 2.0])) == pytest.approx(5.0, abs=1e-12)

    def test_against_power_iteration(self):
        rng = np.random.default_rng(31)
        a = rng.standard_normal((26, 14))
        assert spectral_norm(Matrix(a)) == pytest.approx(
            _power_iteration_norm(a), rel=1e-9
        )


class TestConditionNumber:
    def test_identity(self):
        assert condition_number(Matrix(np.eye(6))) == pytest.approx(1.0, abs=1e-10)

    def test_diagonal(self):
        assert condition_number(Matrix.diag([4.0, 2.0])) == pytest.approx(2.0, abs=1e-10)

    def test_rank_deficient_is_infinite(self):
        assert condition_number(Matrix([[1.0, 1.0], [2.0, 2.0]])) == math.inf

    def test_rectangular_uses_min_dimension(self):
        # 4x2 matrix: condition over the 2 nonzero singular values
        a = np.array([[3.0, 0.0], [0.0, 1.5], [0.0, 0.0], [0.0, 0.0]])
        assert condition_number(Matrix(a)) == pytest.approx(2.0, abs=1e-10)

    def test_scaling_invariance(self):
        rng = np.random.default_rng(41)
        a = rng.standard_normal((10, 6))
        c1 = condition_number(Matrix(a))
        c2 = condition_number(Matrix(7.5 * a))
        assert c1 == pytest.approx(c2, rel=1e-9)


class TestFrobeniusRelError:
    def test_exact_match(self):
        m = Matrix([[1.0, 2.0], [3.0, 4.0]])
        assert frobenius_rel_error(m, m) == 0.0

    def test_known_value(self):
        m = Matrix([[3.0, 0.0], [0.0, 4.0]])
        assert frobenius_rel_error(m, Matrix.zeros(2, 2)) == pytest.approx(1.0)

    def test_zero_reference(self):
        with pytest.raises(UndefinedInputError):
            frobenius_rel_error(Matrix.zeros(2, 2), Matrix.zeros(2, 2))

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolationError):
            frobenius_rel_error(Matrix.zeros(2, 2), Matrix.zeros(2, 3))


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    m=st.integers(2, 14),
    n=st.integers(2, 14),
)
def test_svd_contracts_hold_for_random_shapes(seed, m, n):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((m, n))
    res = svd(Matrix(a))
    r = min(m, n)
    assert np.abs(res.u.data.T @ res.u.data - np.eye(r)).max() < 1e-8
    assert np.abs(res.vt.data @ res.vt.data.T - np.eye(r)).max() < 1e-8
    assert np.all(np.diff(res.sigma) <= 1e-300)
    rel = np.linalg.norm(a - reconstruct(res).data) / np.linalg.norm(a)
    assert rel < 1e-10


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 100.0))
def test_condition_number_ignores_scale(seed, scale):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((8, 5))
    assert condition_number(Matrix(a)) == pytest.approx(
        condition_number(Matrix(scale * a)), rel=1e-8
    )


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_row_permutation_preserves_sigma(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((9, 6))
    perm = rng.permutation(9)
    s1 = svd(Matrix(a)).sigma
    s2 = svd(Matrix(a[perm])).sigma
    assert np.abs(s1 - s2).max() < 1e-10
