import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from covreg import numkit
from covreg.errors import DimensionMismatch, NotPositiveDefinite

from conftest import random_pd


def test_vec_column_major():
    assert np.array_equal(numkit.vec([[1, 2], [2, 4]]), [1, 2, 2, 4])
    assert np.array_equal(numkit.vec(np.eye(2)), [1, 0, 0, 1])
    assert np.array_equal(numkit.vec([[1, 2], [3, 4]]), [1, 3, 2, 4])


def test_vec_kron_identity(rng):
    A, B, C = (rng.normal(size=(3, 3)) for _ in range(3))
    lhs = numkit.vec(A @ B @ C)
    rhs = np.kron(C.T, A) @ numkit.vec(B)
    assert np.allclose(lhs, rhs, atol=1e-12, rtol=0)


def test_mat_examples():
    assert np.array_equal(numkit.mat([1, 0, 0, 1], 2), np.eye(2))
    assert np.array_equal(numkit.mat([1, 2, 2, 4], 2), [[1, 2], [2, 4]])
    with pytest.raises(DimensionMismatch):
        numkit.mat(np.ones(5), 2)


@given(st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_vec_mat_round_trip(p, seed):
    r = np.random.default_rng(seed)
    M = r.normal(size=(p, p))
    assert np.array_equal(numkit.mat(numkit.vec(M), p), M)
    v = r.normal(size=p * p)
    assert np.array_equal(numkit.vec(numkit.mat(v, p)), v)


def test_vec_stacks():
    M = np.arange(8.0).reshape(2, 2, 2)
    assert np.array_equal(numkit.vec(M)[1], numkit.vec(M[1]))


def test_sym_sqrt_examples(rng):
    assert np.allclose(numkit.sym_sqrt(np.eye(3)), np.eye(3))
    assert np.allclose(numkit.sym_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))
    for _ in range(100):
        C = random_pd(rng, 5, floor=0.1)
        S = numkit.sym_sqrt(C)
        assert np.array_equal(S, S.T)
        assert np.linalg.norm(S @ S - C) / np.linalg.norm(C) < 1e-10


def test_sym_sqrt_inverse(rng):
    C = random_pd(rng, 4)
    S, Si = numkit.sym_sqrt(C, inverse=True)
    assert np.allclose(S @ Si, np.eye(4), atol=1e-10)


def test_sym_sqrt_rejects_non_pd():
    with pytest.raises(NotPositiveDefinite) as info:
        numkit.sym_sqrt(np.diag([1.0, -1.0]))
    assert info.value.lam_min == pytest.approx(-1.0)
    stack = np.stack([np.eye(2), np.diag([1.0, 0.0])])
    with pytest.raises(NotPositiveDefinite) as info:
        numkit.sym_sqrt(stack)
    assert info.value.index == 1


def test_pinv_examples():
    assert np.allclose(numkit.pinv(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]))
    assert np.allclose(numkit.pinv(np.eye(3)), np.eye(3))
    assert np.array_equal(numkit.pinv(np.zeros((3, 3))), np.zeros((3, 3)))
    V = np.eye(4) + numkit.commutation(2)
    assert np.allclose(V @ numkit.pinv(V) @ V, V, atol=1e-10)


@given(st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_pinv_penrose_conditions(m, seed):
    r = np.random.default_rng(seed)
    k = r.integers(1, m)
    B = r.normal(size=(m, k))
    V = B @ B.T
    P = numkit.pinv(V)
    scale = max(1.0, np.linalg.norm(V), np.linalg.norm(P))
    tol = 1e-8 * scale
    assert np.allclose(V @ P @ V, V, atol=tol * np.linalg.norm(V))
    assert np.allclose(P @ V @ P, P, atol=tol * np.linalg.norm(P))
    assert np.allclose((V @ P).T, V @ P, atol=tol)
    assert np.allclose((P @ V).T, P @ V, atol=tol)


def test_commutation_examples():
    assert np.array_equal(numkit.commutation(1), [[1.0]])
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(numkit.commutation(2) @ numkit.vec(A), [1, 2, 3, 4])
    K3 = numkit.commutation(3)
    assert np.array_equal(K3 @ K3, np.eye(9))


@pytest.mark.parametrize("p", range(1, 11))
def test_commutation_is_permutation_involution(p, rng):
    K = numkit.commutation(p)
    assert np.array_equal(K.sum(axis=0), np.ones(p * p))
    assert np.array_equal(K.sum(axis=1), np.ones(p * p))
    assert np.array_equal(K @ K, np.eye(p * p))
    A = rng.normal(size=(p, p))
    assert np.array_equal(K @ numkit.vec(A), numkit.vec(A.T))


def test_min_eigenvalue(rng):
    assert numkit.min_eigenvalue(np.diag([1.0, 5.0])) == pytest.approx(1.0)
    assert numkit.min_eigenvalue(np.array([[2.0, 1.0], [1.0, 2.0]])) == pytest.approx(1.0)
    A = rng.normal(size=(10, 10))
    C = A + A.T
    ref = np.linalg.eig(C)[0].real.min()
    assert numkit.min_eigenvalue(C) == pytest.approx(ref, rel=1e-10)


def test_pairwise_and_exact_sum(rng):
    x = rng.normal(size=(37, 3))
    assert np.allclose(numkit.pairwise_sum(x), x.sum(axis=0))
    perm = rng.permutation(37)
    assert np.array_equal(numkit.exact_sum(x), numkit.exact_sum(x[perm]))
    assert numkit.pairwise_sum(np.zeros((0, 2))).shape == (2,)
