"""Dense matrix primitives.

Conventions
-----------
``vec`` stacks columns (Fortran order), so that ``vec(A @ B @ C) ==
kron(C.T, A) @ vec(B)``.  Functions that take a square matrix also accept a
stack of shape ``(..., p, p)`` unless noted otherwise.
"""

import math

import numpy as np

from .errors import DimensionMismatch, NotPositiveDefinite

EPS = np.finfo(float).eps
PD_TOL = 1e-10


def vec(M):
    M = np.asarray(M, dtype=float)
    if M.ndim < 2:
        raise DimensionMismatch(f"vec expects a matrix, got shape {M.shape}")
    # column-major: swap the last two axes then flatten them row-major
    return np.swapaxes(M, -1, -2).reshape(M.shape[:-2] + (-1,))


def mat(v, p=None):
    v = np.asarray(v, dtype=float)
    m = v.shape[-1]
    if p is None:
        p = int(round(np.sqrt(m)))
    if p * p != m:
        raise DimensionMismatch(f"vector of length {m} is not p^2 for p={p}")
    return np.swapaxes(v.reshape(v.shape[:-1] + (p, p)), -1, -2)


def symmetrize(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def commutation(p):
    """The p^2 x p^2 permutation K with K @ vec(A) == vec(A.T)."""
    if p < 1:
        raise DimensionMismatch("p must be positive")
    K = np.zeros((p * p, p * p))
    idx = np.arange(p * p)
    a, b = idx % p, idx // p  # vec index a + p*b holds A[a, b]
    K[b + p * a, idx] = 1.0
    return K


def min_eigenvalue(C):
    return np.linalg.eigvalsh(symmetrize(np.asarray(C, dtype=float)))[..., 0]


def _first_bad(lam_min, lam_max, tol):
    bad = np.atleast_1d(lam_min <= tol * np.maximum(lam_max, 0.0))
    bad |= np.atleast_1d(lam_min <= 0)
    return bad


def sym_sqrt(C, inverse=False, pd_tol=PD_TOL):
    """Symmetric square root of a positive definite matrix (or stack).

    With ``inverse=True`` returns ``(S, S^{-1})``.  Raises
    :class:`NotPositiveDefinite` when the smallest eigenvalue is at most
    ``pd_tol`` times the largest; no clamping is done.
    """
    C = symmetrize(np.asarray(C, dtype=float))
    lam, Q = np.linalg.eigh(C)
    bad = _first_bad(lam[..., 0], lam[..., -1], pd_tol)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        index = i if C.ndim > 2 else None
        raise NotPositiveDefinite(np.atleast_1d(lam[..., 0])[i], index)
    r = np.sqrt(lam)
    S = symmetrize((Q * r[..., None, :]) @ np.swapaxes(Q, -1, -2))
    if not inverse:
        return S
    Sinv = symmetrize((Q / r[..., None, :]) @ np.swapaxes(Q, -1, -2))
    return S, Sinv


def default_rank_tol(m):
    return m * EPS


def pinv(V, rank_tol=None):
    """Moore-Penrose inverse of a symmetric PSD matrix via eigendecomposition.

    Eigenvalues below ``rank_tol * lambda_max`` are treated as zero; the
    default ``rank_tol`` is ``m * eps`` for an m x m input.
    """
    V = symmetrize(np.asarray(V, dtype=float))
    m = V.shape[-1]
    if rank_tol is None:
        rank_tol = default_rank_tol(m)
    lam, Q = np.linalg.eigh(V)
    lam_max = np.max(np.abs(lam), axis=-1, keepdims=True)
    keep = lam > rank_tol * lam_max
    inv = np.where(keep, 1.0 / np.where(keep, lam, 1.0), 0.0)
    return symmetrize((Q * inv[..., None, :]) @ np.swapaxes(Q, -1, -2))


def is_psd(V, tol=1e-8):
    lam = np.linalg.eigvalsh(symmetrize(np.asarray(V, dtype=float)))
    scale = np.maximum(np.max(np.abs(lam), axis=-1), 1e-300)
    return bool(np.all(lam[..., 0] >= -tol * scale))


def cond(G):
    s = np.linalg.svd(G, compute_uv=False)
    return np.inf if s[-1] == 0 else s[0] / s[-1]


def pairwise_sum(x, axis=0):
    """Sum with a fixed pairwise tree order along ``axis``.

    The reduction order depends only on the length of the axis, so results
    are reproducible no matter how the terms were produced.
    """
    x = np.moveaxis(np.asarray(x, dtype=float), axis, 0)
    while x.shape[0] > 1:
        if x.shape[0] % 2:
            x = np.concatenate([x, np.zeros((1,) + x.shape[1:])])
        x = x[0::2] + x[1::2]
    return x[0] if x.shape[0] else np.zeros(x.shape[1:])


def exact_sum(x, axis=0):
    """Correctly rounded sum along ``axis`` (math.fsum per entry).

    The result does not depend on the order of the terms at all, which makes
    leave-one-out quantities bit-identical under permutations of the data.
    """
    x = np.moveaxis(np.asarray(x, dtype=float), axis, 0)
    flat = x.reshape(x.shape[0], -1)
    out = np.array([math.fsum(flat[:, j]) for j in range(flat.shape[1])])
    return out.reshape(x.shape[1:])
