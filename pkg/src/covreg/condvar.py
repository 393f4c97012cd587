"""Conditional covariance of vec(Y Y^T) and weight matrices for WLS.

For ``Y = S e`` with ``S`` the symmetric root of ``C`` and ``e`` made of
independent standardised coordinates with fourth moments ``mu4``::

    V = (S kron S) (I + K_pp + sum_j (mu4_j - 3) E_jj kron E_jj) (S kron S)

:func:`cond_cov_vecyy` builds this p^2 x p^2 matrix densely.  Estimation code
works with the operators below instead, which apply V or its Moore-Penrose
inverse to p x p matrices without forming anything of size p^2.  The
pseudo-inverse has the closed form::

    V^+ = (S^-1 kron S^-1) M^+ (S^-1 kron S^-1),
    M^+ vec(B) = vec((B + B^T) / 4 + diag(c_j B_jj)),  c_j = 1/(mu4_j - 1) - 1/2

because S kron S commutes with the projector onto symmetric matrices.  That
argument needs every mu4_j > 1; at mu4_j == 1 the dense pseudo-inverse is used.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import numkit
from .errors import CovregError, DimensionMismatch, NonPsdCustomWeight

MU4_FLOOR_TOL = 1e-12


@dataclass(frozen=True)
class ErrorMoments:
    mu4: object  # float, or length-p array of per-coordinate fourth moments

    def __post_init__(self):
        m = np.asarray(self.mu4, dtype=float)
        if m.ndim > 1 or not np.all(np.isfinite(m)):
            raise DimensionMismatch("mu4 must be a finite scalar or vector")
        if np.any(m < 1.0 - 1e-12):
            raise CovregError(f"mu4 must be >= 1, got {self.mu4}")

    @property
    def array(self):
        return np.asarray(self.mu4, dtype=float)


NORMAL = ErrorMoments(3.0)


def _moments(m):
    return m if isinstance(m, ErrorMoments) else ErrorMoments(m)


def cond_cov_vecyy(C, moments):
    """Dense Cov[vec(Y Y^T) | X] for a single covariance or a stack."""
    moments = _moments(moments)
    C = np.asarray(C, dtype=float)
    p = C.shape[-1]
    S = numkit.sym_sqrt(C)
    T = np.einsum("...ab,...cd->...cadb", S, S).reshape(C.shape[:-2] + (p * p, p * p))
    mid = np.eye(p * p) + numkit.commutation(p)
    diag_idx = np.arange(p) * (p + 1)
    mid[diag_idx, diag_idx] += np.broadcast_to(moments.array - 3.0, (p,))
    return numkit.symmetrize(T @ mid @ T)


def estimate_mu4(residuals):
    """Pooled fourth moment of standardised residuals, floored at 1."""
    r = np.asarray(residuals, dtype=float)
    if r.size == 0:
        raise CovregError("cannot estimate mu4 from an empty residual matrix")
    return ErrorMoments(max(1.0, float(np.mean(r**4))))


# --------------------------------------------------------------------------
# operators acting on stacks of p x p matrices, one per observation


def _bcast(S, A):
    """Reshape per-observation matrices S (n, p, p) to broadcast against A (n, ..., p, p)."""
    return S.reshape(S.shape[:1] + (1,) * (A.ndim - 3) + S.shape[1:])


class WeightOp:
    """Per-observation p^2 x p^2 matrices applied as maps on p x p matrices."""

    n: int
    p: int

    def apply(self, A):
        raise NotImplementedError

    def quad(self, A, B):
        """vec(A_i)^T W_i vec(B_i), summed over the last two axes."""
        return np.sum(A * self.apply(B), axis=(-2, -1))

    def dense(self):
        m = self.p * self.p
        E = numkit.mat(np.eye(m), self.p)  # (m, p, p) basis
        out = self.apply(np.broadcast_to(E, (self.n, m, self.p, self.p)).copy())
        return numkit.symmetrize(np.swapaxes(numkit.vec(out), -1, -2))

    def take(self, idx):
        raise NotImplementedError


class IdentityOp(WeightOp):
    tag = "identity"

    def __init__(self, n, p):
        self.n, self.p = n, p

    def apply(self, A):
        return np.asarray(A, dtype=float)

    def take(self, idx):
        return IdentityOp(len(np.arange(self.n)[idx]), self.p)


class DenseOp(WeightOp):
    tag = "custom"

    def __init__(self, W):
        W = np.asarray(W, dtype=float)
        self.n, m = W.shape[0], W.shape[-1]
        self.p = int(round(np.sqrt(m)))
        self.W = W

    def apply(self, A):
        A = np.asarray(A, dtype=float)
        Wb = self.W.reshape(self.W.shape[:1] + (1,) * (A.ndim - 3) + self.W.shape[1:])
        v = np.einsum("...ij,...j->...i", Wb, numkit.vec(A))
        return numkit.mat(v, self.p)

    def take(self, idx):
        return DenseOp(self.W[idx])


class FourthMomentOp(WeightOp):
    """V(C) (``inverse=False``) or its pseudo-inverse (``inverse=True``).

    ``R`` is the symmetric root of C for V, and the inverse root for V^+.
    """

    def __init__(self, R, mu4, inverse):
        R = np.asarray(R, dtype=float)
        self.R = R
        self.n, self.p = R.shape[0], R.shape[-1]
        self.mu4 = np.broadcast_to(np.asarray(mu4, dtype=float), (self.p,)).copy()
        self.inverse = inverse
        if inverse:
            d = self.mu4 - 1.0
            safe = d > MU4_FLOOR_TOL
            self.diag_coef = np.where(safe, 1.0 / np.where(safe, d, 1.0), 0.0) - 0.5
        else:
            self.diag_coef = self.mu4 - 3.0
        self.tag = "v_pinv" if inverse else "v"

    def apply(self, A):
        A = np.asarray(A, dtype=float)
        R = _bcast(self.R, A)
        B = R @ A @ R
        Bt = np.swapaxes(B, -1, -2)
        db = np.diagonal(B, axis1=-2, axis2=-1) * self.diag_coef
        mid = (B + Bt) / 4.0 if self.inverse else B + Bt
        mid = mid + db[..., :, None] * np.eye(self.p)
        return R @ mid @ R

    def take(self, idx):
        return FourthMomentOp(self.R[idx], self.mu4, self.inverse)


def cond_cov_op(C, moments):
    """Operator form of :func:`cond_cov_vecyy` for a stack of covariances."""
    S = numkit.sym_sqrt(np.asarray(C, dtype=float))
    return FourthMomentOp(S, _moments(moments).array, inverse=False)


def cond_cov_pinv_op(C, moments):
    moments = _moments(moments)
    C = np.asarray(C, dtype=float)
    if np.min(moments.array) - 1.0 <= 1e-8:
        # mu4 == 1 drops rank inside the symmetric subspace; the closed form no longer holds
        return DenseOp(numkit.pinv(cond_cov_vecyy(C, moments)))
    _, Sinv = numkit.sym_sqrt(C, inverse=True)
    return FourthMomentOp(Sinv, moments.array, inverse=True)


# --------------------------------------------------------------------------
# weight specifications


@dataclass(frozen=True)
class IdentityWeight:
    tag = "identity"


@dataclass(frozen=True)
class KnownV:
    """W = V^- at the true parameter (or true covariances, when ``cov`` is given)."""

    moments: ErrorMoments
    beta0: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None
    tag = "known_v"

    def covariances(self, family, X, beta=None):
        if self.cov is not None:
            return self.cov
        b = self.beta0 if beta is None else beta
        if b is None:
            raise CovregError("KnownV weight needs beta0 or explicit covariances")
        return family.eval(b, X)


@dataclass(frozen=True)
class EstimatedV:
    """W = Vhat^- from a pilot fit (beta_hat) and pooled kurtosis estimate."""

    beta_hat: np.ndarray
    moments: ErrorMoments
    tag = "estimated_v"

    def covariances(self, family, X, beta=None):
        return family.eval(self.beta_hat if beta is None else beta, X)


@dataclass(frozen=True)
class CustomWeight:
    provider: Callable  # X -> array (n, p^2, p^2)
    tag = "custom"


def _custom_dense(spec, X):
    W = np.asarray(spec.provider(X), dtype=float)
    if W.ndim != 3 or W.shape[1] != W.shape[2]:
        raise NonPsdCustomWeight(f"custom weight must have shape (n, m, m), got {W.shape}")
    if not numkit.is_psd(W):
        raise NonPsdCustomWeight("custom weight matrix is not positive semidefinite")
    return numkit.symmetrize(W)


def weight_operator(spec, family, X, beta_for_V=None):
    """Operator for the weight matrices W(X_i) described by ``spec``."""
    X = np.asarray(X, dtype=float)
    n, p = X.shape[0], family.p
    if isinstance(spec, WeightOp):
        return spec
    if isinstance(spec, IdentityWeight):
        return IdentityOp(n, p)
    if isinstance(spec, (KnownV, EstimatedV)):
        return cond_cov_pinv_op(spec.covariances(family, X, beta_for_V), spec.moments)
    if isinstance(spec, CustomWeight):
        return DenseOp(_custom_dense(spec, X))
    raise TypeError(f"unknown weight specification {spec!r}")


def build_weight(spec, family, X, beta_for_V=None, rank_tol=None):
    """Dense weight matrices (n, p^2, p^2), computed by explicit pseudo-inversion."""
    X = np.asarray(X, dtype=float)
    n, p = X.shape[0], family.p
    if isinstance(spec, IdentityWeight):
        return np.broadcast_to(np.eye(p * p), (n, p * p, p * p)).copy()
    if isinstance(spec, (KnownV, EstimatedV)):
        V = cond_cov_vecyy(spec.covariances(family, X, beta_for_V), spec.moments)
        return numkit.pinv(V, rank_tol)
    if isinstance(spec, CustomWeight):
        return _custom_dense(spec, X)
    raise TypeError(f"unknown weight specification {spec!r}")


def weight_tag(spec):
    return getattr(spec, "tag", type(spec).__name__)
