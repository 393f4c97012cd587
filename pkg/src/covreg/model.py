"""Parametric covariance families C_beta(X) and the dataset container.

Designs are stored batched over observations:

* linear family: ``X`` has shape ``(n, K, p, p)``, one symmetric matrix per
  parameter, and ``C = sum_k beta_k X[k]``;
* network autoregressive family: ``X`` has shape ``(n, p, p)`` (symmetric,
  row-normalised, zero diagonal) and ``C = s2 * (I - b X)^{-2}`` with
  ``beta = (b, s2)``.

A single observation may be passed without the leading ``n`` axis.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, SingularResolvent

SYM_TOL = 1e-12


def _check_symmetric(X, what):
    asym = np.max(np.abs(X - np.swapaxes(X, -1, -2)), initial=0.0)
    scale = max(1.0, np.max(np.abs(X), initial=0.0))
    if asym > SYM_TOL * scale:
        raise DimensionMismatch(f"{what} is not symmetric (max asymmetry {asym:.2e})")


@dataclass(frozen=True)
class LinearFamily:
    K: int
    p: int
    names: tuple = ()
    kind = "linear"
    is_linear = True

    def bounds(self):
        return None

    def check_design(self, X):
        X = np.asarray(X, dtype=float)
        if X.shape[-3:] != (self.K, self.p, self.p) or X.ndim not in (3, 4):
            raise DimensionMismatch(
                f"linear design must have shape (n, {self.K}, {self.p}, {self.p}), got {X.shape}"
            )
        if not np.all(np.isfinite(X)):
            raise DimensionMismatch("design contains non-finite entries")
        _check_symmetric(X, "design matrix")
        return X

    def _beta(self, beta):
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (self.K,):
            raise DimensionMismatch(f"beta must have length {self.K}, got shape {beta.shape}")
        return beta

    def eval(self, beta, X):
        return np.einsum("k,...kab->...ab", self._beta(beta), X)

    def grad(self, beta, X, k=None):
        self._beta(beta)
        X = np.asarray(X, dtype=float)
        return X if k is None else X[..., k, :, :]

    def intercept_index(self, X):
        """Index of a design component equal to the identity in every observation."""
        eye = np.eye(self.p)
        for k in range(self.K):
            if np.array_equal(X[..., k, :, :], np.broadcast_to(eye, X[..., k, :, :].shape)):
                return k
        return None

    def select(self, cols):
        """Sub-family using the design components listed in ``cols``."""
        cols = tuple(int(c) for c in cols)
        names = tuple(self.names[c] for c in cols) if self.names else ()
        return LinearFamily(len(cols), self.p, names)


@dataclass(frozen=True)
class NetworkARFamily:
    p: int
    max_abs_rho: float = 0.99
    min_sigma2: float = 1e-8
    K = 2
    kind = "network_ar"
    is_linear = False
    names = ("rho", "sigma2")

    def bounds(self):
        return (np.array([-self.max_abs_rho, self.min_sigma2]),
                np.array([self.max_abs_rho, np.inf]))

    def check_design(self, X):
        X = np.asarray(X, dtype=float)
        if X.shape[-2:] != (self.p, self.p) or X.ndim not in (2, 3):
            raise DimensionMismatch(
                f"network design must have shape (n, {self.p}, {self.p}), got {X.shape}"
            )
        _check_symmetric(X, "adjacency matrix")
        if np.any(np.diagonal(X, axis1=-2, axis2=-1) != 0):
            raise DimensionMismatch("adjacency matrix must have a zero diagonal")
        rows = X.sum(axis=-1)
        ok = np.isclose(rows, 1.0, atol=1e-9) | np.all(X == 0, axis=-1)
        if not np.all(ok):
            raise DimensionMismatch("adjacency rows must sum to 1 or be all zero")
        return X

    def _parts(self, beta, X):
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (2,):
            raise DimensionMismatch(f"beta must have length 2, got shape {beta.shape}")
        rho, s2 = beta
        if not s2 > 0:
            raise DimensionMismatch("sigma2 must be positive")
        lam, Q = np.linalg.eigh(np.asarray(X, dtype=float))
        d = 1.0 - rho * lam
        if np.any(np.abs(d) < 1e-12) or np.any(d <= 0):
            bad = np.flatnonzero(np.atleast_2d(d).min(axis=-1) <= 1e-12)
            raise SingularResolvent(int(bad[0]) if bad.size else None)
        return rho, s2, lam, Q, d

    @staticmethod
    def _compose(Q, w):
        return (Q * w[..., None, :]) @ np.swapaxes(Q, -1, -2)

    def eval(self, beta, X):
        if np.asarray(beta, dtype=float)[0] == 0.0:
            # resolvent is the identity; keep the result exact
            X = np.asarray(X, dtype=float)
            return self._beta_s2(beta) * np.broadcast_to(np.eye(self.p), X.shape).copy()
        _, s2, _, Q, d = self._parts(beta, X)
        return self._compose(Q, s2 / d**2)

    def _beta_s2(self, beta):
        return self._parts(beta, np.zeros((self.p, self.p)))[1]

    def grad(self, beta, X, k=None):
        if np.asarray(beta, dtype=float)[0] == 0.0:
            X = np.asarray(X, dtype=float)
            s2 = self._beta_s2(beta)
            G = np.stack([2.0 * s2 * X, np.broadcast_to(np.eye(self.p), X.shape)], axis=-3)
            return G if k is None else G[..., k, :, :]
        _, s2, lam, Q, d = self._parts(beta, X)
        g_rho = self._compose(Q, 2.0 * s2 * lam / d**3)
        g_s2 = self._compose(Q, 1.0 / d**2)
        G = np.stack([g_rho, g_s2], axis=-3)
        return G if k is None else G[..., k, :, :]


def from_vectors(vectors, intercept=True):
    """Linear family with rank-one design components ``x_k x_k^T``.

    ``vectors`` has shape ``(n, K-1, p)`` (or ``(K-1, p)`` for a single
    observation).  With ``intercept`` the identity is prepended as the first
    component.  Returns ``(family, X)``.
    """
    v = np.asarray(vectors, dtype=float)
    if v.ndim not in (2, 3):
        raise DimensionMismatch(f"vectors must have shape (n, K-1, p), got {v.shape}")
    p = v.shape[-1]
    X = v[..., :, None] * v[..., None, :]
    if intercept:
        eye = np.broadcast_to(np.eye(p), v.shape[:-2] + (1, p, p))
        X = np.concatenate([eye, X], axis=-3)
    return LinearFamily(X.shape[-3], p), X


@dataclass(frozen=True)
class Dataset:
    """n observations (X_i, Y_i) for a given family."""

    family: object
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = self.family.check_design(self.X)
        Y = np.asarray(self.Y, dtype=float)
        lead = 1 if self.family.is_linear else 0
        if X.ndim != 3 + lead:
            raise DimensionMismatch("design must carry a leading observation axis")
        if Y.ndim != 2 or Y.shape != (X.shape[0], self.family.p):
            raise DimensionMismatch(
                f"Y must have shape ({X.shape[0]}, {self.family.p}), got {Y.shape}"
            )
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self):
        return self.Y.shape[0]

    @property
    def p(self):
        return self.Y.shape[1]

    def subset(self, idx):
        return Dataset(self.family, self.X[idx], self.Y[idx])

    def cov(self, beta):
        return self.family.eval(beta, self.X)

    def dcov(self, beta):
        return self.family.grad(beta, self.X)

    def yy(self):
        return self.Y[:, :, None] * self.Y[:, None, :]
