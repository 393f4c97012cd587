"""Residuals, sandwich variance estimators, Wald intervals and covariance error norms.

Both estimators are asymptotically linear in quadratic forms of the
standardised errors, score_k = e^T A_k e, so

    V = 2/(np) sum_i tr(A_ik A_il),
    Omega = 1/(np) sum_i sum_j A_ik[j, j] (e_ij^4 - 3) A_il[j, j],

with A_Q = 1/2 S^-1 dC_k S^-1 for the QMLE and A_W = S sym(W dC_k) S for WLS,
where S is the symmetric root of the fitted covariance.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import norm

from . import numkit
from .condvar import IdentityWeight, WeightOp, weight_operator, weight_tag
from .errors import SingularVhat

COND_LIMIT = 1e12


@dataclass
class AvarEstimate:
    V_hat: np.ndarray
    Omega_hat: np.ndarray
    avar: np.ndarray
    estimator: str
    M_hat: Optional[np.ndarray] = None

    def se(self, n, p):
        return np.sqrt(np.maximum(np.diag(self.avar), 0.0) / (n * p))


def residuals(family, beta_hat, data):
    """Standardised residuals C^{-1/2}(X_i) Y_i, one row per observation."""
    _, Sinv = numkit.sym_sqrt(data.cov(beta_hat), inverse=True)
    return np.einsum("nab,nb->na", Sinv, data.Y)


def _inv_checked(A, which):
    c = numkit.cond(A)
    if c > COND_LIMIT:
        raise SingularVhat(c, which)
    return numkit.symmetrize(np.linalg.inv(A))


def _trace_parts(A, eps, npq):
    """V and Omega from the per-observation quadratic-form matrices A (n, K, p, p)."""
    V = 2.0 / npq * numkit.pairwise_sum(np.einsum("nkab,nlba->nkl", A, A))
    d = np.diagonal(A, axis1=-2, axis2=-1)  # (n, K, p)
    ups = eps**4 - 3.0
    Om = numkit.pairwise_sum(np.einsum("nkj,nj,nlj->nkl", d, ups, d)) / npq
    return numkit.symmetrize(V), numkit.symmetrize(Om)


def avar_qmle(family, beta_hat, data):
    S, Sinv = numkit.sym_sqrt(data.cov(beta_hat), inverse=True)
    eps = np.einsum("nab,nb->na", Sinv, data.Y)
    R = Sinv[:, None]
    A = 0.5 * R @ data.dcov(beta_hat) @ R
    V, Om = _trace_parts(A, eps, data.n * data.p)
    Vi = _inv_checked(V, "V_hat")
    avar = numkit.symmetrize(Vi + Vi @ Om @ Vi)
    return AvarEstimate(V, Om, avar, "QMLE")


def avar_wls(family, beta_hat, data, weight=None, estimator="WLS"):
    weight = IdentityWeight() if weight is None else weight
    op = weight if isinstance(weight, WeightOp) else weight_operator(weight, family, data.X)
    S, Sinv = numkit.sym_sqrt(data.cov(beta_hat), inverse=True)
    eps = np.einsum("nab,nb->na", Sinv, data.Y)
    dC = data.dcov(beta_hat)
    WdC = op.apply(dC)
    npq = data.n * data.p
    M = numkit.symmetrize(numkit.pairwise_sum(np.einsum("nkab,nlab->nkl", dC, WdC)) / npq)
    R = S[:, None]
    A = R @ numkit.symmetrize(WdC) @ R
    V, Om = _trace_parts(A, eps, npq)
    Mi = _inv_checked(M, "M_hat")
    avar = numkit.symmetrize(Mi @ (V + Om) @ Mi)
    return AvarEstimate(V, Om, avar, estimator, M_hat=M)


def avar_for(fit, family, data):
    """Sandwich estimate matching the estimator that produced ``fit``."""
    if fit.estimator == "QMLE":
        return avar_qmle(family, fit.beta_hat, data)
    return avar_wls(family, fit.beta_hat, data, fit.weight, fit.estimator)


def confint(fit, avar, level, n, p):
    """Wald intervals, shape (K, 2)."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    z = norm.ppf(0.5 * (1.0 + level))
    beta = np.asarray(fit.beta_hat if hasattr(fit, "beta_hat") else fit, dtype=float)
    avar = avar.avar if isinstance(avar, AvarEstimate) else np.asarray(avar)
    half = z * np.sqrt(np.maximum(np.diag(avar), 0.0) / (n * p))
    return np.column_stack([beta - half, beta + half])


def cov_errors(family, beta_hat, beta0, X):
    """(S-Error, F-Error): max spectral and p^-1/2 max Frobenius covariance errors."""
    D = family.eval(beta_hat, X) - family.eval(beta0, X)
    if D.ndim == 2:
        D = D[None]
    p = D.shape[-1]
    spec = np.max(np.abs(np.linalg.eigvalsh(numkit.symmetrize(D))), axis=-1)
    frob = np.sqrt(np.sum(D**2, axis=(-2, -1)))
    s_err = float(np.max(spec))
    f_err = float(np.max(frob)) / np.sqrt(p)
    assert f_err <= np.sqrt(p) * s_err * (1 + 1e-10) + 1e-300
    return s_err, f_err


def summarize_residuals(eps):
    eps = np.asarray(eps)
    return {
        "mean": float(np.mean(eps)),
        "variance": float(np.var(eps)),
        "mu4": float(np.mean(eps**4)),
        "max_abs": float(np.max(np.abs(eps))),
    }


__all__ = [
    "AvarEstimate",
    "avar_for",
    "avar_qmle",
    "avar_wls",
    "confint",
    "cov_errors",
    "residuals",
    "summarize_residuals",
    "weight_tag",
]
