"""Training/test errors and model-assessment criteria for WLS fits.

Notation: for observation i, X_i stacks the vectorised design matrices, W_i
is the weight and V_i = Cov[vec(Y_i Y_i^T) | X_i].  With

    G_i = X_i^T W_i X_i,    H_i = X_i^T W_i V_i W_i X_i,    G = sum G_i, H = sum H_i

the statistics are

    U      = (2/n) tr(G^-1 H)
    Vtilde = (1/n) sum_i tr(G_(-i)^-1 H_(-i) G_(-i)^-1 G_i)
    Cp     = Tr + U,      RCp = Tr + U/2 + Vtilde

Leave-one-out sums G_(-i), H_(-i) are formed from correctly rounded totals,
so every per-fold term is a function of the data set, not of its ordering.
"""

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import numkit
from .condvar import (
    DenseOp,
    ErrorMoments,
    FourthMomentOp,
    IdentityOp,
    WeightOp,
    cond_cov_op,
    estimate_mu4,
    weight_operator,
    weight_tag,
)
from .errors import CovregError, FoldFailed, SingularGram
from .estimate import FitOptions, estimated_v, fit_ols, fit_wls, solve_linear
from .inference import residuals

COND_LIMIT = 1e12


@dataclass
class AssessmentReport:
    train_error: float
    U: float
    cp: float
    vtilde_errR: float
    rcp: float
    ocv: Optional[float] = None
    weight: str = "identity"
    v_source: str = "known"

    def to_dict(self):
        return asdict(self)


def _as_op(W, family=None, X=None):
    if isinstance(W, WeightOp):
        return W
    if isinstance(W, np.ndarray):
        return DenseOp(W)
    return weight_operator(W, family, X)


def _require_linear(family, what):
    if not family.is_linear:
        raise CovregError(f"{what} requires linear family")


def _loss_terms(family, beta_hat, data, op):
    R = data.yy() - data.cov(beta_hat)
    return op.quad(R, R)


def train_error(family, beta_hat, data, weight):
    op = _as_op(weight, family, data.X)
    return float(numkit.pairwise_sum(_loss_terms(family, beta_hat, data, op)) / data.n)


def test_error(family, beta_hat, test_data, weight):
    """Average weighted loss on held-out pairs; ``weight`` is evaluated on the test design."""
    return train_error(family, beta_hat, test_data, weight)


# --------------------------------------------------------------------------
# conditional expectation of the test loss (simulation use)


def trace_wv(W, V):
    """Per-observation tr(W_i V_i)."""
    if isinstance(W, FourthMomentOp) and isinstance(V, FourthMomentOp):
        if W.inverse and not V.inverse and np.array_equal(W.mu4, V.mu4):
            prod = W.R @ V.R
            if np.allclose(prod, np.eye(W.p), atol=1e-8):
                # W = V^+ : trace of the projector onto symmetric matrices
                return np.full(W.n, W.p * (W.p + 1) / 2.0)
    if isinstance(W, IdentityOp) and isinstance(V, FourthMomentOp) and not V.inverse:
        C = V.R @ V.R
        d = np.diagonal(C, axis1=-2, axis2=-1)
        tr = np.trace(C, axis1=-2, axis2=-1)
        return tr**2 + np.sum(C * C, axis=(-2, -1)) + np.sum((V.mu4 - 3.0) * d**2, axis=-1)
    p = V.p
    basis = numkit.mat(np.eye(p * p), p)
    step = max(1, 4096 // (p * p))
    out = np.zeros(V.n)
    for lo in range(0, p * p, step):
        chunk = basis[lo : lo + step]
        E = np.broadcast_to(chunk, (V.n,) + chunk.shape)
        out += np.sum(E * W.apply(V.apply(E)), axis=(-3, -2, -1))
    return out


def expected_test_error(C_hat, C_true, W, V):
    """E[loss | X] averaged over observations: tr(W V) + (c - c_hat)^T W (c - c_hat)."""
    D = C_true - C_hat
    return float(numkit.pairwise_sum(trace_wv(W, V) + W.quad(D, D)) / D.shape[0])


# --------------------------------------------------------------------------
# U statistic and the Random-X variance correction


def per_obs_grams(X, W, V):
    """(G_i, H_i) stacks of shape (n, K, K) for a linear design X (n, K, p, p)."""
    WX = W.apply(X)
    G = np.einsum("nkab,nlab->nkl", X, WX)
    H = np.einsum("nkab,nlab->nkl", WX, V.apply(WX))
    return numkit.symmetrize(G), numkit.symmetrize(H)


def _gram_inv(G, fold=None):
    c = numkit.cond(G)
    if c > COND_LIMIT:
        raise SingularGram(c, fold)
    return np.linalg.inv(G)


def u_from_grams(Gi, Hi):
    n = Gi.shape[0]
    G, H = numkit.pairwise_sum(Gi), numkit.pairwise_sum(Hi)
    return float(2.0 / n * np.trace(_gram_inv(G) @ H))


def vtilde_from_grams(Gi, Hi):
    n = Gi.shape[0]
    G, H = numkit.exact_sum(Gi), numkit.exact_sum(Hi)
    terms = np.empty(n)
    for i in range(n):
        Ginv = _gram_inv(G - Gi[i], fold=i)
        terms[i] = np.trace(Ginv @ (H - Hi[i]) @ Ginv @ Gi[i])
    return float(numkit.pairwise_sum(terms) / n)


def u_stat(X, W, V):
    Gi, Hi = per_obs_grams(np.asarray(X, dtype=float), _as_op(W), _as_op(V))
    return u_from_grams(Gi, Hi)


def vtilde_errR(X, W, V):
    X = np.asarray(X, dtype=float)
    if X.shape[0] < X.shape[1] + 1:
        raise CovregError("vtilde_errR needs n >= K + 1")
    Gi, Hi = per_obs_grams(X, _as_op(W), _as_op(V))
    return vtilde_from_grams(Gi, Hi)


def cp(train, U):
    return train + U


def rcp(train, U, vtilde):
    return train + U / 2.0 + vtilde


# --------------------------------------------------------------------------
# leave-one-out cross-validation


def ocv(family, data, weight, opts=None, refit_weight=False):
    """Leave-one-out CV error of the WLS fit.

    The weight is evaluated once on the full design and held fixed across
    folds unless ``refit_weight`` is set, in which case an estimated-V weight
    is rebuilt from each fold's own pilot OLS fit.
    """
    opts = opts or FitOptions()
    n = data.n
    if n < family.K + 1:
        raise CovregError("ocv needs n >= K + 1")
    if refit_weight and getattr(weight, "tag", None) == "estimated_v":
        return _ocv_generic(family, data, weight, opts, refit_weight=True)
    op = _as_op(weight, family, data.X)
    if not family.is_linear:
        return _ocv_generic(family, data, op, opts)

    YY = data.yy()
    WX = op.apply(data.X)
    Gi = numkit.symmetrize(np.einsum("nkab,nlab->nkl", data.X, WX))
    bi = np.einsum("nkab,nab->nk", WX, YY)
    G, b = numkit.exact_sum(Gi), numkit.exact_sum(bi)
    # the full-data barrier path point is strictly feasible for every fold
    info = {}
    solve_linear(family, data.X, G, b, opts, info=info)
    losses = np.empty(n)
    idx = np.arange(n)
    for i in range(n):
        try:
            beta, _, _ = solve_linear(
                family, data.X[idx != i], G - Gi[i], b - bi[i], opts, warm=info.get("warm")
            )
        except CovregError as exc:
            raise FoldFailed(i, exc) from exc
        R = YY[i] - family.eval(beta, data.X[i])
        losses[i] = np.sum(R * op.take([i]).apply(R[None])[0])
    return float(numkit.pairwise_sum(losses) / n)


def _ocv_generic(family, data, weight, opts, refit_weight=False):
    n = data.n
    losses = np.empty(n)
    idx = np.arange(n)
    for i in range(n):
        keep = idx != i
        sub = data.subset(keep)
        try:
            if refit_weight:
                spec, _ = estimated_v(family, sub, opts)
                fit = fit_wls(family, sub, spec, opts)
                op_i = weight_operator(spec, family, data.X[i : i + 1])
            else:
                fit = fit_wls(family, sub, weight.take(keep), opts)
                op_i = weight.take([i])
        except CovregError as exc:
            raise FoldFailed(i, exc) from exc
        R = data.yy()[i : i + 1] - family.eval(fit.beta_hat, data.X[i : i + 1])
        losses[i] = float(op_i.quad(R, R)[0])
    return float(numkit.pairwise_sum(losses) / n)


# --------------------------------------------------------------------------
# one-call driver


def v_operator(family, data, v_source, moments=None, beta0=None, cov=None, opts=None):
    """Operator for V(X_i): the truth (``known``) or the OLS plug-in (``estimated``)."""
    if v_source == "known":
        if moments is None:
            raise CovregError("known V needs the true error moments")
        if cov is None:
            if beta0 is None:
                raise CovregError("known V needs beta0 or the true covariances")
            cov = family.eval(beta0, data.X)
        return cond_cov_op(cov, moments)
    if v_source == "estimated":
        pilot = fit_ols(family, data, opts)
        mu4 = estimate_mu4(residuals(family, pilot.beta_hat, data))
        return cond_cov_op(data.cov(pilot.beta_hat), mu4)
    raise ValueError(f"unknown V source {v_source!r}")


def assess(
    family,
    data,
    beta_hat,
    weight,
    v_source="known",
    moments: Optional[ErrorMoments] = None,
    beta0=None,
    cov=None,
    with_ocv=True,
    opts=None,
    V=None,
):
    """Training error, U, Cp, Vtilde, RCp and (optionally) OCV in one report."""
    _require_linear(family, "cp/rcp")
    W = _as_op(weight, family, data.X)
    if V is None:
        V = v_operator(family, data, v_source, moments, beta0, cov, opts)
    tr = train_error(family, beta_hat, data, W)
    Gi, Hi = per_obs_grams(data.X, W, V)
    U = u_from_grams(Gi, Hi)
    vt = vtilde_from_grams(Gi, Hi)
    c, r = cp(tr, U), rcp(tr, U, vt)
    assert np.isclose(r - c, vt - U / 2.0, rtol=1e-9, atol=1e-12 * max(1.0, abs(c)))
    o = ocv(family, data, W, opts) if with_ocv else None
    return AssessmentReport(tr, U, c, vt, r, o, weight_tag(weight), v_source)
