"""QMLE and weighted least squares estimators of the covariance parameters.

All per-observation terms are reduced with :func:`numkit.pairwise_sum` so the
objective values do not depend on how the work was scheduled.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numkit
from .condvar import (
    EstimatedV,
    IdentityWeight,
    KnownV,
    WeightOp,
    estimate_mu4,
    weight_operator,
    weight_tag,
)
from .errors import (
    ConstraintInfeasible,
    CovregError,
    NotConverged,
    NotPositiveDefinite,
    SingularNormalEquations,
    Underdetermined,
)
from .inference import residuals

LOG2PI = np.log(2.0 * np.pi)
COND_LIMIT = 1e12
ARMIJO_C = 1e-4


@dataclass
class FitOptions:
    max_iters: int = 200
    grad_tol: float = 1e-8
    delta: float = 1e-8  # positive-definiteness floor on every fitted covariance
    start: Optional[np.ndarray] = None  # None means automatic
    constrained: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (self.grad_tol > 0 and self.delta > 0):
            raise ValueError("tolerances must be positive")


@dataclass
class FitResult:
    beta_hat: np.ndarray
    estimator: str
    converged: bool
    iters: int
    objective: float
    constrained_active: bool = False
    weight: object = None
    grad_norm: float = 0.0
    pipeline: dict = field(default_factory=dict)

    @property
    def weight_used(self):
        return weight_tag(self.weight) if self.weight is not None else None


# --------------------------------------------------------------------------
# Gaussian quasi-likelihood


def _cholesky(C):
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        lam = numkit.min_eigenvalue(C)
        i = int(np.argmin(lam))
        raise NotPositiveDefinite(lam[i], i) from None


def _inverse_parts(family, beta, data):
    C = data.cov(beta)
    L = _cholesky(C)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    eye = np.broadcast_to(np.eye(data.p), C.shape)
    Cinv = numkit.symmetrize(np.linalg.solve(C, eye))
    return C, Cinv, logdet


def loglik(family, beta, data):
    L = _cholesky(data.cov(beta))
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    z = np.linalg.solve(L, data.Y[..., None])[..., 0]
    quad = np.sum(z**2, axis=-1)
    n, p = data.Y.shape
    return float(-0.5 * n * p * LOG2PI - 0.5 * numkit.pairwise_sum(logdet + quad))


def score(family, beta, data):
    _, Cinv, _ = _inverse_parts(family, beta, data)
    z = np.einsum("nab,nb->na", Cinv, data.Y)
    dC = data.dcov(beta)
    term = np.einsum("na,nkab,nb->nk", z, dC, z) - np.einsum("nab,nkba->nk", Cinv, dC)
    return 0.5 * numkit.pairwise_sum(term)


def fisher_info(family, beta, data):
    """Expected information 1/2 sum_i tr(C^-1 dC_k C^-1 dC_l)."""
    _, Cinv, _ = _inverse_parts(family, beta, data)
    P = Cinv[:, None] @ data.dcov(beta)
    return 0.5 * numkit.pairwise_sum(np.einsum("nkab,nlba->nkl", P, P))


# --------------------------------------------------------------------------
# weighted least squares pieces


def _op(weight, family, data):
    return weight if isinstance(weight, WeightOp) else weight_operator(weight, family, data.X)


def wls_objective(family, beta, data, op):
    R = data.yy() - data.cov(beta)
    return float(numkit.pairwise_sum(op.quad(R, R)) / data.n)


def wls_gradient(family, beta, data, op):
    R = data.yy() - data.cov(beta)
    dC = data.dcov(beta)
    return -2.0 / data.n * numkit.pairwise_sum(op.quad(dC, R[:, None]))


def _gauss_newton(family, beta, data, op):
    dC = data.dcov(beta)
    WdC = op.apply(dC)
    return 2.0 / data.n * numkit.pairwise_sum(np.einsum("nkab,nlab->nkl", dC, WdC))


def normal_equations(X, Yvec, op):
    """Gram sum_i X_i^T W X_i and moment sum_i X_i^T W vec(Y_i Y_i^T)."""
    WX = op.apply(X)
    G = numkit.pairwise_sum(np.einsum("nkab,nlab->nkl", X, WX))
    b = numkit.pairwise_sum(np.einsum("nkab,nab->nk", WX, Yvec))
    return numkit.symmetrize(G), b


# --------------------------------------------------------------------------
# feasibility


def min_eig(family, beta, X):
    try:
        return float(np.min(numkit.min_eigenvalue(family.eval(beta, X))))
    except CovregError:
        return -np.inf


def shifted_pd(family, beta, X, shift):
    """True when every C_beta(X_i) - shift * I is positive definite (Cholesky test)."""
    try:
        C = family.eval(beta, X)
    except CovregError:
        return False
    try:
        np.linalg.cholesky(C - shift * np.eye(C.shape[-1]))
    except np.linalg.LinAlgError:
        return False
    return True


def _in_box(family, beta):
    b = family.bounds()
    if b is None:
        return True
    lo, hi = b
    return bool(np.all(beta >= lo) and np.all(beta <= hi))


def _feasible_fn(family, X, opts):
    def feasible(beta):
        if not np.all(np.isfinite(beta)) or not _in_box(family, beta):
            return False
        if not opts.constrained:
            return True
        return shifted_pd(family, beta, X, opts.delta)

    return feasible


def _interior_start(family, X, beta, delta):
    """Shift the intercept so the start sits well inside the feasible set."""
    k = family.intercept_index(X) if family.is_linear else None
    lam = min_eig(family, beta, X)
    if k is None:
        if lam < delta:
            raise ConstraintInfeasible(
                "start is not positive definite and the design has no identity component"
            )
        return beta
    C = family.eval(beta, X)
    scale = max(1.0, float(np.median(np.trace(C, axis1=-2, axis2=-1))) / family.p)
    target = 0.05 * scale
    if lam < target:
        beta = beta.copy()
        beta[k] += target - lam
    return beta


# --------------------------------------------------------------------------
# quasi-Newton with a feasibility-aware Armijo line search


@dataclass
class _BfgsOut:
    x: np.ndarray
    fx: float
    gx: np.ndarray
    iters: int
    converged: bool
    blocked: bool


def _bfgs(f, g, x0, H0, feasible, done, max_iters):
    x = np.array(x0, dtype=float)
    fx, gx = f(x), g(x)
    H = np.array(H0, dtype=float)
    blocked = False
    for it in range(max_iters):
        if done(gx):
            return _BfgsOut(x, fx, gx, it, True, blocked)
        d = -H @ gx
        slope = gx @ d
        if not slope < 0:
            H = np.array(H0, dtype=float)
            d = -H @ gx
            slope = gx @ d
        t, blocked = 1.0, False
        while t > 1e-16 and not feasible(x + t * d):
            t *= 0.5
            blocked = True
        while t > 1e-16:
            x_new = x + t * d
            if feasible(x_new):
                try:
                    f_new = f(x_new)
                except CovregError:
                    f_new = np.inf
                if f_new <= fx + ARMIJO_C * t * slope:
                    break
            t *= 0.5
        else:
            return _BfgsOut(x, fx, gx, it, False, blocked)
        g_new = g(x_new)
        s, y = x_new - x, g_new - gx
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            I = np.eye(len(x))
            H = (I - rho * np.outer(s, y)) @ H @ (I - rho * np.outer(y, s)) + rho * np.outer(s, s)
        x, fx, gx = x_new, f_new, g_new
    return _BfgsOut(x, fx, gx, max_iters, done(gx), blocked)


def _safe_inv(A):
    try:
        Ainv = np.linalg.inv(numkit.symmetrize(A))
    except np.linalg.LinAlgError:
        return np.eye(A.shape[0])
    if not np.all(np.isfinite(Ainv)) or numkit.min_eigenvalue(Ainv) <= 0:
        return np.eye(A.shape[0]) / max(1.0, np.max(np.abs(np.diag(A))))
    return numkit.symmetrize(Ainv)


def _finish(out, family, X, opts, estimator, what):
    lam = min_eig(family, out.x, X) if family.is_linear else np.inf
    active = bool(opts.constrained and out.blocked and lam <= 2 * opts.delta)
    b = family.bounds()
    if b is not None and out.blocked:
        lo, hi = b
        near = np.isclose(out.x, lo, rtol=0, atol=1e-9) | np.isclose(out.x, hi, rtol=0, atol=1e-9)
        active = active or bool(near.any())
    if not (out.converged or active):
        raise NotConverged(out.x, what(out.gx), out.iters)
    return active


# --------------------------------------------------------------------------
# constrained linear WLS


def _barrier_linear(family, X, G, b, beta_unc, delta, warm=None):
    """Minimise beta^T G beta - 2 b^T beta subject to C_beta(X_i) >= delta I.

    Log-barrier Newton iterations followed by a bisection step from the
    barrier solution towards the unconstrained minimiser, which places the
    result on the boundary (min eigenvalue in [delta, 2 delta]).

    ``warm`` is an optional ``(beta, mu)`` central-path point of a problem
    with a superset of these constraints; it is strictly feasible here and
    lets the path-following start part-way.  Returns ``(beta, iters, warm)``
    where the last entry is a reusable checkpoint.
    """
    n, p = X.shape[0], family.p
    m = n * p
    eye = np.eye(p)

    def F(bv):
        return float(bv @ G @ bv - 2.0 * b @ bv)

    def chol(bv):
        try:
            return np.linalg.cholesky(family.eval(bv, X) - delta * eye)
        except np.linalg.LinAlgError:
            return None

    def phi(bv, mu, L=None):
        L = chol(bv) if L is None else L
        if L is None:
            return np.inf
        logdet = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum()
        return F(bv) - mu * logdet

    if warm is not None and chol(warm[0]) is not None:
        beta, mu = np.array(warm[0], dtype=float), float(warm[1])
    else:
        beta = _interior_start(family, X, beta_unc, delta)
        if chol(beta) is None:
            raise ConstraintInfeasible("could not find a strictly feasible start")
        mu = max((F(beta) - F(beta_unc)) / m, 1e-300)
    checkpoint = None
    total = 0
    stalled = False
    for _ in range(60):
        centre_tol = 1e-12 if m * mu < 1e-6 * max(1.0, abs(F(beta))) else 1e-6
        for _ in range(50):
            L = chol(beta)
            if L is None:
                break
            Li = np.linalg.inv(L)[:, None]
            # M_k = L^-1 X_k L^-T: tr(D^-1 X_k) = tr M_k, tr(D^-1 X_k D^-1 X_l) = <M_k, M_l>
            Mi = Li @ X @ np.swapaxes(Li, -1, -2)
            trM = np.trace(Mi, axis1=-2, axis2=-1).sum(axis=0)
            M = Mi.transpose(1, 0, 2, 3).reshape(family.K, -1)
            grad = 2.0 * (G @ beta - b) - mu * trM
            hess = 2.0 * G + mu * (M @ M.T)
            try:
                step = -np.linalg.solve(numkit.symmetrize(hess), grad)
            except np.linalg.LinAlgError:
                stalled = True  # barrier term swamps G: as close as arithmetic allows
                break
            dec = -grad @ step
            total += 1
            if dec / 2.0 < centre_tol * max(1.0, abs(F(beta))):
                break
            t, f0 = 1.0, phi(beta, mu, L)
            while phi(beta + t * step, mu) > f0 - 0.25 * t * dec:
                t *= 0.5
                if t < 1e-14:
                    break
            else:
                beta = beta + t * step
                continue
            break  # no feasible descent: stay put (numerically centred)
        if checkpoint is None and m * mu < 1e-3 * max(1.0, abs(F(beta))):
            checkpoint = (beta.copy(), mu)
        if stalled or m * mu < 1e-11 * max(1.0, abs(F(beta))):
            break
        mu /= 10.0

    # min eigenvalue is concave along the segment, so bisection finds the crossing
    def point(t):
        return beta + t * (beta_unc - beta)

    lo, hi = 0.0, 1.0
    if shifted_pd(family, beta, X, 2 * delta):
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if shifted_pd(family, point(mid), X, 2 * delta):
                lo = mid
            elif shifted_pd(family, point(mid), X, delta):
                lo = mid
                break
            else:
                hi = mid
    return point(lo), total, checkpoint


def solve_linear(family, X, G, b, opts, warm=None, info=None):
    """Minimiser of beta^T G beta - 2 b^T beta, constrained when ``opts.constrained``.

    Returns ``(beta, constrained_active, iterations)``.  When ``info`` is a
    dict, a barrier checkpoint usable as ``warm`` for sub-problems is stored
    under ``"warm"``.
    """
    c = numkit.cond(G)
    if c > COND_LIMIT:
        raise SingularNormalEquations(c)
    beta = np.linalg.solve(G, b)
    if opts.constrained and not shifted_pd(family, beta, X, opts.delta):
        beta, iters, checkpoint = _barrier_linear(family, X, G, b, beta, opts.delta, warm)
        if info is not None:
            info["warm"] = checkpoint
        return beta, True, iters
    return beta, False, 0


def _closed_form(family, data, op, opts):
    G, b = normal_equations(data.X, data.yy(), op)
    return solve_linear(family, data.X, G, b, opts)


def _check_size(family, data):
    if data.n * data.p < family.K:
        raise Underdetermined(f"n*p = {data.n * data.p} < K = {family.K}")


def fit_wls(family, data, weight=None, opts=None, method="auto", estimator="WLS"):
    """Minimise the weighted total error over beta.

    Linear families use the closed-form solution unless ``method="numeric"``;
    other families run BFGS on the objective.
    """
    opts = opts or FitOptions()
    weight = IdentityWeight() if weight is None else weight
    _check_size(family, data)
    op = _op(weight, family, data)

    if family.is_linear and method != "numeric":
        beta, active, iters = _closed_form(family, data, op, opts)
        return FitResult(
            beta_hat=beta,
            estimator=estimator,
            converged=True,
            iters=iters,
            objective=wls_objective(family, beta, data, op),
            constrained_active=active,
            weight=weight,
            grad_norm=float(np.max(np.abs(wls_gradient(family, beta, data, op)))),
        )

    start = opts.start
    if start is None:
        start = _auto_start(family, data, opts)
    start = np.asarray(start, dtype=float)
    feasible = _feasible_fn(family, data.X, opts)
    if not feasible(start):
        raise ConstraintInfeasible("starting value is outside the parameter space")

    def done(gv):
        return np.max(np.abs(gv)) < opts.grad_tol

    out = _bfgs(
        lambda b: wls_objective(family, b, data, op),
        lambda b: wls_gradient(family, b, data, op),
        start,
        _safe_inv(_gauss_newton(family, start, data, op)),
        feasible,
        done,
        opts.max_iters,
    )
    active = _finish(out, family, data.X, opts, estimator, lambda gv: np.max(np.abs(gv)))
    return FitResult(
        beta_hat=out.x,
        estimator=estimator,
        converged=out.converged,
        iters=out.iters,
        objective=out.fx,
        constrained_active=active,
        weight=weight,
        grad_norm=float(np.max(np.abs(out.gx))),
    )


def _network_grid_start(family, data):
    best, best_ll = None, -np.inf
    eye = np.eye(data.p)
    for rho in np.round(np.arange(-0.9, 0.9 + 1e-9, 0.1), 10):
        E = np.einsum("nab,nb->na", eye - rho * data.X, data.Y)
        s2 = max(float(np.sum(E**2)) / (data.n * data.p), family.min_sigma2)
        beta = np.array([rho, s2])
        try:
            ll = loglik(family, beta, data)
        except CovregError:
            continue
        if ll > best_ll:
            best, best_ll = beta, ll
    if best is None:
        raise ConstraintInfeasible("no admissible grid point for the network model")
    return best


def _auto_start(family, data, opts):
    if family.is_linear:
        beta = fit_wls(family, data, IdentityWeight(), opts).beta_hat
        return _interior_start(family, data.X, beta, opts.delta) if opts.constrained else beta
    return _network_grid_start(family, data)


def fit_qmle(family, data, opts=None):
    """Maximise the Gaussian quasi-likelihood by BFGS.

    The line search never leaves {beta : C_beta(X_i) >= delta I for all i}
    (and the box bounds of the family), so the result is the constrained
    estimator whenever the constraint binds.
    """
    opts = opts or FitOptions()
    _check_size(family, data)
    start = opts.start
    if start is None:
        start = _auto_start(family, data, FitOptions(delta=opts.delta))
        if family.is_linear:
            start = _interior_start(family, data.X, start, opts.delta)
    start = np.asarray(start, dtype=float)
    qopts = FitOptions(opts.max_iters, opts.grad_tol, opts.delta, start, True)
    feasible = _feasible_fn(family, data.X, qopts)
    if not feasible(start):
        raise ConstraintInfeasible("starting value is outside the parameter space")
    scale = data.n * data.p

    def done(gv):
        return np.max(np.abs(gv)) / scale < opts.grad_tol

    out = _bfgs(
        lambda b: -loglik(family, b, data),
        lambda b: -score(family, b, data),
        start,
        _safe_inv(fisher_info(family, start, data)),
        feasible,
        done,
        opts.max_iters,
    )
    active = _finish(out, family, data.X, qopts, "QMLE", lambda gv: np.max(np.abs(gv)) / scale)
    return FitResult(
        beta_hat=out.x,
        estimator="QMLE",
        converged=out.converged,
        iters=out.iters,
        objective=-out.fx,
        constrained_active=active,
        weight=None,
        grad_norm=float(np.max(np.abs(out.gx)) / scale),
    )


def fit_ols(family, data, opts=None, method="auto"):
    return fit_wls(family, data, IdentityWeight(), opts, method, estimator="OLS")


def fit_gls(family, data, moments, beta0=None, cov=None, opts=None, method="auto"):
    """GLS with the true conditional covariance of vec(Y Y^T) (simulation use)."""
    return fit_wls(family, data, KnownV(moments, beta0, cov), opts, method, estimator="GLS")


def estimated_v(family, data, opts=None):
    """Pilot OLS fit, residuals and pooled kurtosis, returned as an EstimatedV weight."""
    pilot = fit_ols(family, data, opts)
    eps = residuals(family, pilot.beta_hat, data)
    return EstimatedV(pilot.beta_hat, estimate_mu4(eps)), pilot


def fit_fgls(family, data, opts=None, method="auto"):
    spec, pilot = estimated_v(family, data, opts)
    res = fit_wls(family, data, spec, opts, method, estimator="FGLS")
    res.pipeline = {
        "pilot_beta": pilot.beta_hat.tolist(),
        "pilot_constrained_active": pilot.constrained_active,
        "mu4_hat": float(spec.moments.mu4),
    }
    return res
