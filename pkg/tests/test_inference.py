import numpy as np
import pytest

from covreg import numkit
from covreg.condvar import NORMAL, KnownV
from covreg.errors import NotPositiveDefinite, SingularVhat
from covreg.estimate import FitOptions, fit_gls, fit_ols, fit_qmle
from covreg.inference import (
    avar_for,
    avar_qmle,
    avar_wls,
    confint,
    cov_errors,
    residuals,
    summarize_residuals,
)
from covreg.model import Dataset, LinearFamily
from covreg.simulate import BETA0

from conftest import model_a_data


def scalar_data(y):
    y = np.asarray(y, dtype=float)
    fam = LinearFamily(1, 1)
    return fam, Dataset(fam, np.ones((len(y), 1, 1, 1)), y[:, None])


def test_residuals_invert_dgp(rng):
    fam, data = model_a_data(20, 4, seed=1)
    eps = rng.standard_normal((20, 4))
    Y = np.einsum("nab,nb->na", numkit.sym_sqrt(data.cov(BETA0)), eps)
    got = residuals(fam, BETA0, Dataset(fam, data.X, Y))
    assert np.allclose(got, eps, atol=1e-10)


def test_residuals_scalar():
    fam, data = scalar_data([2.0])
    assert residuals(fam, [4.0], data)[0, 0] == pytest.approx(1.0)
    with pytest.raises(NotPositiveDefinite):
        residuals(fam, [-1.0], data)


def test_scalar_qmle_sandwich_closed_form(rng):
    y = 1.5 * rng.standard_normal(500)
    fam, data = scalar_data(y)
    fit = fit_qmle(fam, data)
    b = fit.beta_hat[0]
    av = avar_qmle(fam, fit.beta_hat, data)
    assert av.V_hat[0, 0] == pytest.approx(1 / (2 * b**2), rel=1e-12)
    e = y / np.sqrt(b)
    assert av.avar[0, 0] == pytest.approx(b**2 * (np.mean(e**4) - 1), rel=1e-10)
    # normal errors: implied Var(beta_hat) ~ 2 beta^2 / n
    assert av.avar[0, 0] / 500 == pytest.approx(2 * 1.5**4 / 500, rel=0.25)


def test_scalar_ols_sandwich(rng):
    y = rng.standard_normal(300) * 2.0
    fam, data = scalar_data(y)
    fit = fit_ols(fam, data)
    av = avar_wls(fam, fit.beta_hat, data)
    b = fit.beta_hat[0]
    assert av.M_hat[0, 0] == pytest.approx(1.0)
    # avar / n is the plug-in variance of the mean of y^2
    assert av.avar[0, 0] == pytest.approx(np.mean(y**4) - b**2, rel=1e-10)
    assert av.avar[0, 0] == pytest.approx(avar_qmle(fam, fit.beta_hat, data).avar[0, 0], rel=1e-10)


def test_avar_symmetric_nonnegative():
    fam, data = model_a_data(100, 5, seed=2)
    for fit in (fit_qmle(fam, data), fit_ols(fam, data)):
        av = avar_for(fit, fam, data)
        assert np.array_equal(av.avar, av.avar.T)
        assert np.all(np.diag(av.avar) >= 0)
        assert np.linalg.eigvalsh(av.avar)[0] >= -1e-8 * np.abs(av.avar).max()


def test_omega_small_under_normality():
    fam, data = model_a_data(2000, 5, seed=4, error="normal")
    av = avar_qmle(fam, fit_qmle(fam, data).beta_hat, data)
    assert np.linalg.norm(av.Omega_hat) < 0.1 * np.linalg.norm(av.V_hat)


def test_gls_as_efficient_as_qmle_under_normality():
    fam, data = model_a_data(2000, 5, seed=5, error="normal")
    q = avar_qmle(fam, fit_qmle(fam, data).beta_hat, data)
    g_fit = fit_gls(fam, data, NORMAL, beta0=BETA0)
    g = avar_for(g_fit, fam, data)
    rel = np.linalg.norm(g.avar - q.avar) / np.linalg.norm(q.avar)
    assert rel < 0.1


def test_singular_vhat():
    fam = LinearFamily(2, 1)
    X = np.ones((3, 2, 1, 1))
    X[:, 1] *= 2.0  # second component is a multiple of the first
    data = Dataset(fam, X, np.ones((3, 1)))
    with pytest.raises(SingularVhat):
        avar_qmle(fam, np.array([0.5, 0.25]), data)


def test_confint_examples():
    ci = confint(np.array([0.0]), np.array([[1.0]]), 0.95, 100, 1)
    assert ci[0, 1] == pytest.approx(0.196, abs=1e-3)
    assert ci[0, 0] == pytest.approx(-ci[0, 1])
    z = confint(np.array([3.0]), np.array([[0.0]]), 0.9, 10, 2)
    assert np.array_equal(z, [[3.0, 3.0]])
    with pytest.raises(ValueError):
        confint(np.array([0.0]), np.eye(1), 1.0, 1, 1)


def test_cov_errors_examples():
    fam, data = scalar_data([1.0, 2.0, 3.0])
    assert cov_errors(fam, [3.0], [2.0], data.X) == (1.0, 1.0)
    f2, d2 = model_a_data(10, 4, seed=1)
    assert cov_errors(f2, BETA0, BETA0, d2.X) == (0.0, 0.0)


def test_cov_errors_norm_inequality(rng):
    fam, data = model_a_data(30, 6, seed=8)
    for _ in range(20):
        s, f = cov_errors(fam, BETA0 + rng.normal(size=5), BETA0, data.X)
        assert f <= np.sqrt(6) * s


def test_summarize_residuals():
    s = summarize_residuals(np.array([[1.0, -1.0], [2.0, -2.0]]))
    assert s["mean"] == 0.0 and s["mu4"] == pytest.approx(8.5) and s["max_abs"] == 2.0
