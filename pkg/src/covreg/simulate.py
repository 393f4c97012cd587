"""Data-generating processes and the Monte Carlo replication engine.

Every replication draws from its own generators, keyed by
``(seed, rep, purpose)``, so results do not depend on how replications are
scheduled across worker processes, and adding an estimator never shifts the
draws of another.  Aggregation runs in replication order.
"""

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import partial

import numpy as np
from threadpoolctl import threadpool_limits

from . import numkit
from .assess import (
    expected_test_error,
    ocv,
    per_obs_grams,
    test_error,
    train_error,
    u_from_grams,
    v_operator,
    vtilde_from_grams,
)
from .condvar import ErrorMoments, IdentityOp, KnownV, cond_cov_op, weight_operator
from .errors import ConfigError, CovregError, StudyFailed
from .estimate import FitOptions, fit_fgls, fit_gls, fit_ols, fit_qmle
from .inference import avar_for, confint
from .model import Dataset, LinearFamily, from_vectors

BETA0 = np.array([5.0, 1.4, 1.4, 1.4, 1.4])
MIXTURE_MU4 = 25.0 / 3.0

X_TRAIN, Y_TRAIN, X_TEST, Y_TEST, Y_SAME = 1, 2, 3, 4, 5
FIXED_KEY = 2**31  # never collides with a replication index

ESTIMATORS = ("qmle", "ols", "gls", "fgls")
CRITERIA = ("cp", "rcp", "ocv", "cp_hat", "rcp_hat")
MODELS = ("A", "B", "A_misspecified")


@dataclass(frozen=True)
class ErrorLaw:
    kind: str = "normal"  # "normal" or "mixture" (0.9 N(0, 5/9) + 0.1 N(0, 5))

    def __post_init__(self):
        if self.kind not in ("normal", "mixture"):
            raise ConfigError("error", f"unknown error law {self.kind!r}")

    @property
    def mu4(self):
        return 3.0 if self.kind == "normal" else MIXTURE_MU4

    @property
    def moments(self):
        return ErrorMoments(self.mu4)

    def sample(self, rng, shape):
        z = rng.standard_normal(shape)
        if self.kind == "normal":
            return z
        wide = rng.random(shape) < 0.1
        return z * np.where(wide, np.sqrt(5.0), np.sqrt(5.0 / 9.0))


def rng_for(seed, rep, tag):
    return np.random.default_rng(np.random.SeedSequence([seed, rep, tag]))


# --------------------------------------------------------------------------
# designs


def _sym_offdiag(U):
    T = np.triu(U, 1)
    return T + np.swapaxes(T, -1, -2)


def _model_a_raw(m, p, rng):
    X = np.zeros((m, 5, p, p))
    X[:, 0] = np.eye(p)
    X[:, 1] = _sym_offdiag((rng.random((m, p, p)) < 1.0 / p).astype(float))
    for k in (2, 3, 4):
        # component index k+1 in 3..5: d ~ U(0, p^(1 + (k+1-3)/6))
        d = rng.uniform(0.0, p ** (1.0 + (k - 2) / 6.0), (m, p, p))
        X[:, k] = _sym_offdiag(np.exp(-(d**2)))
    return X


def _resample_until_pd(n, p, rng, beta0, pd_floor):
    """Draw Model-A designs, redrawing any observation whose true covariance
    has smallest eigenvalue below ``pd_floor``."""
    X = _model_a_raw(n, p, rng)
    bad = np.flatnonzero(numkit.min_eigenvalue(np.einsum("k,nkab->nab", beta0, X)) < pd_floor)
    while bad.size:
        X[bad] = _model_a_raw(bad.size, p, rng)
        lam = numkit.min_eigenvalue(np.einsum("k,nkab->nab", beta0, X[bad]))
        bad = bad[lam < pd_floor]
    return X


def gen_model_a(n, p, rng, beta0=BETA0, pd_floor=1e-8):
    if p < 2:
        raise ConfigError("p", "Model A needs p >= 2")
    return LinearFamily(5, p), _resample_until_pd(n, p, rng, np.asarray(beta0), pd_floor)


def gen_model_b(n, p, rng):
    if p < 1:
        raise ConfigError("p", "Model B needs p >= 1")
    vectors = rng.normal(0.0, np.sqrt(1.0 / p), (n, 4, p))
    return from_vectors(vectors, intercept=True)


def misspecify(X):
    """Fitted design of the misspecified model: last component squared elementwise."""
    Xf = X.copy()
    Xf[..., 4, :, :] = X[..., 4, :, :] ** 2
    return Xf


def gen_misspecified_a(n, p, rng, beta0=BETA0, pd_floor=1e-8):
    family, X = gen_model_a(n, p, rng, beta0, pd_floor)
    return family, X, misspecify(X)


def draw_response(family, beta0, X, law, rng):
    C = family.eval(beta0, X)
    S = numkit.sym_sqrt(C)
    eps = law.sample(rng, C.shape[:-1])
    return np.einsum("...ab,...b->...a", S, eps)


# --------------------------------------------------------------------------
# configuration


@dataclass
class SimConfig:
    model: str = "A"
    n: int = 50
    p: int = 5
    reps: int = 500
    x_setting: str = "random"
    error: str = "mixture"
    estimators: tuple = ("ols", "gls")
    criteria: tuple = ()
    assess_fit: str = "gls"  # fit being assessed: "gls" (W = V^-) or "ols" (W = I)
    seed: int = 0
    level: float = 0.95
    constrained: bool = True
    pd_floor: float = 1e-8
    max_failure_rate: float = 0.05
    avar: bool = True

    def __post_init__(self):
        self.estimators = tuple(self.estimators)
        self.criteria = tuple(self.criteria)
        self.validate()

    def validate(self):
        if self.model not in MODELS:
            raise ConfigError("model", f"must be one of {MODELS}")
        for name in ("n", "p", "reps"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(name, f"must be a positive integer, got {v!r}")
        if self.model != "B" and self.p < 2:
            raise ConfigError("p", "Model A needs p >= 2")
        if self.n * self.p < 5:
            raise ConfigError("n", "n * p must be at least K = 5")
        if self.x_setting not in ("random", "fixed"):
            raise ConfigError("x_setting", "must be 'random' or 'fixed'")
        ErrorLaw(self.error)
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise ConfigError("estimators", f"unknown estimator(s) {bad}")
        bad = [c for c in self.criteria if c not in CRITERIA]
        if bad:
            raise ConfigError("criteria", f"unknown criterion(s) {bad}")
        if self.criteria and self.n < 7:
            raise ConfigError("n", "criteria need n >= K + 2")
        if self.assess_fit not in ("gls", "ols"):
            raise ConfigError("assess_fit", "must be 'gls' or 'ols'")
        if not 0 < self.level < 1:
            raise ConfigError("level", "must lie in (0, 1)")
        if not self.pd_floor > 0:
            raise ConfigError("pd_floor", "must be positive")
        if not 0 <= self.max_failure_rate <= 1:
            raise ConfigError("max_failure_rate", "must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(extra[0], "unknown configuration key")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from exc

    def to_dict(self):
        d = asdict(self)
        d["estimators"] = list(self.estimators)
        d["criteria"] = list(self.criteria)
        return d

    @property
    def law(self):
        return ErrorLaw(self.error)


# --------------------------------------------------------------------------
# one replication


def _design(cfg, rng):
    """(fitted family, true design, fitted design)."""
    if cfg.model == "B":
        fam, X = gen_model_b(cfg.n, cfg.p, rng)
        return fam, X, X
    fam, X = gen_model_a(cfg.n, cfg.p, rng, BETA0, cfg.pd_floor)
    return fam, X, (misspecify(X) if cfg.model == "A_misspecified" else X)


def fixed_design(cfg):
    return _design(cfg, rng_for(cfg.seed, FIXED_KEY, X_TRAIN))


def _fit(name, fam, data, moments, C_true, opts):
    if name == "qmle":
        return fit_qmle(fam, data, opts)
    if name == "ols":
        return fit_ols(fam, data, opts)
    if name == "gls":
        return fit_gls(fam, data, moments, cov=C_true, opts=opts)
    return fit_fgls(fam, data, opts)


def _estimator_metrics(cfg, fam, fit, data, C_true):
    D = data.cov(fit.beta_hat) - C_true
    spec = np.max(np.abs(np.linalg.eigvalsh(D)), axis=-1)
    frob = np.sqrt(np.sum(D**2, axis=(-2, -1)))
    out = {
        "beta": fit.beta_hat,
        "active": bool(fit.constrained_active),
        "s_error": float(np.max(spec)),
        "f_error": float(np.max(frob)) / np.sqrt(cfg.p),
    }
    if cfg.avar:
        try:
            av = avar_for(fit, fam, data)
            ci = confint(fit, av, cfg.level, data.n, data.p)
            out["avar"] = av.avar
            out["covered"] = (ci[:, 0] <= BETA0) & (BETA0 <= ci[:, 1])
            out["avar_failed"] = False
        except CovregError:
            out["avar"] = np.full((fam.K, fam.K), np.nan)
            out["covered"] = np.zeros(fam.K, dtype=bool)
            out["avar_failed"] = True
    return out


def _assessment(cfg, fam, data, X_true, C_true, fits, opts, rep, fixed):
    law = cfg.law
    moments = law.moments
    if cfg.assess_fit == "gls":
        fit = fits.get("gls") or fit_gls(fam, data, moments, cov=C_true, opts=opts)
        W = weight_operator(KnownV(moments, cov=C_true), fam, data.X)
    else:
        fit = fits.get("ols") or fit_ols(fam, data, opts)
        W = IdentityOp(data.n, data.p)
    beta = fit.beta_hat
    V = cond_cov_op(C_true, moments)
    C_hat = data.cov(beta)

    res = {"Tr": train_error(fam, beta, data, W)}
    Gi, Hi = per_obs_grams(data.X, W, V)
    U = u_from_grams(Gi, Hi)
    vt = vtilde_from_grams(Gi, Hi)
    res.update(U=U, vtilde=vt, cp=res["Tr"] + U, rcp=res["Tr"] + U / 2.0 + vt)
    if "ocv" in cfg.criteria:
        res["ocv"] = ocv(fam, data, W, opts)
    if "cp_hat" in cfg.criteria or "rcp_hat" in cfg.criteria:
        Vh = v_operator(fam, data, "estimated", opts=opts)
        Gh, Hh = per_obs_grams(data.X, W, Vh)
        Uh = u_from_grams(Gh, Hh)
        res["cp_hat"] = res["Tr"] + Uh
        res["rcp_hat"] = res["Tr"] + Uh / 2.0 + vtilde_from_grams(Gh, Hh)

    # same X, fresh responses (ErrS; ErrF under Fixed-X)
    true_fam = LinearFamily(fam.K, fam.p)
    Y_same = draw_response(true_fam, BETA0, X_true, law, rng_for(cfg.seed, rep, Y_SAME))
    same = Dataset(fam, data.X, Y_same)
    res["ErrS_raw"] = test_error(fam, beta, same, W)
    res["ErrS"] = expected_test_error(C_hat, C_true, W, V)

    if not fixed:
        fam0, X0, X0fit = _design(cfg, rng_for(cfg.seed, rep, X_TEST))
        C0 = true_fam.eval(BETA0, X0)
        Y0 = draw_response(true_fam, BETA0, X0, law, rng_for(cfg.seed, rep, Y_TEST))
        test = Dataset(fam, X0fit, Y0)
        if cfg.assess_fit == "gls":
            W0 = weight_operator(KnownV(moments, cov=C0), fam, X0fit)
        else:
            W0 = IdentityOp(cfg.n, cfg.p)
        res["ErrR_raw"] = test_error(fam, beta, test, W0)
        res["ErrR"] = expected_test_error(fam.eval(beta, X0fit), C0, W0, cond_cov_op(C0, moments))
    return res


def run_rep(cfg, rep, fixed=None):
    """One replication; returns a dict of per-rep results (``ok`` False on failure)."""
    stage = "design"
    try:
        if fixed is None:
            fam, X_true, X_fit = _design(cfg, rng_for(cfg.seed, rep, X_TRAIN))
        else:
            fam, X_true, X_fit = fixed
        true_fam = LinearFamily(fam.K, fam.p)
        C_true = true_fam.eval(BETA0, X_true)
        stage = "response"
        Y = draw_response(true_fam, BETA0, X_true, cfg.law, rng_for(cfg.seed, rep, Y_TRAIN))
        data = Dataset(fam, X_fit, Y)
        opts = FitOptions(constrained=cfg.constrained)
        out = {"rep": rep, "ok": True, "est": {}}
        fits = {}
        for name in cfg.estimators:
            stage = name
            fits[name] = _fit(name, fam, data, cfg.law.moments, C_true, opts)
            out["est"][name] = _estimator_metrics(cfg, fam, fits[name], data, C_true)
        if cfg.criteria:
            stage = "assessment"
            out["assess"] = _assessment(cfg, fam, data, X_true, C_true, fits, opts, rep, fixed is not None)
        return out
    except CovregError as exc:
        return {"rep": rep, "ok": False, "stage": stage, "error": f"{type(exc).__name__}: {exc}"}


# --------------------------------------------------------------------------
# aggregation


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    m = float(np.mean(x))
    se = float(np.std(x, ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0
    return m, se


def _aggregate_estimator(cfg, name, rows, n_obs):
    B = np.array([r["est"][name]["beta"] for r in rows])
    R = len(B)
    mean = B.mean(axis=0)
    bias = mean - BETA0
    sd = np.sqrt(np.mean((B - mean) ** 2, axis=0))
    rmse = np.sqrt(np.mean((B - BETA0) ** 2, axis=0))
    out = {
        "bias": bias.tolist(),
        "sd": sd.tolist(),
        "rmse": rmse.tolist(),
        "sd_undefined": R < 2,
        "s_error": float(np.mean([r["est"][name]["s_error"] for r in rows])),
        "f_error": float(np.mean([r["est"][name]["f_error"] for r in rows])),
        "constrained_active_rate": float(np.mean([r["est"][name]["active"] for r in rows])),
    }
    if cfg.avar:
        cov_rate = np.mean([r["est"][name]["covered"] for r in rows], axis=0)
        failed = [r["est"][name]["avar_failed"] for r in rows]
        good = [r["est"][name]["avar"] for r in rows if not r["est"][name]["avar_failed"]]
        scaled = np.sqrt(n_obs) * (B - mean)
        emp = scaled.T @ scaled / R
        mean_avar = np.mean(good, axis=0) if good else np.full_like(emp, np.nan)
        rel = float(np.linalg.norm(emp - mean_avar) / np.linalg.norm(emp)) if R > 1 else float("nan")
        out.update(
            coverage=cov_rate.tolist(),
            avar_failures=int(np.sum(failed)),
            empirical_cov=emp.tolist(),
            mean_avar=mean_avar.tolist(),
            avar_rel_frobenius=rel,
        )
    return out


def _aggregate_assessment(rows, fixed):
    A = {k: np.array([r["assess"][k] for r in rows]) for k in rows[0]["assess"]}
    targets = ["ErrS"] if fixed else ["ErrS", "ErrR"]
    errs = {}
    for t in targets:
        m, se = _mean_se(A[t])
        mr, ser = _mean_se(A[t + "_raw"])
        errs["ErrF" if fixed else t] = {"mean": m, "se": se, "raw_mean": mr, "raw_se": ser}
    crit = {}
    for c in ("Tr", "U", "vtilde") + CRITERIA:
        if c not in A:
            continue
        m, se = _mean_se(A[c])
        entry = {"mean": m, "se": se, "bias": {}}
        for t in targets:
            b, bse = _mean_se(A[c] - A[t])
            br, brse = _mean_se(A[c] - A[t + "_raw"])
            entry["bias"]["ErrF" if fixed else t] = {
                "bias": b, "se": bse, "raw_bias": br, "raw_se": brse,
            }
        crit[c] = entry
    out = {"test_errors": errs, "criteria": crit}
    if not fixed:
        g, gse = _mean_se(A["ErrR"] - A["ErrS"])
        gr, grse = _mean_se(A["ErrR_raw"] - A["ErrS_raw"])
        out["gap_ErrR_ErrS"] = {"mean": g, "se": gse, "raw_mean": gr, "raw_se": grse}
    return out


def aggregate(cfg, results):
    rows = [r for r in results if r["ok"]]
    failures = [{"rep": r["rep"], "stage": r["stage"], "error": r["error"]} for r in results if not r["ok"]]
    report = {
        "schema": 1,
        "config": cfg.to_dict(),
        "beta0": BETA0.tolist(),
        "reps_ok": len(rows),
        "failures": {"count": len(failures), "rate": len(failures) / cfg.reps, "records": failures},
        "estimators": {},
    }
    if rows:
        n_obs = cfg.n * cfg.p
        for name in cfg.estimators:
            report["estimators"][name.upper()] = _aggregate_estimator(cfg, name, rows, n_obs)
        if cfg.criteria:
            report["assessment"] = _aggregate_assessment(rows, cfg.x_setting == "fixed")
    return report


# --------------------------------------------------------------------------
# driver


def default_workers():
    try:
        return max(1, int(os.environ.get("COVREG_WORKERS", "1")))
    except ValueError:
        raise ConfigError("COVREG_WORKERS", "must be an integer") from None


def _init_worker():
    threadpool_limits(1)


def _run_rep_single_thread(cfg, fixed, rep):
    return run_rep(cfg, rep, fixed)


def run_study(cfg, workers=None):
    """Run all replications and aggregate; raises StudyFailed above the failure limit.

    The partial report is attached to the exception as ``.report``.
    """
    workers = default_workers() if workers is None else int(workers)
    fixed = fixed_design(cfg) if cfg.x_setting == "fixed" else None
    job = partial(_run_rep_single_thread, cfg, fixed)
    reps = range(cfg.reps)
    if workers <= 1:
        with threadpool_limits(1):
            results = [job(r) for r in reps]
    else:
        chunk = max(1, cfg.reps // (4 * workers))
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker) as ex:
            results = list(ex.map(job, reps, chunksize=chunk))
    report = aggregate(cfg, results)
    if report["failures"]["rate"] > cfg.max_failure_rate:
        exc = StudyFailed(report["failures"]["count"], cfg.reps)
        exc.report = report
        raise exc
    return report


# --------------------------------------------------------------------------
# output


def report_json(report):
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=True) + "\n"


METRIC_COLUMNS = ("estimator", "component", "bias", "sd", "rmse", "coverage", "s_error", "f_error")
CRITERIA_COLUMNS = ("criterion", "mean", "se", "target", "bias", "bias_se", "raw_bias", "raw_bias_se")


def metric_rows(report):
    for est, m in report["estimators"].items():
        for k in range(len(m["bias"])):
            yield {
                "estimator": est,
                "component": k + 1,
                "bias": m["bias"][k],
                "sd": m["sd"][k],
                "rmse": m["rmse"][k],
                "coverage": m["coverage"][k] if "coverage" in m else "",
                "s_error": m["s_error"],
                "f_error": m["f_error"],
            }


def criteria_rows(report):
    a = report.get("assessment")
    if not a:
        return
    for c, e in a["criteria"].items():
        for t, b in e["bias"].items():
            yield {
                "criterion": c,
                "mean": e["mean"],
                "se": e["se"],
                "target": t,
                "bias": b["bias"],
                "bias_se": b["se"],
                "raw_bias": b["raw_bias"],
                "raw_bias_se": b["raw_se"],
            }


def write_outputs(report, out_dir):
    import csv

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        fh.write(report_json(report))
    for name, cols, rows in (
        ("metrics.csv", METRIC_COLUMNS, metric_rows(report)),
        ("criteria.csv", CRITERIA_COLUMNS, criteria_rows(report)),
    ):
        with open(os.path.join(out_dir, name), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for row in rows or ():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def format_table(report):
    """Plain-text BIAS/SD/RMSE table, one block per estimator."""
    lines = []
    cfg = report["config"]
    lines.append(
        f"Model {cfg['model']}, n={cfg['n']}, p={cfg['p']}, {cfg['x_setting']}-X, "
        f"{cfg['error']} errors, {report['reps_ok']}/{cfg['reps']} reps"
    )
    for est, m in report["estimators"].items():
        K = len(m["bias"])
        lines.append(f"{est:<6}" + "".join(f"{'b' + str(k + 1):>9}" for k in range(K)))
        for key in ("bias", "sd", "rmse"):
            lines.append(f"  {key.upper():<4}" + "".join(f"{v:9.3f}" for v in m[key]))
    a = report.get("assessment")
    if a:
        for t, e in a["test_errors"].items():
            lines.append(f"{t}: {e['mean']:.4f} (se {e['se']:.4f})")
        for c, e in a["criteria"].items():
            lines.append(f"{c:<8} mean {e['mean']:.4f}")
    return "\n".join(lines)
