"""Command-line interface: ``covreg simulate | fit | assess``.

Exit codes: 0 success, 1 internal or estimation error, 2 invalid input,
3 study exceeded its failure-rate limit.
"""

import argparse
import csv
import json
import logging
import os
import sys
from importlib import resources

import numpy as np

from . import datafile, simulate
from .assess import assess, ocv
from .condvar import ErrorMoments, EstimatedV, IdentityWeight, KnownV
from .errors import ConfigError, CovregError, DimensionMismatch, StudyFailed
from .estimate import FitOptions, estimated_v, fit_fgls, fit_gls, fit_ols, fit_qmle, fit_wls
from .inference import avar_for, confint, residuals, summarize_residuals

EXIT_OK, EXIT_ERROR, EXIT_INVALID, EXIT_QUALITY = 0, 1, 2, 3

log = logging.getLogger("covreg")


def _read_config(path):
    if not os.path.exists(path):
        bundled = resources.files("covreg") / "configs" / os.path.basename(path)
        if bundled.is_file():
            path = str(bundled)
        else:
            raise ConfigError("config", f"file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if path.endswith(".json"):
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON ({exc})") from None
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        return tomllib.loads(raw.decode())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"invalid TOML ({exc})") from None


def cmd_simulate(args):
    doc = _read_config(args.config)
    out = args.out or doc.pop("out", None) or "covreg_out"
    doc.pop("out", None)
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = simulate.SimConfig.from_dict(doc)
    try:
        report = simulate.run_study(cfg, workers=args.workers)
        code = EXIT_OK
    except StudyFailed as exc:
        report = exc.report
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_QUALITY
    simulate.write_outputs(report, out)
    print(simulate.format_table(report))
    print(f"wrote {out}/report.json, metrics.csv, criteria.csv")
    return code


def _parse_vector(text, field):
    try:
        return np.array([float(t) for t in text.split(",")])
    except ValueError:
        raise ConfigError(field, f"expected comma-separated numbers, got {text!r}") from None


def _known_weight(args, K):
    if args.beta0 is None:
        raise ConfigError("--beta0", "known V requires the true parameter")
    if args.mu4 is None:
        raise ConfigError("--mu4", "known V requires the true fourth moment")
    beta0 = _parse_vector(args.beta0, "--beta0")
    if beta0.shape != (K,):
        raise ConfigError("--beta0", f"expected {K} values")
    return KnownV(ErrorMoments(args.mu4), beta0)


def _fit(args, family, data, opts):
    est = args.estimator
    if est == "qmle":
        return fit_qmle(family, data, opts)
    if est == "ols":
        return fit_ols(family, data, opts)
    if est == "gls":
        spec = _known_weight(args, family.K)
        return fit_gls(family, data, spec.moments, beta0=spec.beta0, opts=opts)
    if est == "fgls":
        return fit_fgls(family, data, opts)
    return fit_wls(family, data, _weight_spec(args, family, data, opts), opts)


def _weight_spec(args, family, data, opts):
    if args.weight == "identity":
        return IdentityWeight()
    if args.weight == "known":
        return _known_weight(args, family.K)
    spec, _ = estimated_v(family, data, opts)
    return spec


def _names(df):
    return list(df.names) if df.names else [f"beta{k + 1}" for k in range(df.family.K)]


def cmd_fit(args):
    df = datafile.load(args.dataset)
    data, family = df.dataset, df.family
    opts = FitOptions(constrained=not args.unconstrained)
    fit = _fit(args, family, data, opts)
    av = avar_for(fit, family, data)
    ci = confint(fit, av, args.level, data.n, data.p)
    se = av.se(data.n, data.p)
    names = _names(df)
    result = {
        "estimator": fit.estimator,
        "names": names,
        "beta_hat": fit.beta_hat.tolist(),
        "se": se.tolist(),
        "avar": av.avar.tolist(),
        "level": args.level,
        "ci": ci.tolist(),
        "converged": fit.converged,
        "iters": fit.iters,
        "objective": fit.objective,
        "constrained_active": fit.constrained_active,
        "weight": fit.weight_used,
        "pipeline": fit.pipeline,
        "residuals": summarize_residuals(residuals(family, fit.beta_hat, data)),
    }
    print(f"{fit.estimator}  n={data.n} p={data.p}  converged={fit.converged}")
    print(f"{'param':<12}{'estimate':>12}{'se':>12}{'lower':>12}{'upper':>12}")
    for k, name in enumerate(names):
        print(f"{name:<12}{fit.beta_hat[k]:12.4f}{se[k]:12.4f}{ci[k, 0]:12.4f}{ci[k, 1]:12.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def _parse_candidates(text, K):
    cands = []
    for part in text.split(";"):
        cols = [int(c) for c in part.split(",") if c.strip()]
        if not cols or any(c < 0 or c >= K for c in cols) or len(set(cols)) != len(cols):
            raise ConfigError("--candidates", f"invalid design subset {part!r}")
        cands.append(cols)
    return cands


def _assess_one(args, family, data, criteria, opts):
    if args.weight == "identity":
        spec, fit = IdentityWeight(), fit_ols(family, data, opts)
    elif args.weight == "known":
        spec = _known_weight(args, family.K)
        fit = fit_wls(family, data, spec, opts, estimator="GLS")
    else:
        spec, _ = estimated_v(family, data, opts)
        fit = fit_wls(family, data, spec, opts, estimator="FGLS")
    row = {"estimator": fit.estimator, "beta_hat": fit.beta_hat.tolist()}
    if {"cp", "rcp"} & set(criteria):
        moments = spec.moments if isinstance(spec, (KnownV, EstimatedV)) else None
        if args.v_source == "known":
            kv = _known_weight(args, family.K)
            moments = kv.moments
        rep = assess(
            family, data, fit.beta_hat, spec, args.v_source,
            moments=moments, beta0=getattr(_maybe_known(args, family), "beta0", None),
            with_ocv="ocv" in criteria, opts=opts,
        )
        row.update(rep.to_dict())
    else:
        row["ocv"] = ocv(family, data, spec, opts)
        row["weight"] = getattr(spec, "tag", "identity")
    return row


def _maybe_known(args, family):
    return _known_weight(args, family.K) if args.v_source == "known" else None


def cmd_assess(args):
    df = datafile.load(args.dataset)
    family, data = df.family, df.dataset
    criteria = [c.strip() for c in args.criteria.split(",") if c.strip()]
    bad = [c for c in criteria if c not in ("cp", "rcp", "ocv")]
    if bad:
        raise ConfigError("--criteria", f"unknown criterion {bad[0]!r}")
    if {"cp", "rcp"} & set(criteria) and not family.is_linear:
        raise ConfigError("--criteria", "criterion requires linear family")
    if args.v_source == "known":
        _known_weight(args, family.K)
    opts = FitOptions(constrained=not args.unconstrained)
    if args.candidates:
        if not family.is_linear:
            raise ConfigError("--candidates", "candidate designs require a linear family")
        if args.beta0 is not None:
            raise ConfigError("--beta0", "cannot be combined with --candidates")
        rows = []
        for cols in _parse_candidates(args.candidates, family.K):
            sub = family.select(cols)
            sub_data = type(data)(sub, data.X[:, cols], data.Y)
            row = _assess_one(args, sub, sub_data, criteria, opts)
            row["columns"] = cols
            rows.append(row)
        key = criteria[0]
        for rank, i in enumerate(np.argsort([r[key] for r in rows], kind="stable")):
            rows[i]["rank"] = rank + 1
    else:
        rows = [_assess_one(args, family, data, criteria, opts)]
    out = {"criteria": criteria, "v_source": args.v_source, "results": rows}
    cols = ["columns", "rank", "estimator", "train_error", "U", "cp", "vtilde_errR", "rcp", "ocv"]
    present = [c for c in cols if any(c in r for r in rows)]
    print("  ".join(f"{c:>12}" for c in present))
    for r in rows:
        print("  ".join(f"{_fmt(r.get(c)):>12}" for c in present))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "assessment.json"), "w") as fh:
            json.dump(out, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(args.out, "assessment.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(present)
            for r in rows:
                w.writerow([_csv(r.get(c)) for c in present])
    return EXIT_OK


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.5g}"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return "" if v is None else str(v)


def _csv(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return " ".join(str(x) for x in v)
    return "" if v is None else v


def build_parser():
    ap = argparse.ArgumentParser(prog="covreg", description="Covariance regression toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a Monte Carlo study from a TOML/JSON config")
    s.add_argument("config")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int, default=None, help="default: $COVREG_WORKERS or 1")
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_simulate)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("dataset")
    common.add_argument("--beta0", help="true parameter, comma separated (known V)")
    common.add_argument("--mu4", type=float, help="true error fourth moment (known V)")
    common.add_argument("--unconstrained", action="store_true", help="skip the PD constraint")

    f = sub.add_parser("fit", parents=[common], help="estimate beta on a dataset file")
    f.add_argument("--estimator", choices=["qmle", "ols", "gls", "fgls", "wls"], default="qmle")
    f.add_argument("--weight", choices=["identity", "known", "estimated"], default="identity",
                   help="weight for --estimator wls")
    f.add_argument("--level", type=float, default=0.95)
    f.add_argument("--out", help="JSON output path")
    f.set_defaults(func=cmd_fit)

    a = sub.add_parser("assess", parents=[common], help="Cp / RCp / OCV for a fitted model")
    a.add_argument("--criteria", default="cp,rcp,ocv")
    a.add_argument("--weight", choices=["identity", "known", "estimated"], default="identity")
    a.add_argument("--v-source", choices=["known", "estimated"], default="estimated")
    a.add_argument("--candidates", help="design subsets to rank, e.g. '0,1,2;0,1,3' (0-based)")
    a.add_argument("--out", help="output directory")
    a.set_defaults(func=cmd_assess)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DimensionMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except CovregError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
