"""Batch front end: theory sweeps, Monte Carlo sweeps, hyperparameter
optimization, GAMP runs, and theory-vs-experiment comparison, emitting CSV
(or JSON) for downstream plotting.

Exit codes: 0 if every grid point succeeded, 1 on partial failure, 2 on
usage errors.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import gamp as gamp_mod
from . import hyperopt as hyperopt_mod
from . import metrics as metrics_mod
from . import monte_carlo as mc_mod
from .metrics import LEVELS_DEFAULT
from .spectra import marchenko_pastur_model, tau_add
from .state_evolution import ScenarioConfig, solve_fixed_point

SCHEMA_THEORY = "rfcal-theory-v1"
SCHEMA_MC = "rfcal-mc-v1"
SCHEMA_HYPEROPT = "rfcal-hyperopt-v1"

#: Scenario presets; tau0 is a standard deviation.
PRESETS = {
    "fig1": dict(n_over_d=2.0, tau0=0.5, activation="erf", teacher_norm_sq=1.0,
                 grid=(0.5, 1.0, 2.0, 4.0)),
    "fig2": dict(n_over_d=2.0, tau0=0.5, activation="erf", teacher_norm_sq=1.0,
                 grid=(0.5, 1.0, 2.0, 4.0)),
    "appE1": dict(n_over_d=10.0, tau0=0.0, activation="erf", teacher_norm_sq=1.0,
                  grid=(0.5, 1.0, 2.0, 4.0)),
    "appE2": dict(n_over_d=20.0, tau0=0.0, activation="erf", teacher_norm_sq=50.0,
                  grid=(0.5, 1.0, 2.0, 4.0)),
}

LAMBDA_RULES = ("error", "loss", "evidence")


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, float):
        return "%.12g" % x
    return str(x)


def _write_rows(path, schema: str, columns, rows, fmt: str) -> None:
    if fmt == "json":
        payload = {"schema": schema,
                   "rows": [dict(zip(columns, r)) for r in rows]}
        text = json.dumps(payload, indent=2, default=_fmt) + "\n"
    else:
        lines = [f"# schema={schema}", ",".join(columns)]
        lines += [",".join(_fmt(v) for v in row) for row in rows]
        text = "\n".join(lines) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _scenario(preset: dict, p_over_n: float, estimator: str, lam: float) -> ScenarioConfig:
    n_over_d = preset["n_over_d"]
    return ScenarioConfig(alpha=1.0 / p_over_n, gamma=p_over_n * n_over_d,
                          tau0_sq=preset["tau0"] ** 2, lam=lam,
                          activation=preset["activation"], estimator=estimator,
                          teacher_norm_sq=preset["teacher_norm_sq"])


def _load_preset(args) -> dict:
    preset = dict(PRESETS[args.preset]) if args.preset else dict(PRESETS["fig1"])
    if getattr(args, "config", None):
        try:
            import tomllib
        except ImportError:             # Python < 3.11
            import tomli as tomllib
        with open(args.config, "rb") as fh:
            preset.update(tomllib.load(fh))
    if getattr(args, "grid", None):
        preset["grid"] = tuple(float(t) for t in args.grid.split(","))
    return preset


THEORY_COLUMNS = (
    ["p_over_n", "alpha", "gamma", "estimator", "lambda_rule", "lam",
     "m", "q", "v", "m_hat", "q_hat", "v_hat", "rho", "tau_add_sq",
     "hat_tau_sq", "gen_error", "gen_loss", "ece"]
    + [f"cal_{l:g}" for l in LEVELS_DEFAULT]
    + [f"condvar_{l:g}" for l in LEVELS_DEFAULT]
    + ["status"]
)


def _theory_rows(preset: dict, estimators, lambda_rule: str | None, lam: float):
    """One row per (grid point, estimator); warm-started along the axis."""
    rows = []
    failures = 0
    model_cache: dict[float, object] = {}
    warm: dict[str, object] = {}
    for p_over_n in preset["grid"]:
        gamma = p_over_n * preset["n_over_d"]
        if gamma not in model_cache:
            model_cache[gamma] = marchenko_pastur_model(preset["activation"], gamma)
        model = model_cache[gamma]
        bo_cfg = _scenario(preset, p_over_n, "bo", 1.0)
        ov_bo = solve_fixed_point(bo_cfg, model, init=warm.get("bo"))
        warm["bo"] = ov_bo
        for est in estimators:
            status = "ok"
            try:
                lam_rules = {"lam": lam}
                if lambda_rule:
                    crit_cfg = _scenario(preset, p_over_n, "erm", 1e-2)
                    lam_star, _, _ = hyperopt_mod.optimize_lambda(
                        lambda_rule, crit_cfg, model)
                    lam_rules = {"lam": lam_star}
                if est == "bo":
                    ov = ov_bo
                else:
                    solve_est = "erm" if est == "lap" else est
                    cfg = _scenario(preset, p_over_n, solve_est, lam_rules["lam"])
                    ov = solve_fixed_point(cfg, model, init=warm.get(solve_est))
                    warm[solve_est] = ov
                    if est == "lap":
                        from .state_evolution import laplace_overlaps
                        ov = laplace_overlaps(ov, model, lam_rules["lam"])
                rec = metrics_mod.metrics_record(ov, LEVELS_DEFAULT, ov_bo=ov_bo)
                if ov.diverged:
                    status = "interpolating"
                elif not ov.converged:
                    status = "unconverged"
                rows.append([p_over_n, 1.0 / p_over_n, gamma, est,
                             lambda_rule or "fixed",
                             lam_rules["lam"] if est != "bo" else math.nan,
                             ov.m, ov.q, ov.v, ov.m_hat, ov.q_hat, ov.v_hat,
                             ov.rho, ov.noise.tau_add_sq, ov.hat_tau_sq,
                             rec.gen_error, rec.gen_loss, rec.ece]
                            + [rec.calibration[l] for l in LEVELS_DEFAULT]
                            + [rec.cond_variance[l] for l in LEVELS_DEFAULT]
                            + [status])
            except Exception as exc:   # per-point failure: record and continue
                failures += 1
                rows.append([p_over_n, 1.0 / p_over_n, gamma, est,
                             lambda_rule or "fixed", lam]
                            + [math.nan] * (len(THEORY_COLUMNS) - 7)
                            + [f"failed:{type(exc).__name__}"])
    return rows, failures


def cmd_theory_sweep(args) -> int:
    preset = _load_preset(args)
    estimators = args.estimators.split(",") if args.estimators else []
    if not estimators:
        print("error: empty estimator list", file=sys.stderr)
        return 2
    rule = args.lambda_rule if args.lambda_rule != "none" else None
    rows, failures = _theory_rows(preset, estimators, rule, args.lam)
    _write_rows(args.out, SCHEMA_THEORY, THEORY_COLUMNS, rows, args.format)
    return 1 if failures else 0


MC_METRICS = ["gen_error", "gen_loss", "ece"] + [f"cal_{l:g}" for l in LEVELS_DEFAULT] \
    + ["m_emp", "q_emp"]
MC_COLUMNS = (["p_over_n", "estimator", "lam", "d", "trials"]
              + [f"{m}_{s}" for m in MC_METRICS for s in ("mean", "se")]
              + ["status"])


def _mc_trial(task):
    """One (grid point, estimator, trial) evaluation; top level for pickling."""
    (preset, p_over_n, est, lam, d, seed, n_test) = task
    n_over_d = preset["n_over_d"]
    n = int(round(n_over_d * d))
    ds = mc_mod.generate_dataset(d=d, n_train=n, n_val=0, n_test=n_test,
                                 gamma=p_over_n * n_over_d, tau0=preset["tau0"],
                                 activation_kind=preset["activation"],
                                 teacher_norm_sq=preset["teacher_norm_sq"], seed=seed)
    if est == "erm":
        model = mc_mod.train_erm(ds, lam)
        theta = model.theta_hat
        f_hat = mc_mod.erm_predict(ds, model, ds.U_test)
    elif est == "lap":
        model = mc_mod.train_erm(ds, lam)
        theta = model.theta_hat
        f_hat = mc_mod.laplace_predict(ds, model, ds.U_test)
    elif est == "eb":
        predict, theta, _ = mc_mod.eb_predict(ds, lam)
        f_hat = predict(ds.U_test)
    elif est == "bo":
        res = gamp_mod.run_gamp(ds, "bo", lam)
        theta = res.theta_hat
        noise = gamp_mod._make_noise(ds)
        z = ds.U_test @ theta
        s2 = np.clip(res.score_variance(ds.U_test), 0.0, None) + noise.total_sq
        from .scalar_kernel import smoothed_sigmoid
        f_hat = smoothed_sigmoid(z, s2)
    else:
        raise ValueError(f"unknown estimator {est!r}")
    emp = mc_mod.empirical_metrics(f_hat, ds.fstar(ds.X_test), levels=LEVELS_DEFAULT)
    m_emp, q_emp = mc_mod.overlaps_emp(theta, ds)
    vals = [emp.gen_error, emp.gen_loss, emp.ece] \
        + [emp.calibration[l] for l in LEVELS_DEFAULT] + [m_emp, q_emp]
    return vals


def cmd_mc_sweep(args) -> int:
    preset = _load_preset(args)
    estimators = args.estimators.split(",") if args.estimators else []
    if not estimators:
        print("error: empty estimator list", file=sys.stderr)
        return 2
    rows = []
    failures = 0
    for gi, p_over_n in enumerate(preset["grid"]):
        for est in estimators:
            tasks = [(preset, p_over_n, est, args.lam, args.d,
                      args.seed + 1000 * gi + trial, args.n_test)
                     for trial in range(args.trials)]
            try:
                if args.threads > 1:
                    with ProcessPoolExecutor(max_workers=args.threads) as pool:
                        results = list(pool.map(_mc_trial, tasks))
                else:
                    results = [_mc_trial(t) for t in tasks]
                arr = np.asarray(results, dtype=float)
                means = np.nanmean(arr, axis=0)
                if args.trials > 1:
                    ses = np.nanstd(arr, axis=0, ddof=1) / math.sqrt(args.trials)
                else:
                    ses = np.full(arr.shape[1], math.nan)
                stats = [x for pair in zip(means, ses) for x in pair]
                rows.append([p_over_n, est, args.lam, args.d, args.trials]
                            + list(stats) + ["ok"])
            except Exception as exc:
                failures += 1
                rows.append([p_over_n, est, args.lam, args.d, args.trials]
                            + [math.nan] * (2 * len(MC_METRICS))
                            + [f"failed:{type(exc).__name__}"])
    _write_rows(args.out, SCHEMA_MC, MC_COLUMNS, rows, args.format)
    return 1 if failures else 0


def cmd_hyperopt(args) -> int:
    preset = _load_preset(args)
    columns = (["p_over_n", "criterion", "lambda_star", "free_energy",
                "gen_error", "gen_loss", "ece"]
               + [f"cal_{l:g}" for l in LEVELS_DEFAULT] + ["status"])
    rows = []
    failures = 0
    for p_over_n in preset["grid"]:
        try:
            cfg = _scenario(preset, p_over_n, "erm", 1e-2)
            lam_star, ov, rec = hyperopt_mod.optimize_lambda(args.criterion, cfg)
            fval = math.nan
            if args.criterion == "evidence":
                from .state_evolution import free_energy
                fe_cfg = replace(cfg, lam=lam_star, estimator="eb")
                fval = free_energy(fe_cfg, ov)
            rows.append([p_over_n, args.criterion, lam_star, fval,
                         rec.gen_error, rec.gen_loss, rec.ece]
                        + [rec.calibration[l] for l in LEVELS_DEFAULT] + ["ok"])
        except Exception as exc:
            failures += 1
            rows.append([p_over_n, args.criterion] + [math.nan] * (len(columns) - 3)
                        + [f"failed:{type(exc).__name__}"])
    _write_rows(args.out, SCHEMA_HYPEROPT, columns, rows, args.format)
    return 1 if failures else 0


def cmd_gamp_run(args) -> int:
    preset = _load_preset(args)
    p_over_n = args.p_over_n
    n = int(round(preset["n_over_d"] * args.d))
    ds = mc_mod.generate_dataset(d=args.d, n_train=n, n_val=0, n_test=10,
                                 gamma=p_over_n * preset["n_over_d"],
                                 tau0=preset["tau0"],
                                 activation_kind=preset["activation"],
                                 teacher_norm_sq=preset["teacher_norm_sq"],
                                 seed=args.seed)
    result = gamp_mod.run_gamp(ds, args.estimator, args.lam)
    if args.out and args.out != "-":
        gamp_mod.trace_to_csv(result, args.out)
    else:
        for row in result.trace:
            print("%d,%.12g,%.12g,%.12g" % row)
    return 0 if result.converged else 1


def _read_csv(path):
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if lines and lines[0].startswith("#"):
        lines = lines[1:]
    header = lines[0].split(",")
    rows = [dict(zip(header, ln.split(","))) for ln in lines[1:]]
    return header, rows


def cmd_compare(args) -> int:
    """Join a theory CSV and an MC CSV; report max deviation in SE units."""
    _, theory = _read_csv(args.theory)
    _, mc = _read_csv(args.points)
    theory_by_key = {(r["p_over_n"], r["estimator"]): r for r in theory}
    worst = (-math.inf, None)
    report = []
    for r in mc:
        key = (r["p_over_n"], r["estimator"])
        t = theory_by_key.get(key)
        if t is None:
            continue
        for metric in ["gen_error", "gen_loss", "ece"] + [f"cal_{l:g}" for l in LEVELS_DEFAULT]:
            try:
                mean = float(r[f"{metric}_mean"])
                se = float(r[f"{metric}_se"])
                th = float(t[metric])
            except (KeyError, ValueError):
                continue
            if not (math.isfinite(mean) and math.isfinite(se) and se > 0):
                continue
            dev = abs(mean - th) / se
            report.append((key[0], key[1], metric, th, mean, se, dev))
            if dev > worst[0]:
                worst = (dev, (key, metric))
    columns = ["p_over_n", "estimator", "metric", "theory", "mc_mean", "mc_se",
               "deviation_se"]
    _write_rows(args.out, "rfcal-compare-v1", columns, report, args.format)
    if worst[1] is not None:
        print(f"max deviation: {worst[0]:.2f} SE at {worst[1]}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rfcal",
        description="Asymptotics of uncertainty metrics for random-features "
                    "classifiers: theory sweeps, Monte Carlo, GAMP, hyperopt.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mc=False):
        p.add_argument("--config", help="TOML file overriding preset keys")
        p.add_argument("--preset", choices=sorted(PRESETS), default="fig1")
        p.add_argument("--grid", help="comma-separated p/n grid override")
        p.add_argument("--out", default="-", help="output path (default stdout)")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        if mc:
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--trials", type=int, default=30)
            p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("theory-sweep", help="asymptotic curves on a p/n grid")
    common(p)
    p.add_argument("--estimators", default="erm,bo,eb,lap")
    p.add_argument("--lam", type=float, default=1e-2)
    p.add_argument("--lambda-rule", choices=LAMBDA_RULES + ("none",), default="none")
    p.set_defaults(func=cmd_theory_sweep)

    p = sub.add_parser("mc-sweep", help="finite-size points on a p/n grid")
    common(p, mc=True)
    p.add_argument("--estimators", default="erm,eb")
    p.add_argument("--lam", type=float, default=1e-2)
    p.add_argument("--d", type=int, default=200)
    p.add_argument("--n-test", type=int, default=20000)
    p.set_defaults(func=cmd_mc_sweep)

    p = sub.add_parser("hyperopt", help="λ selection per grid point")
    common(p)
    p.add_argument("--criterion", choices=LAMBDA_RULES, default="error")
    p.set_defaults(func=cmd_hyperopt)

    p = sub.add_parser("gamp-run", help="single GAMP trace")
    common(p)
    p.add_argument("--estimator", choices=("erm", "eb", "bo"), default="erm")
    p.add_argument("--lam", type=float, default=1e-2)
    p.add_argument("--d", type=int, default=200)
    p.add_argument("--p-over-n", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gamp_run)

    p = sub.add_parser("compare", help="join theory and MC CSVs, max |Δ| in SE units")
    p.add_argument("--theory", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--out", default="-")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:       # pragma: no cover
        return 1


if __name__ == "__main__":       # pragma: no cover
    sys.exit(main())
