"""Command-line front end: ``covshift-cp {predict,bounds,simulate,dkw,stability-audit}``.

Every subcommand accepts ``--config FILE``, an INI file whose ``[common]``
and ``[<subcommand>]`` sections hold ``flag = value`` pairs using the long
flag names (dashes or underscores). Flags given on the command line win.
Exit status is 2 for configuration errors and 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .bounds import THEOREMS, BoundInputs, BoundResult, evaluate, liang_comparison_bound, ridge_inputs
from .core import DataError, Dataset, RngStream, load_csv
from .experiment import (
    bounded_tilt_ratio,
    dkw_study,
    make_scenario_bounded,
    make_scenario_second_moment,
    run_experiment,
)
from .methods import METHODS, FullConformalPredictor, MethodConfig, default_grid, fit_method
from .ridge import RidgeConfig, audit_uniform_stability, fit_loo, stability_profile

OUTPUT_DIR_ENV = "COVSHIFT_CP_OUTPUT_DIR"
BOUND_NAMES = tuple(THEOREMS) + ("bian",)


class ConfigError(Exception):
    """Invalid user input; maps to exit status 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common")
    g.add_argument("--config", help="INI file of record; flags override it")
    g.add_argument("--seed", type=int, default=0, help="master seed for all randomness")
    g.add_argument("--threads", type=int, default=1, help="worker threads (output does not depend on it)")
    g.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    g.add_argument("--output-dir", help=f"output directory (default ${OUTPUT_DIR_ENV} or .)")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="covshift-cp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("predict", help="fit a conformal method on a CSV and predict at query points")
    _common(p)
    p.add_argument("--data", required=True, help="CSV with header x1..xp,y")
    p.add_argument("--method", choices=METHODS, default="split")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--x", action="append", type=_floats, required=True, help="query point, comma-separated; repeatable")
    p.add_argument("--weighted", action="store_true", help="use likelihood-ratio weights")
    p.add_argument("--gamma", type=float, default=0.0, help="tilt of the bounded ratio (1+g t)/(1-g t) on x1")
    p.add_argument("--lam", type=float, default=0.1, help="ridge penalty")
    p.add_argument("--b", type=float, help="feature-norm bound (default: data maximum)")
    p.add_argument("--I", dest="I", type=float, help="response bound (default: data maximum)")
    p.add_argument("--epsilon", type=float, default=0.0, help="inflation for jackknife_plus_inflated")
    p.add_argument("--folds", type=int, default=0)
    p.add_argument("--n-cal", type=int, default=0, help="calibration size for split (default n/2)")
    p.add_argument("--grid-size", type=int, default=257, help="candidate grid for full conformal")
    p.add_argument("--out", help="also write results to this CSV")

    p = sub.add_parser("bounds", help="evaluate coverage bounds with a term breakdown")
    _common(p)
    p.add_argument("--theorem", action="append", choices=BOUND_NAMES, help="repeatable; default split")
    p.add_argument("--all", action="store_true", help="evaluate every bound at shared inputs")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--budget", type=float, help="total failure budget split as epsilon = delta = budget/2")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--p", type=int, default=1)
    p.add_argument("--B", dest="B", type=float, default=1.0)
    p.add_argument("--K2", dest="K2", type=float, default=1.0)
    p.add_argument("--C", dest="C", type=float, default=1.0)
    p.add_argument("--L", dest="L", type=float, default=1.0)
    p.add_argument("--L-Q", dest="L_Q", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=1.0, help="inflation for the liang comparison bound")
    p.add_argument("--psi-constant", type=float, default=0.5)
    p.add_argument("--folds", type=int, help="K for the bian bound (default n/m)")
    p.add_argument("--lam", type=float, help="ridge penalty; fills c_n, kappa1, kappa2 from the ridge profile")
    p.add_argument("--b", type=float, default=1.0)
    p.add_argument("--I", dest="I", type=float, default=1.0)
    p.add_argument("--kappa1", type=float, default=1.0, help="used when --lam is absent")
    p.add_argument("--kappa2", type=float, default=1.0, help="used when --lam is absent")

    p = sub.add_parser("simulate", help="replicated Monte Carlo miscoverage experiment")
    _common(p)
    p.add_argument("--methods", type=_names, default=["split"], help="comma-separated method names")
    p.add_argument("--weighted", action="store_true", help="weight split/full conformal")
    p.add_argument("--scenario", choices=("bounded", "second_moment"), default="bounded")
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--k-target", type=float, default=1.05)
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--noise-scale", type=float, default=0.5)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--R", dest="R", type=int, default=100)
    p.add_argument("--n-test", type=int, default=10000)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--n-cal", type=int, default=0)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--lam", type=float, default=0.01)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--C", dest="C", type=float, default=1.0)
    p.add_argument("--L-Q", dest="L_Q", type=float, default=1.0)
    p.add_argument("--stem", default="simulate", help="output file name stem")
    p.add_argument("--histogram", action="store_true", help="also write P_e histogram CSVs")

    p = sub.add_parser("dkw", help="sup-deviation study of the weighted ECDF")
    _common(p)
    p.add_argument("--lemma", choices=("a1", "a2", "a3"), default="a1")
    p.add_argument("--B", dest="B", type=float, help="ratio bound; sets gamma = (B-1)/(B+1)")
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--k-target", type=float, default=1.05, help="second-moment bound for --lemma a2")
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--ns", type=_ints, default=[400, 1600])
    p.add_argument("--R", dest="R", type=int, default=200)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--C", dest="C", type=float, default=1.0)

    p = sub.add_parser("stability-audit", help="empirical check of ridge removal stability")
    _common(p)
    p.add_argument("--ns", type=_ints, default=[20, 80])
    p.add_argument("--lams", type=_floats, default=[0.1, 1.0])
    p.add_argument("--datasets", type=int, default=50, help="datasets per (n, lam)")
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--probes", type=int, default=64)
    return parser


def _file_args(path: str, command: str) -> list[str]:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep --R, --B etc. case-sensitive
    try:
        read = cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not read:
        raise ConfigError(f"config file not found: {path}")
    out = []
    for section in ("common", command):
        if not cp.has_section(section):
            continue
        for key, value in cp.items(section):
            flag = "--" + key.replace("_", "-")
            if value.strip().lower() in ("true", "yes", "on"):
                out.append(flag)
            elif value.strip().lower() in ("false", "no", "off"):
                continue
            else:
                out.extend([flag, value])
    return out


def parse_args(argv) -> argparse.Namespace:
    """Parse ``argv`` with config-file values spliced in ahead of the flags."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        i = argv.index(args.command)
        merged = argv[: i + 1] + _file_args(args.config, args.command) + argv[i + 1 :]
        args = parser.parse_args(merged)
    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    return args


def _effective(args: argparse.Namespace, drop=("config", "threads", "json", "output_dir")) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in drop}


def _outdir(args) -> Path:
    return Path(args.output_dir or os.environ.get(OUTPUT_DIR_ENV) or ".")


def _json_real(v: float):
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def _fmt(v: float) -> str:
    return "inf" if v == math.inf else "-inf" if v == -math.inf else f"{v:.6g}"


def _config(fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except (ValueError, DataError, FileNotFoundError) as exc:
        raise ConfigError(str(exc)) from None


def _membership_runs(grid: np.ndarray, member: np.ndarray) -> list[tuple[float, float]]:
    runs, start = [], None
    for k, inside in enumerate(member):
        if inside and start is None:
            start = k
        if not inside and start is not None:
            runs.append((float(grid[start]), float(grid[k - 1])))
            start = None
    if start is not None:
        runs.append((float(grid[start]), float(grid[-1])))
    return runs


def cmd_predict(args) -> int:
    data = _config(_load_any_p, args.data, args.b, args.I)
    method = _config(
        MethodConfig,
        args.alpha,
        args.method,
        weighted=args.weighted,
        epsilon=args.epsilon,
        folds=args.folds,
        n_cal=args.n_cal,
        grid_size=args.grid_size,
    )
    if method.method == "cv_plus" and data.n % method.folds:
        raise ConfigError(f"folds must divide n (n={data.n}, folds={method.folds})")
    if method.method == "split" and not 0 <= method.n_cal < data.n:
        raise ConfigError("--n-cal must be smaller than n")
    for x in args.x:
        if len(x) != data.p:
            raise ConfigError(f"query point has {len(x)} coordinates, expected {data.p}")
    ratio = _config(bounded_tilt_ratio, args.gamma, data.p, data.b) if method.weighted else None
    if method.weighted and args.gamma == 0:
        print("warning: --gamma 0 gives unit weights", file=sys.stderr)
    config = _config(RidgeConfig, args.lam, data.p, data.b, data.I)
    model = fit_method(method, data, config, ratio, RngStream(args.seed))
    rows = []
    for x in args.x:
        xa = np.asarray(x, dtype=np.float64)
        if isinstance(model, FullConformalPredictor):
            pset = model.predict_set(xa, default_grid(data.I, method.grid_size))
            pieces = _membership_runs(pset.grid, pset.membership)
        else:
            iv = model.interval(xa)
            pieces = [] if iv.is_empty else [(iv.lower, iv.upper)]
        rows.append((x, pieces))
    if args.json:
        preds = [{"x": x, "intervals": [[_json_real(a), _json_real(b)] for a, b in pieces]} for x, pieces in rows]
        print(json.dumps({"config": _effective(args), "method": method.label, "predictions": preds}, indent=2))
    else:
        for x, pieces in rows:
            xs = ",".join(_fmt(v) for v in x)
            body = " U ".join(f"[{_fmt(a)}, {_fmt(b)}]" for a, b in pieces) or "empty"
            print(f"x=({xs}) {method.label} alpha={method.alpha:g}: {body}")
    if args.out:
        _write_predictions_csv(args.out, rows)
    return 0


def _load_any_p(path, b, I):  # noqa: E741
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
    if not header.strip():
        raise DataError("empty dataset")
    p = len(header.split(",")) - 1
    if p < 1:
        raise DataError("need at least one feature column and a response column")
    if b is None or I is None:
        raw = load_csv(path, p, math.inf, math.inf)
        b = b if b is not None else float(np.max(np.linalg.norm(raw.X, axis=1))) or 1.0
        I = I if I is not None else float(np.max(np.abs(raw.y))) or 1.0  # noqa: E741
    return load_csv(path, p, b, I)


def _write_predictions_csv(path, rows) -> None:
    """One row per interval piece; an empty set writes no rows for its point."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "lower", "upper"])
        for x, pieces in rows:
            xs = ";".join(repr(v) for v in x)
            for lo, hi in pieces:
                w.writerow([xs, repr(lo), repr(hi)])


def _bound_inputs(args) -> BoundInputs:
    kw = dict(
        alpha=args.alpha,
        delta=args.delta,
        epsilon=args.epsilon,
        n=args.n,
        m=args.m,
        p=args.p,
        B=args.B,
        K2=args.K2,
        C=args.C,
        L=args.L,
        L_Q=args.L_Q,
        gamma=args.gamma,
    )
    if args.budget is not None:
        kw["delta"] = kw["epsilon"] = args.budget / 2
    if args.lam is not None:
        return ridge_inputs(RidgeConfig(args.lam, args.p, args.b, args.I), **kw)
    return BoundInputs(kappa1=args.kappa1, kappa2=args.kappa2, **kw)


def _bound_row(r: BoundResult) -> str:
    terms = ", ".join(f"{k}={v:.6g}" for k, v in r.terms.items())
    flag = "  VACUOUS" if r.vacuous else ""
    line = f"{r.name:<32} threshold={r.miscoverage_threshold:.6g}  failure={r.failure_probability:.6g}  [{terms}]{flag}"
    if "balanced_m" in r.extras:
        e = r.extras
        line += (
            f"\n{'':<32} balanced m={e['balanced_m']} (n^(2/5)): threshold={e['balanced_threshold']:.6g}"
            f"  failure={e['balanced_failure_probability']:.6g}  rate n^(-1/5)={e['balanced_rate']:.6g}"
        )
    return line


def cmd_bounds(args) -> int:
    inp = _config(_bound_inputs, args)
    names = list(BOUND_NAMES) if args.all else (args.theorem or ["split"])
    results = []
    for name in names:
        try:
            if name == "liang":
                results.append(liang_comparison_bound(inp, args.psi_constant))
            else:
                results.extend(evaluate([name], inp, args.folds))
        except ValueError as exc:
            if not args.all:
                raise ConfigError(f"{name}: {exc}") from None
            print(f"skipping {name}: {exc}", file=sys.stderr)
    if args.json:
        print(json.dumps({"config": _effective(args), "inputs": inp.to_dict(), "bounds": [r.to_dict() for r in results]}, indent=2))
    else:
        for r in results:
            print(_bound_row(r))
    return 0


def _scenario(args):
    if args.scenario == "bounded":
        return make_scenario_bounded(args.gamma, d=args.d, noise_scale=args.noise_scale)
    return make_scenario_second_moment(args.k_target, d=args.d, noise_scale=args.noise_scale)


def _attached_bounds(method: MethodConfig, args, scenario, config: RidgeConfig, n_cal: int) -> list:
    shared = dict(alpha=args.alpha, delta=args.delta, epsilon=args.delta, n=args.n, C=args.C, L_Q=args.L_Q)
    bound_value = scenario.ratio.bound_value
    if method.method == "split":
        if scenario.ratio.regime == "second_moment":
            return evaluate(["split_second_moment"], BoundInputs(m=n_cal, K2=bound_value, **shared))
        return evaluate(["split"], BoundInputs(m=n_cal, B=bound_value if method.weighted else 1.0, **shared))
    if scenario.ratio.regime != "bounded":
        return []
    inp = ridge_inputs(config, m=max(1, args.n // max(method.folds, 1)), B=bound_value, **shared)
    if method.method in ("jackknife_plus", "jaw", "jackknife_plus_inflated"):
        return evaluate(["jackknife_shift"], inp)
    if method.method == "cv_plus":
        return evaluate(["cv_plus"], inp)
    if method.method == "full":
        return evaluate(["full_shift"], inp)
    return []


def cmd_simulate(args) -> int:
    scenario = _config(_scenario, args)
    config = _config(RidgeConfig, args.lam, scenario.p, scenario.b, scenario.I)
    plans = []
    for name in args.methods:
        n_cal = args.n_cal or args.n // 2
        method = _config(
            MethodConfig,
            args.alpha,
            name,
            weighted=args.weighted,
            epsilon=args.epsilon,
            folds=args.folds if name == "cv_plus" else 0,
            n_cal=n_cal if name == "split" else 0,
        )
        if name == "cv_plus" and args.n % args.folds:
            raise ConfigError(f"folds must divide n (n={args.n}, folds={args.folds})")
        if args.R < 1 or args.n_test < 1 or args.n < 2:
            raise ConfigError("need R >= 1, n-test >= 1 and n >= 2")
        plans.append((method, _config(_attached_bounds, method, args, scenario, config, n_cal)))
    outdir = _outdir(args)
    outdir.mkdir(parents=True, exist_ok=True)
    reports = []
    for method, bounds in plans:
        rep = run_experiment(
            method, scenario, args.n, args.R, args.n_test, config, bounds, master_seed=args.seed, threads=args.threads
        )
        reports.append(rep)
        stem = f"{args.stem}_{method.label}"
        rep.write_trials_csv(outdir / f"{stem}_trials.csv")
        if args.histogram:
            rep.write_histogram_csv(outdir / f"{stem}_hist.csv")
        q = rep.pe_deciles
        exc = " ".join(f"exceed[{k}]={v:.3g}" for k, v in rep.exceedance.items())
        print(
            f"{method.label}: mean_pe={rep.mean_pe:.4f} (se {rep.aggregate_stderr:.4f}) "
            f"q50={q['0.5']:.4f} q90={q['0.9']:.4f} {exc}".rstrip()
        )
    doc = {"config": _effective(args), "reports": [r.to_dict() for r in reports]}
    (outdir / f"{args.stem}.json").write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    if args.json:
        print(json.dumps(doc, indent=2, allow_nan=False))
    return 0


def cmd_dkw(args) -> int:
    if args.B is not None:
        if args.B < 1:
            raise ConfigError(f"B must be >= 1, got {args.B}")
        args.gamma = (args.B - 1.0) / (args.B + 1.0)
    if args.lemma == "a2":
        scenario = _config(make_scenario_second_moment, args.k_target, d=args.d)
    else:
        scenario = _config(make_scenario_bounded, args.gamma, d=args.d)
    if scenario.ratio.regime == "unweighted":
        raise ConfigError("the DKW study needs a genuine shift (B > 1 or k-target > 1)")
    if len(args.ns) < 1 or min(args.ns) < 1 or args.R < 1:
        raise ConfigError("need positive sample sizes and R >= 1")
    study = dkw_study(scenario, args.ns, args.R, args.delta, args.C, args.lemma, args.seed, args.threads)
    study["config"] = _effective(args)
    if args.json:
        print(json.dumps(study, indent=2, allow_nan=False))
        return 0
    print(f"lemma {args.lemma}, ratio bound {scenario.ratio.bound_value:.6g}, delta={args.delta:g}, C={args.C:g}, R={args.R}")
    print(f"{'n':>8} {'median_sup_dev':>15} {'threshold':>12} {'exceedance':>11}")
    for r in study["rows"]:
        print(f"{r['n']:>8} {r['median_deviation']:>15.6g} {_fmt(r['threshold']):>12} {r['exceedance']:>11.4g}")
    for k, ratio in enumerate(study["median_ratios"]):
        print(f"median ratio n={study['rows'][k]['n']} / n={study['rows'][k + 1]['n']}: {ratio:.4f}")
    return 0


def cmd_stability_audit(args) -> int:
    if args.datasets < 1 or args.probes < 1 or min(args.ns) < 2 or min(args.lams) <= 0:
        raise ConfigError("need datasets >= 1, probes >= 1, n >= 2 and lam > 0")
    scenario = make_scenario_bounded(0.5, d=args.d)
    rows, total_violations = [], 0
    for i, n in enumerate(args.ns):
        for j, lam in enumerate(args.lams):
            config = RidgeConfig(lam, scenario.p, scenario.b, scenario.I)
            half_c = stability_profile(config).c(n) / 2.0
            worst, violations, loo_gap = 0.0, 0, 0.0
            for k in range(args.datasets):
                stream = RngStream(args.seed, i).derive(j).derive(k)
                data = scenario.sample_P(stream.derive(0), n)
                probes = _ball_probes(stream.derive(1), args.probes, scenario.p, scenario.b)
                change = audit_uniform_stability(data, config, n, probes, stream.derive(2))
                violations += change > half_c
                worst = max(worst, change / half_c)
                idx = k % n
                loo_gap = max(
                    loo_gap,
                    float(np.max(np.abs(fit_loo(data, config, idx).beta - fit_loo(data, config, idx, "naive").beta))),
                )
            total_violations += violations
            rows.append(
                {"n": n, "lam": lam, "half_c_n": half_c, "worst_ratio": worst, "violations": violations, "loo_max_gap": loo_gap}
            )
    if args.json:
        print(json.dumps({"config": _effective(args), "rows": rows, "violations": total_violations}, indent=2))
    else:
        print(f"{'n':>5} {'lam':>6} {'c_n/2':>10} {'worst/(c_n/2)':>14} {'violations':>10} {'loo_gap':>10}")
        for r in rows:
            print(
                f"{r['n']:>5} {r['lam']:>6g} {r['half_c_n']:>10.4g} {r['worst_ratio']:>14.4g}"
                f" {r['violations']:>10} {r['loo_max_gap']:>10.2g}"
            )
    return 1 if total_violations else 0


def _ball_probes(rng: RngStream, count: int, p: int, b: float) -> np.ndarray:
    """Points in the radius-``b`` ball, half of them on its surface."""
    g = rng.generator()
    v = g.standard_normal((count, p))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    radii = np.where(np.arange(count) % 2 == 0, 1.0, g.random(count) ** (1.0 / p))
    return b * v * radii[:, None]


COMMANDS = {
    "predict": cmd_predict,
    "bounds": cmd_bounds,
    "simulate": cmd_simulate,
    "dkw": cmd_dkw,
    "stability-audit": cmd_stability_audit,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
