"""Covariate-shift scenarios and Monte Carlo estimates of training-conditional miscoverage.

A scenario draws training data from ``P = P_X x P_{Y|X}`` and test data from
``Q = Q_X x P_{Y|X}`` with the same conditional sampler, and knows its
likelihood ratio ``dQ_X/dP_X`` exactly. :func:`run_experiment` repeats
"draw a dataset, fit a method, estimate its miscoverage on fresh Q draws"
``R`` times and compares the spread of miscoverage against bound thresholds.

Trial ``i`` draws from ``RngStream(master_seed, i)`` only, so reports do not
depend on the number of worker threads.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from .bounds import BoundResult
from .core import Dataset, LikelihoodRatio, RngStream
from .methods import MethodConfig, fit_method
from .ridge import RidgeConfig, fit, loo_coefficients
from .weighted_ecdf import (
    build_hat_ecdf,
    dkw_alternative,
    dkw_bounded_ratio,
    dkw_second_moment,
    sup_deviation,
)

__all__ = [
    "PE_QUANTILE_LEVELS",
    "ExperimentReport",
    "ShiftScenario",
    "TrialResult",
    "beta_oracle_check",
    "bounded_tilt_ratio",
    "dkw_threshold",
    "dkw_study",
    "estimate_nu",
    "estimate_pe",
    "make_scenario_bounded",
    "make_scenario_second_moment",
    "run_experiment",
    "write_report",
]

PE_QUANTILE_LEVELS = (0.1, 0.25, 0.5, 0.75, 0.9)


@dataclass(frozen=True)
class ShiftScenario:
    """Data-generating process with a known covariate likelihood ratio.

    ``sample_P(rng, count)`` returns a :class:`Dataset`; ``sample_Q_x(rng, count)``
    returns an ``(count, p)`` array; ``sample_y_given_x(rng, X)`` draws
    responses and is the same conditional used inside ``sample_P``.
    """

    name: str
    p: int
    b: float
    I: float  # noqa: E741
    sample_P: Callable[[RngStream, int], Dataset]
    sample_Q_x: Callable[[RngStream, int], np.ndarray]
    sample_y_given_x: Callable[[RngStream, np.ndarray], np.ndarray]
    ratio: LikelihoodRatio
    true_score_cdf_Q: Optional[Callable[[np.ndarray], np.ndarray]] = None
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "p": self.p,
            "b": self.b,
            "I": self.I,
            "regime": self.ratio.regime,
            "ratio_bound": self.ratio.bound_value,
            **self.params,
        }


def _rejection(g: np.random.Generator, count: int, propose, accept_prob) -> np.ndarray:
    """Exact rejection sampling in batches; ``accept_prob`` maps proposals to [0, 1]."""
    out, have = [], 0
    while have < count:
        need = count - have
        cand = propose(g, 2 * need + 16)
        keep = cand[g.random(cand.shape[0]) < accept_prob(cand)]
        out.append(keep[:need])
        have += min(need, keep.shape[0])
    return np.concatenate(out)[:count]


class _LinearToyModel:
    """Shared pieces of the synthetic scenarios.

    Features fill the cube ``[-s, s]^d`` with ``s = b / sqrt(d)``, so every
    point lies in the ball of radius ``b``. Only ``t = x_1 / s`` in ``[-1, 1]``
    matters: ``y = signal * t + e`` with ``e`` uniform on
    ``[-sigma(t), sigma(t)]`` and ``sigma(t) = noise_scale * (0.2 + 0.4 (1 + t))``.
    The noise grows with ``t``, so moving test mass toward ``t = 1`` hurts
    an unweighted method.
    """

    def __init__(self, d: int, b: float, noise_scale: float, signal: float):
        if d < 1 or not (b > 0 and noise_scale > 0 and signal >= 0):
            raise ValueError("need d >= 1, b > 0, noise_scale > 0, signal >= 0")
        self.d, self.b, self.noise_scale, self.signal = d, b, noise_scale, signal
        self.side = b / math.sqrt(d)
        self.I = signal + noise_scale

    def sigma(self, t):
        return self.noise_scale * (0.2 + 0.4 * (1.0 + t))

    def features_from_t(self, g: np.random.Generator, t: np.ndarray) -> np.ndarray:
        X = g.uniform(-self.side, self.side, size=(t.shape[0], self.d))
        X[:, 0] = self.side * t
        return X

    def t_of(self, X) -> np.ndarray:
        return np.clip(np.asarray(X)[:, 0] / self.side, -1.0, 1.0)

    def y_given_x(self, g: np.random.Generator, X: np.ndarray) -> np.ndarray:
        t = self.t_of(X)
        e = g.uniform(-1.0, 1.0, size=t.shape[0]) * self.sigma(t)
        return np.clip(self.signal * t + e, -self.I, self.I)

    def abs_y_cdf(self, q_density_t: Callable[[np.ndarray], np.ndarray], n_grid: int = 4097):
        """CDF of ``|y|`` (the score of the zero model) when ``t`` has the given density.

        Tabulated once by composite Gauss-Legendre integration over ``t`` and
        interpolated monotonically in ``u``.
        """
        nodes, wts = np.polynomial.legendre.leggauss(8)
        edges = np.linspace(-1.0, 1.0, 2001)
        half = np.diff(edges)[:, None] / 2.0
        mid = (edges[:-1, None] + edges[1:, None]) / 2.0
        t = (mid + half * nodes[None, :]).ravel()
        w = (half * wts[None, :]).ravel() * q_density_t(t)
        a, sig = self.signal * t, self.sigma(t)
        u = np.linspace(0.0, self.I, n_grid)
        F = np.empty(n_grid)
        for k0 in range(0, n_grid, 256):
            uu = u[k0 : k0 + 256, None]
            cover = np.clip(np.minimum(uu, a + sig) - np.maximum(-uu, a - sig), 0.0, None) / (2.0 * sig)
            F[k0 : k0 + 256] = cover @ w
        F = np.clip(F / F[-1], 0.0, 1.0)
        F[0] = 0.0
        interp = PchipInterpolator(u, np.maximum.accumulate(F))
        top = self.I

        def cdf(x):
            x = np.asarray(x, dtype=np.float64)
            out = np.where(x >= top, 1.0, 0.0)
            inside = (x >= 0) & (x < top)
            out[inside] = np.clip(interp(x[inside]), 0.0, 1.0)
            return out

        return cdf


def _make_sampler_P(model: _LinearToyModel, t_sampler):
    def sample_P(rng: RngStream, count: int) -> Dataset:
        g = rng.generator()
        X = model.features_from_t(g, t_sampler(g, count))
        return Dataset(X, model.y_given_x(g, X), model.b, model.I)

    return sample_P


def _make_y_sampler(model: _LinearToyModel):
    def sample_y_given_x(rng: RngStream, X) -> np.ndarray:
        return model.y_given_x(rng.generator(), np.atleast_2d(X))

    return sample_y_given_x


def bounded_tilt_ratio(gamma: float, d: int, b: float) -> LikelihoodRatio:
    """``(1 + gamma t)/(1 - gamma t)`` with ``t = x_1 sqrt(d) / b`` clipped to [-1, 1]."""
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    if gamma == 0:
        return LikelihoodRatio.unweighted()
    side = b / math.sqrt(d)

    def ratio_fn(X):
        t = np.clip(np.atleast_2d(np.asarray(X, dtype=np.float64))[:, 0] / side, -1.0, 1.0)
        return (1.0 + gamma * t) / (1.0 - gamma * t)

    return LikelihoodRatio.bounded(ratio_fn, (1.0 + gamma) / (1.0 - gamma))


def make_scenario_bounded(
    gamma: float, d: int = 3, b: float = 1.0, noise_scale: float = 0.5, signal: float = 0.5
) -> ShiftScenario:
    """Bounded-ratio shift: P tilts toward ``t = -1`` and Q toward ``t = +1``.

    ``P`` has ``t``-density ``(1 - gamma t)/2`` and ``Q`` has ``(1 + gamma t)/2``
    (other coordinates uniform), so ``dQ/dP = (1 + gamma t)/(1 - gamma t)`` with
    supremum ``B = (1 + gamma)/(1 - gamma)`` attained at ``t = 1``. Q is drawn
    by rejection from P with acceptance ``ratio / B``.
    """
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    model = _LinearToyModel(d, b, noise_scale, signal)
    B = (1.0 + gamma) / (1.0 - gamma)
    ratio = bounded_tilt_ratio(gamma, d, b)

    def t_P(g, count):
        return _rejection(
            g, count, lambda g, k: g.uniform(-1.0, 1.0, k), lambda t: (1.0 - gamma * t) / (1.0 + gamma)
        )

    def sample_Q_x(rng: RngStream, count: int) -> np.ndarray:
        g = rng.generator()

        def propose(g, k):
            return model.features_from_t(g, t_P(g, k))

        return _rejection(g, count, propose, lambda X: ratio(X) / B)

    return ShiftScenario(
        name="bounded",
        p=d,
        b=b,
        I=model.I,
        sample_P=_make_sampler_P(model, t_P),
        sample_Q_x=sample_Q_x,
        sample_y_given_x=_make_y_sampler(model),
        ratio=ratio,
        true_score_cdf_Q=model.abs_y_cdf(lambda t: (1.0 + gamma * t) / 2.0),
        params={"gamma": gamma, "d": d, "noise_scale": noise_scale, "signal": signal, "B": B},
    )


def make_scenario_second_moment(
    k_target: float, d: int = 3, b: float = 1.0, noise_scale: float = 0.5, signal: float = 0.5
) -> ShiftScenario:
    """Unbounded but square-integrable ratio with ``||dQ/dP||_{P,2} = k_target`` exactly.

    Under P, ``u = (1 + t)/2`` is uniform; under Q it has density
    ``(1 - a) u^{-a}`` with ``a`` solving ``(1 - a)^2 / (1 - 2a) = k_target^2``,
    so the ratio blows up at ``t = -1`` yet has finite second moment.
    """
    if not (math.isfinite(k_target) and k_target >= 1):
        raise ValueError("infeasible k_target: need a finite value >= 1 (E_P[(dQ/dP)^2] >= 1 always)")
    D = k_target**2 - 1.0
    a = -D + math.sqrt(D * D + D)
    if not 0 <= a < 0.5:
        raise ValueError(f"infeasible k_target={k_target}")
    model = _LinearToyModel(d, b, noise_scale, signal)
    tiny = np.finfo(np.float64).tiny

    def ratio_fn(X):
        u = np.maximum((model.t_of(X) + 1.0) / 2.0, tiny)
        return (1.0 - a) * u ** (-a)

    ratio = LikelihoodRatio.second_moment(ratio_fn, k_target) if a > 0 else LikelihoodRatio.unweighted()

    def t_P(g, count):
        return g.uniform(-1.0, 1.0, count)

    def sample_Q_x(rng: RngStream, count: int) -> np.ndarray:
        g = rng.generator()
        u = g.random(count) ** (1.0 / (1.0 - a))
        return model.features_from_t(g, 2.0 * u - 1.0)

    def q_t(t):
        u = np.maximum((t + 1.0) / 2.0, tiny)
        return (1.0 - a) * u ** (-a) / 2.0

    return ShiftScenario(
        name="second_moment",
        p=d,
        b=b,
        I=model.I,
        sample_P=_make_sampler_P(model, t_P),
        sample_Q_x=sample_Q_x,
        sample_y_given_x=_make_y_sampler(model),
        ratio=ratio,
        true_score_cdf_Q=model.abs_y_cdf(q_t),
        params={"k_target": k_target, "exponent": a, "d": d, "noise_scale": noise_scale, "signal": signal},
    )


@dataclass(frozen=True)
class TrialResult:
    trial_id: int
    pe_estimate: float
    pe_stderr: float
    median_width: float
    seed: int

    def to_dict(self) -> dict:
        w = self.median_width
        return {
            "trial_id": self.trial_id,
            "seed": self.seed,
            "pe": self.pe_estimate,
            "pe_stderr": self.pe_stderr,
            "median_width": w if math.isfinite(w) else "inf",
        }


def estimate_pe(predictor, scenario: ShiftScenario, n_test: int, rng: RngStream, width_points: Optional[int] = None) -> TrialResult:
    """Fraction of ``n_test`` fresh Q draws whose response falls outside the prediction set.

    ``predictor`` either has ``covers(X, y)`` (and optionally ``widths(X)``),
    or is a callable returning ``(lower, upper)`` arrays.
    """
    if n_test < 1:
        raise ValueError("n_test must be positive")
    X = scenario.sample_Q_x(rng.derive(0), n_test)
    y = scenario.sample_y_given_x(rng.derive(1), X)
    Xw = X if width_points is None else X[:width_points]
    if hasattr(predictor, "covers"):
        covered = np.asarray(predictor.covers(X, y), dtype=bool)
        widths = predictor.widths(Xw) if hasattr(predictor, "widths") else np.array([np.nan])
    else:
        lo, hi = predictor(X)
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        covered = (lo <= y) & (y <= hi)
        widths = np.where(lo > hi, 0.0, hi - lo)[: Xw.shape[0]]
    pe = 1.0 - float(np.mean(covered))
    return TrialResult(
        trial_id=0,
        pe_estimate=pe,
        pe_stderr=math.sqrt(pe * (1.0 - pe) / n_test),
        median_width=float(np.median(widths)),
        seed=rng.master_seed,
    )


@dataclass
class ExperimentReport:
    config: dict
    trials: list
    bounds: list = field(default_factory=list)
    wall_time_s: float = 0.0

    @property
    def pe(self) -> np.ndarray:
        return np.array([t.pe_estimate for t in self.trials])

    @property
    def pe_deciles(self) -> dict:
        pe = self.pe
        return {f"{q:g}": float(np.quantile(pe, q)) for q in PE_QUANTILE_LEVELS}

    @property
    def exceedance(self) -> dict:
        pe = self.pe
        return {b.name: float(np.mean(pe > b.miscoverage_threshold)) for b in self.bounds}

    @property
    def mean_pe(self) -> float:
        return float(np.mean(self.pe))

    @property
    def aggregate_stderr(self) -> float:
        """Standard error of the mean miscoverage across trials."""
        pe = self.pe
        if pe.size < 2:
            return float(self.trials[0].pe_stderr)
        return float(np.std(pe, ddof=1) / math.sqrt(pe.size))

    def to_dict(self, include_wall_time: bool = True) -> dict:
        d = {
            "config": self.config,
            "trials": [t.to_dict() for t in self.trials],
            "pe_deciles": self.pe_deciles,
            "mean_pe": self.mean_pe,
            "exceedance": self.exceedance,
            "bounds": [b.to_dict() for b in self.bounds],
        }
        if include_wall_time:
            d["wall_time_s"] = self.wall_time_s
        return d

    def to_json(self, include_wall_time: bool = True) -> str:
        return json.dumps(self.to_dict(include_wall_time), indent=2, allow_nan=False)

    def write_trials_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["trial_id", "seed", "pe", "pe_stderr", "median_width"])
            for t in self.trials:
                w.writerow([t.trial_id, t.seed, repr(t.pe_estimate), repr(t.pe_stderr), repr(t.median_width)])

    def write_histogram_csv(self, path, bins: int = 20) -> None:
        counts, edges = np.histogram(self.pe, bins=bins, range=(0.0, max(1e-12, float(self.pe.max()))))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "count"])
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def _run_trial(i, method, scenario, n, n_test, config, master_seed, width_points) -> TrialResult:
    stream = RngStream(master_seed, i)
    try:
        data = scenario.sample_P(stream.derive(0), n)
        predictor = fit_method(method, data, config, scenario.ratio, stream.derive(1))
        res = estimate_pe(predictor, scenario, n_test, stream.derive(2), width_points)
    except Exception as exc:
        raise RuntimeError(f"trial {i} failed (master_seed={master_seed}, stream_id={i}): {exc}") from exc
    return TrialResult(i, res.pe_estimate, res.pe_stderr, res.median_width, master_seed)


def run_experiment(
    method: MethodConfig,
    scenario: ShiftScenario,
    n: int,
    R: int,
    n_test: int,
    config: RidgeConfig,
    bounds: Sequence[BoundResult] = (),
    master_seed: int = 0,
    threads: int = 1,
    width_points: Optional[int] = 200,
) -> ExperimentReport:
    """Replicate fit-and-evaluate ``R`` times on independent size-``n`` datasets from P.

    For split conformal ``n`` counts training plus calibration points and
    ``method.n_cal`` of them calibrate.
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    if method.method == "split" and not 0 < method.n_cal < n:
        raise ValueError("split conformal needs 0 < n_cal < n")
    if method.method == "full" and width_points is not None:
        width_points = min(width_points, 8)
    start = time.perf_counter()

    def job(i):
        return _run_trial(i, method, scenario, n, n_test, config, master_seed, width_points)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trials = list(pool.map(job, range(R)))
    else:
        trials = [job(i) for i in range(R)]
    trials.sort(key=lambda t: t.trial_id)
    cfg = {
        "method": method.to_dict(),
        "label": method.label,
        "scenario": scenario.to_dict(),
        "ridge": {"lam": config.lam, "p": config.p, "b": config.b, "I": config.I},
        "n": n,
        "R": R,
        "n_test": n_test,
        "master_seed": master_seed,
    }
    return ExperimentReport(cfg, trials, list(bounds), time.perf_counter() - start)


def beta_oracle_check(report: ExperimentReport, alpha: float, m: int, level: float = 0.01) -> tuple[float, bool]:
    """KS test of per-trial coverage against ``Beta(k, m + 1 - k)``, ``k = ceil((1 - alpha)(m + 1))``.

    Under i.i.d. data with continuous scores, unweighted split conformal's
    training-conditional coverage has exactly this law.
    """
    meth = report.config.get("method", {})
    if meth.get("method") != "split" or meth.get("weighted"):
        raise ValueError("oracle applies to split only (unweighted split conformal)")
    k = math.ceil((1.0 - alpha) * (m + 1) - 1e-9)
    if k > m:
        raise ValueError("alpha too small: the interval is always the whole line")
    cov = 1.0 - report.pe
    stat = float(stats.kstest(cov, stats.beta(k, m + 1 - k).cdf).statistic)
    crit = float(stats.kstwo.ppf(1.0 - level, cov.size))
    return stat, stat < crit


def estimate_nu(
    dataset: Dataset, config: RidgeConfig, scenario: ShiftScenario, epsilon: float, n_mc: int, rng: RngStream
) -> float:
    """``max_i`` frequency over Q draws of ``|mu(X) - mu^{-i}(X)| > epsilon``."""
    X = scenario.sample_Q_x(rng, n_mc)
    full = fit(dataset, config).beta
    diffs = np.abs(X @ (loo_coefficients(dataset, config) - full[None, :]).T)  # (n_mc, n)
    return float(np.max(np.mean(diffs > epsilon, axis=0)))


def _invert_failure(fp: Callable[[float], float], delta: float) -> float:
    """Smallest deviation whose failure probability is at most ``delta``."""
    hi = 1.0
    while fp(hi) > delta:
        hi *= 2.0
        if hi > 1e6:
            return math.inf
    lo = 1e-12
    if fp(lo) <= delta:
        return lo
    return brentq(lambda t: fp(t) - delta, lo, hi, xtol=1e-12)


def dkw_threshold(lemma: str, n: int, scenario: ShiftScenario, delta: float, C: float = 1.0) -> float:
    bound = scenario.ratio.bound_value
    if lemma == "a1":
        return dkw_bounded_ratio(n, bound, delta, C).deviation_threshold
    if lemma == "a2":
        return _invert_failure(lambda t: dkw_second_moment(n, bound, t, C).failure_probability, delta)
    if lemma == "a3":
        return _invert_failure(lambda t: dkw_alternative(n, bound, t).failure_probability, delta)
    raise ValueError("lemma must be one of a1, a2, a3")


def _dkw_rep(scenario, n, stream) -> float:
    data = scenario.sample_P(stream, n)
    ecdf = build_hat_ecdf(np.abs(data.y), scenario.ratio(data.X))
    return sup_deviation(ecdf, scenario.true_score_cdf_Q)


def dkw_study(
    scenario: ShiftScenario,
    ns: Sequence[int],
    R: int,
    delta: float = 0.1,
    C: float = 1.0,
    lemma: str = "a1",
    master_seed: int = 0,
    threads: int = 1,
) -> dict:
    """Sup-deviation of the self-normalized weighted ECDF of ``|y|`` from its Q-law.

    For each ``n``, ``R`` replications; reports the median deviation, the
    lemma's deviation threshold at failure probability ``delta`` and how often
    it was exceeded.
    """
    if scenario.true_score_cdf_Q is None:
        raise ValueError("scenario has no closed-form score CDF under Q")
    rows = []
    for j, n in enumerate(ns):
        streams = [RngStream(master_seed, j).derive(r) for r in range(R)]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                devs = np.array(list(pool.map(lambda s: _dkw_rep(scenario, n, s), streams)))
        else:
            devs = np.array([_dkw_rep(scenario, n, s) for s in streams])
        thr = dkw_threshold(lemma, n, scenario, delta, C)
        rows.append(
            {
                "n": int(n),
                "median_deviation": float(np.median(devs)),
                "threshold": thr,
                "exceedance": float(np.mean(devs > thr)),
            }
        )
    ratios = [rows[k]["median_deviation"] / rows[k + 1]["median_deviation"] for k in range(len(rows) - 1)]
    return {
        "lemma": lemma,
        "delta": delta,
        "C": C,
        "R": R,
        "scenario": scenario.to_dict(),
        "rows": rows,
        "median_ratios": ratios,
    }


def write_report(report: ExperimentReport, outdir, stem: str) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = [outdir / f"{stem}.json", outdir / f"{stem}_trials.csv", outdir / f"{stem}_hist.csv"]
    paths[0].write_text(report.to_json() + "\n", encoding="utf-8")
    report.write_trials_csv(paths[1])
    report.write_histogram_csv(paths[2])
    return paths
