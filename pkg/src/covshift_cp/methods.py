"""Conformal prediction sets built on the ridge learner.

Split and full conformal, the plain jackknife, jackknife+ (optionally
inflated), CV+, and their likelihood-ratio weighted versions. Weighted
variants put the test point's ratio on a point mass at infinity; with all
ratios equal to one they reduce exactly to the unweighted constructions,
because both run through the same code with unit ratios.

Each method has a single-point function returning a
:class:`PredictionInterval` or :class:`PredictionSet`, and a ``fit_*``
function returning a predictor object that evaluates many test points at
once (used by the experiment harness).

The jackknife+ lower endpoint is computed as the mirror image of the upper
one: ``-Q_{1-alpha}(-S^-)`` with the test mass on ``+inf`` of the reflected
set. For equal weights this is the ``floor(alpha (n+1))``-th smallest
element of ``S^-``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .core import Dataset, LikelihoodRatio, RngStream, split
from .ridge import RidgeConfig, fit, fold_out_coefficients, loo_coefficients
from .weighted_ecdf import quantile_shared_atoms, row_quantiles

__all__ = [
    "METHODS",
    "FullConformalPredictor",
    "IntervalPredictor",
    "MethodConfig",
    "PredictionInterval",
    "PredictionSet",
    "cv_folds",
    "cv_plus",
    "fit_cv_plus",
    "fit_full_conformal",
    "fit_jackknife",
    "fit_jackknife_plus",
    "fit_method",
    "fit_split",
    "full_conformal",
    "jackknife_plain",
    "jackknife_plus",
    "jackknife_plus_inflated",
    "jaw",
    "split_conformal",
]

METHODS = ("split", "full", "jackknife", "jackknife_plus", "jackknife_plus_inflated", "cv_plus", "jaw")
DEFAULT_GRID_SIZE = 513


@dataclass(frozen=True)
class PredictionInterval:
    lower: float
    upper: float
    is_empty: bool = False

    def __post_init__(self):
        if not self.is_empty and not self.lower <= self.upper:
            raise ValueError(f"lower {self.lower} exceeds upper {self.upper}; use PredictionInterval.empty()")

    @classmethod
    def empty(cls) -> "PredictionInterval":
        return cls(math.inf, -math.inf, True)

    def contains(self, y: float) -> bool:
        return (not self.is_empty) and self.lower <= y <= self.upper

    @property
    def width(self) -> float:
        return 0.0 if self.is_empty else self.upper - self.lower

    def to_dict(self) -> dict:
        if self.is_empty:
            return {"empty": True}
        return {"lower": _json_real(self.lower), "upper": _json_real(self.upper)}


def _json_real(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return float(v)


@dataclass(frozen=True)
class PredictionSet:
    """Grid membership for full conformal, with the score and threshold at each point."""

    grid: np.ndarray
    membership: np.ndarray
    test_scores: np.ndarray
    thresholds: np.ndarray
    rejected: tuple = field(default_factory=tuple)

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        if g.ndim != 1 or g.size == 0 or np.any(np.diff(g) <= 0):
            raise ValueError("grid must be nonempty and strictly increasing")
        if np.shape(self.membership) != g.shape:
            raise ValueError("membership must match the grid")

    def contains(self, y: float) -> bool:
        """Membership of the nearest grid point; values off the grid are excluded."""
        g = self.grid
        if y < g[0] or y > g[-1]:
            return False
        k = int(np.clip(np.searchsorted(g, y), 1, g.size - 1))
        j = k if abs(g[k] - y) < abs(y - g[k - 1]) else k - 1
        return bool(self.membership[j])

    @property
    def threshold_trace(self) -> list[tuple[float, float, float]]:
        return list(zip(self.grid.tolist(), self.test_scores.tolist(), self.thresholds.tolist()))

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.tolist(),
            "member": self.membership.astype(bool).tolist(),
            "score": self.test_scores.tolist(),
            "threshold": [_json_real(t) for t in self.thresholds.tolist()],
            "rejected": list(self.rejected),
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["y", "member"])
            for y, m in zip(self.grid.tolist(), self.membership.tolist()):
                w.writerow([repr(y), int(m)])


@dataclass(frozen=True)
class MethodConfig:
    alpha: float
    method: str = "split"
    weighted: bool = False
    epsilon: float = 0.0
    folds: int = 0
    n_cal: int = 0
    grid_size: int = 257

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.method == "cv_plus" and self.folds < 2:
            raise ValueError("cv_plus requires folds >= 2")
        if self.method == "jackknife_plus_inflated" and self.epsilon < 0:
            raise ValueError("inflation epsilon must be nonnegative")
        if self.method == "jaw" and not self.weighted:
            object.__setattr__(self, "weighted", True)

    @property
    def label(self) -> str:
        base = self.method
        if self.weighted and self.method in ("split", "full"):
            base = "weighted_" + base
        return base

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "method": self.method,
            "weighted": self.weighted,
            "epsilon": self.epsilon,
            "folds": self.folds,
            "n_cal": self.n_cal,
            "grid_size": self.grid_size,
        }


def _ratio(ratio: Optional[LikelihoodRatio]) -> LikelihoodRatio:
    return LikelihoodRatio.unweighted() if ratio is None else ratio


def _rows(X) -> np.ndarray:
    return np.atleast_2d(np.asarray(X, dtype=np.float64))


class IntervalPredictor:
    """Vectorized interval predictor: subclasses implement :meth:`intervals`."""

    def intervals(self, X) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def covers(self, X, y) -> np.ndarray:
        lo, hi = self.intervals(X)
        y = np.asarray(y, dtype=np.float64)
        return (lo <= y) & (y <= hi)

    def widths(self, X) -> np.ndarray:
        lo, hi = self.intervals(X)
        w = hi - lo
        return np.where(lo > hi, 0.0, w)

    def interval(self, x) -> PredictionInterval:
        lo, hi = self.intervals(_rows(x))
        lo, hi = float(lo[0]), float(hi[0])
        if lo > hi:
            return PredictionInterval.empty()
        return PredictionInterval(lo, hi)

    __call__ = intervals


class SplitPredictor(IntervalPredictor):
    def __init__(self, beta, cal_scores, cal_ratios, ratio: LikelihoodRatio, alpha: float):
        order = np.argsort(cal_scores, kind="stable")
        self.beta = np.asarray(beta)
        self.sorted_scores = np.asarray(cal_scores)[order]
        self.sorted_ratios = np.asarray(cal_ratios)[order]
        self.ratio = ratio
        self.alpha = alpha

    def thresholds(self, X) -> np.ndarray:
        X = _rows(X)
        return quantile_shared_atoms(self.sorted_scores, self.sorted_ratios, self.ratio(X), 1.0 - self.alpha)

    def intervals(self, X):
        X = _rows(X)
        mu = X @ self.beta
        q = self.thresholds(X)
        lo = np.where(np.isinf(q), -np.inf, mu - q)
        hi = np.where(np.isinf(q), np.inf, mu + q)
        return lo, hi


def fit_split(
    trainset: Dataset,
    calset: Dataset,
    config: RidgeConfig,
    alpha: float,
    ratio: Optional[LikelihoodRatio] = None,
) -> SplitPredictor:
    ratio = _ratio(ratio)
    beta = fit(trainset, config).beta
    scores = np.abs(calset.y - calset.X @ beta)
    return SplitPredictor(beta, scores, ratio(calset.X), ratio, alpha)


def split_conformal(trainset, calset, x, config, alpha, ratio=None) -> PredictionInterval:
    """Split conformal interval ``mu(x) +- q`` where ``q`` is the test-weighted calibration quantile."""
    return fit_split(trainset, calset, config, alpha, ratio).interval(x)


class JackknifePlusPredictor(IntervalPredictor):
    """Jackknife+/JAW/CV+ intervals from held-out coefficient vectors.

    ``heldout_betas[i]`` is the model that did not see sample ``i``.
    """

    def __init__(self, heldout_betas, residuals, train_ratios, ratio: LikelihoodRatio, alpha: float, epsilon=0.0):
        self.betas = np.asarray(heldout_betas)
        self.residuals = np.asarray(residuals)
        self.train_ratios = np.asarray(train_ratios)
        self.ratio = ratio
        self.alpha = alpha
        self.epsilon = float(epsilon)

    def intervals(self, X):
        X = _rows(X)
        mu = X @ self.betas.T  # (rows, n)
        rt = self.ratio(X)
        level = 1.0 - self.alpha
        hi = row_quantiles(mu + self.residuals, self.train_ratios, rt, level)
        lo = -row_quantiles(-(mu - self.residuals), self.train_ratios, rt, level)
        return lo - self.epsilon, hi + self.epsilon


def fit_jackknife_plus(dataset, config, alpha, ratio=None, epsilon: float = 0.0) -> JackknifePlusPredictor:
    if dataset.n < 2:
        raise ValueError("jackknife+ needs at least two samples")
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    ratio = _ratio(ratio)
    betas = loo_coefficients(dataset, config)
    res = np.abs(dataset.y - np.einsum("ij,ij->i", dataset.X, betas))
    return JackknifePlusPredictor(betas, res, ratio(dataset.X), ratio, alpha, epsilon)


def jackknife_plus(dataset, x, config, alpha) -> PredictionInterval:
    return fit_jackknife_plus(dataset, config, alpha).interval(x)


def jaw(dataset, x, config, alpha, ratio: LikelihoodRatio) -> PredictionInterval:
    """Likelihood-ratio weighted jackknife+."""
    return fit_jackknife_plus(dataset, config, alpha, ratio).interval(x)


def jackknife_plus_inflated(dataset, x, config, alpha, epsilon: float) -> PredictionInterval:
    return fit_jackknife_plus(dataset, config, alpha, epsilon=epsilon).interval(x)


def cv_folds(n: int, K: int, rng: RngStream) -> np.ndarray:
    """Fold label per sample from a seeded permutation; requires ``K | n``."""
    if K < 2:
        raise ValueError("CV+ needs at least two folds")
    if n % K:
        raise ValueError(f"folds must divide n (n={n}, folds={K})")
    perm = rng.generator().permutation(n)
    fold_of = np.empty(n, dtype=np.intp)
    fold_of[perm] = np.arange(n) % K
    return fold_of


def fit_cv_plus(dataset, config, alpha, K: int, rng: RngStream, ratio=None) -> JackknifePlusPredictor:
    ratio = _ratio(ratio)
    fold_of = cv_folds(dataset.n, K, rng)
    betas = fold_out_coefficients(dataset, config, fold_of)
    res = np.abs(dataset.y - np.einsum("ij,ij->i", dataset.X, betas))
    return JackknifePlusPredictor(betas, res, ratio(dataset.X), ratio, alpha)


def cv_plus(dataset, x, config, alpha, K: int, rng: RngStream) -> PredictionInterval:
    return fit_cv_plus(dataset, config, alpha, K, rng).interval(x)


class JackknifePredictor(IntervalPredictor):
    def __init__(self, beta, q: float):
        self.beta = np.asarray(beta)
        self.q = float(q)

    def intervals(self, X):
        mu = _rows(X) @ self.beta
        if math.isinf(self.q):
            return np.full_like(mu, -np.inf), np.full_like(mu, np.inf)
        return mu - self.q, mu + self.q


def fit_jackknife(dataset, config, alpha) -> JackknifePredictor:
    if dataset.n < 2:
        raise ValueError("the jackknife needs at least two samples")
    betas = loo_coefficients(dataset, config)
    res = np.abs(dataset.y - np.einsum("ij,ij->i", dataset.X, betas))
    q = quantile_shared_atoms(np.sort(res), np.ones(res.size), [1.0], 1.0 - alpha)[0]
    return JackknifePredictor(fit(dataset, config).beta, q)


def jackknife_plain(dataset, x, config, alpha) -> PredictionInterval:
    return fit_jackknife(dataset, config, alpha).interval(x)


def default_grid(I: float, size: int = DEFAULT_GRID_SIZE) -> np.ndarray:  # noqa: E741
    return np.linspace(-I, I, size)


class FullConformalPredictor:
    """Full conformal membership; refits ridge on the data plus each candidate."""

    def __init__(self, dataset: Dataset, config: RidgeConfig, alpha: float, ratio=None, rank_form=False):
        self.dataset = dataset
        self.config = config
        self.alpha = alpha
        self.ratio = _ratio(ratio)
        self.rank_form = rank_form
        self._train_ratios = self.ratio(dataset.X)
        self._gram = dataset.X.T @ dataset.X
        self._xty = dataset.X.T @ dataset.y

    def scores_and_thresholds(self, x, candidates) -> tuple[np.ndarray, np.ndarray]:
        """Test score and conformal threshold for each candidate response at ``x``."""
        X, y = self.dataset.X, self.dataset.y
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        cand = np.atleast_1d(np.asarray(candidates, dtype=np.float64))
        n1 = X.shape[0] + 1
        G = (self._gram + np.outer(x, x)) / n1
        G[np.diag_indices_from(G)] += self.config.lam
        rhs = (self._xty[:, None] + x[:, None] * cand[None, :]) / n1
        B = cho_solve(cho_factor(G), rhs)  # (p, candidates)
        train_scores = np.abs(y[:, None] - X @ B).T  # (candidates, n)
        test_scores = np.abs(cand - x @ B)
        rt = np.full(cand.shape, self.ratio.at(x))
        level = 1.0 - self.alpha
        if self.rank_form:
            values = np.concatenate((train_scores, test_scores[:, None]), axis=1)
            ratios = np.concatenate((np.broadcast_to(self._train_ratios, train_scores.shape), rt[:, None]), axis=1)
            thr = row_quantiles(values, ratios, np.zeros_like(rt), level)
        else:
            thr = row_quantiles(train_scores, self._train_ratios, rt, level)
        return test_scores, thr

    def predict_set(self, x, grid: Optional[Sequence[float]] = None) -> PredictionSet:
        I = self.dataset.I  # noqa: E741
        grid = default_grid(I) if grid is None else np.asarray(grid, dtype=np.float64)
        if grid.ndim != 1 or grid.size == 0 or np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be nonempty and strictly increasing")
        inside = np.abs(grid) <= I
        rejected = tuple(float(g) for g in grid[~inside])
        if rejected:
            warnings.warn(
                f"{len(rejected)} candidate responses outside [-I, I] were rejected", RuntimeWarning, stacklevel=2
            )
        scores = np.full(grid.shape, np.nan)
        thr = np.full(grid.shape, np.nan)
        if inside.any():
            scores[inside], thr[inside] = self.scores_and_thresholds(x, grid[inside])
        member = inside & (scores <= thr)
        return PredictionSet(grid, member, scores, thr, rejected)

    def covers(self, X, y) -> np.ndarray:
        """Exact membership of each observed response, without a grid."""
        X = _rows(X)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        out = np.empty(y.shape, dtype=bool)
        for k in range(y.size):
            s, t = self.scores_and_thresholds(X[k], y[k : k + 1])
            out[k] = s[0] <= t[0]
        return out

    def widths(self, X, grid_size: int = 257) -> np.ndarray:
        X = _rows(X)
        grid = default_grid(self.dataset.I, grid_size)
        step = grid[1] - grid[0]
        return np.array([self.predict_set(x, grid).membership.sum() * step for x in X])


def fit_full_conformal(dataset, config, alpha, ratio=None, rank_form=False) -> FullConformalPredictor:
    return FullConformalPredictor(dataset, config, alpha, ratio, rank_form)


def full_conformal(dataset, x, config, alpha, ratio=None, grid=None, rank_form=False) -> PredictionSet:
    """Full conformal set over a response grid (default: 513 points on ``[-I, I]``).

    The default compares each candidate's score with the quantile of the
    training scores plus a point mass at ``+inf``; ``rank_form=True`` uses the
    candidate's own score in place of that point mass.
    """
    return FullConformalPredictor(dataset, config, alpha, ratio, rank_form).predict_set(x, grid)


def fit_method(
    method: MethodConfig,
    dataset: Dataset,
    config: RidgeConfig,
    ratio: Optional[LikelihoodRatio],
    rng: RngStream,
):
    """Fit the configured method on ``dataset``; returns an object with ``covers`` and ``widths``.

    Split conformal divides ``dataset`` at random (seeded by ``rng``) into
    ``method.n_cal`` calibration rows and the remaining training rows.
    """
    r = ratio if method.weighted else None
    m = method.method
    if m == "split":
        n_cal = method.n_cal or dataset.n // 2
        spec = split(dataset, dataset.n - n_cal, rng)
        return fit_split(dataset.subset(spec.train_indices), dataset.subset(spec.cal_indices), config, method.alpha, r)
    if m == "full":
        return fit_full_conformal(dataset, config, method.alpha, r)
    if m == "jackknife":
        return fit_jackknife(dataset, config, method.alpha)
    if m in ("jackknife_plus", "jaw"):
        return fit_jackknife_plus(dataset, config, method.alpha, r)
    if m == "jackknife_plus_inflated":
        return fit_jackknife_plus(dataset, config, method.alpha, r, epsilon=method.epsilon)
    if m == "cv_plus":
        return fit_cv_plus(dataset, config, method.alpha, method.folds, rng, r)
    raise ValueError(m)
