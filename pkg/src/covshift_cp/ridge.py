"""Ridge regression base learner and its stability constants.

The objective is ``(1/n) * sum_i (y_i - beta @ x_i)**2 + lam * ||beta||**2``,
solved through the normal equations ``(X^T X / n + lam I) beta = X^T y / n``
with a Cholesky factorization. Predictions are never clipped.

On the domain ``||x||_2 <= b``, ``|y| <= I`` the fit is uniformly stable with
``c_n = 16 b^2 I^2 / (lam n)`` and the linear model is bi-Lipschitz in its
parameters with ``kappa1 = b`` and ``kappa2 = sqrt(p) b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .core import Dataset, RngStream

if TYPE_CHECKING:
    from .experiment import ShiftScenario

__all__ = [
    "DensityBounds",
    "RidgeConfig",
    "RidgeModel",
    "StabilityProfile",
    "audit_bilipschitz",
    "audit_uniform_stability",
    "estimate_density_bounds",
    "fit",
    "fit_loo",
    "fold_out_coefficients",
    "loo_coefficients",
    "predict",
    "stability_profile",
]


@dataclass(frozen=True)
class RidgeConfig:
    lam: float
    p: int
    b: float = 1.0
    I: float = 1.0  # noqa: E741

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("ridge penalty lam must be positive")
        if self.p < 1:
            raise ValueError("p must be a positive integer")
        if not (self.b > 0 and self.I > 0):
            raise ValueError("domain bounds b and I must be positive")


@dataclass(frozen=True)
class RidgeModel:
    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(beta)):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "beta", beta)

    def __call__(self, X):
        return predict(self, X)


def _solve(X: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    n, p = X.shape
    gram = X.T @ X / n
    gram[np.diag_indices(p)] += lam
    return cho_solve(cho_factor(gram), X.T @ y / n)


def _check(dataset: Dataset, config: RidgeConfig) -> None:
    if dataset.p != config.p:
        raise ValueError(f"dataset has p={dataset.p} but the config expects p={config.p}")


def fit(dataset: Dataset, config: RidgeConfig) -> RidgeModel:
    _check(dataset, config)
    return RidgeModel(_solve(dataset.X, dataset.y, config.lam))


def predict(model: RidgeModel, x):
    """``beta @ x`` for one feature vector, or a vector of predictions for rows of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.beta.shape[0]:
        raise ValueError(f"feature length {x.shape[-1]} does not match p={model.beta.shape[0]}")
    if x.ndim == 1:
        return float(x @ model.beta)
    return x @ model.beta


def loo_coefficients(dataset: Dataset, config: RidgeConfig) -> np.ndarray:
    """All leave-one-out coefficient vectors, shape ``(n, p)``.

    Dropping sample ``i`` gives the system
    ``(X^T X - x_i x_i^T + (n-1) lam I) beta = X^T y - x_i y_i``. The matrix
    ``M = X^T X + (n-1) lam I`` is shared by every ``i``, so one factorization
    plus a Sherman-Morrison correction per sample covers all of them.
    """
    _check(dataset, config)
    X, y = dataset.X, dataset.y
    n, p = X.shape
    if n < 2:
        raise ValueError("leave-one-out needs at least two samples")
    M = X.T @ X
    M[np.diag_indices(p)] += (n - 1) * config.lam
    factor = cho_factor(M)
    U = cho_solve(factor, X.T)  # column i is M^{-1} x_i
    g = cho_solve(factor, X.T @ y)
    V = g[:, None] - U * y[None, :]  # column i is M^{-1}(c - x_i y_i)
    leverage = np.einsum("ij,ji->i", X, U)
    xv = np.einsum("ij,ji->i", X, V)
    return (V + U * (xv / (1.0 - leverage))[None, :]).T


def fit_loo(dataset: Dataset, config: RidgeConfig, i: int, method: str = "fast") -> RidgeModel:
    """Model fitted without sample ``i``; ``method="naive"`` refits from scratch."""
    if dataset.n < 2:
        raise ValueError("leave-one-out needs at least two samples")
    if not 0 <= i < dataset.n:
        raise IndexError(f"index {i} out of range for n={dataset.n}")
    if method == "naive":
        return fit(dataset.without(i), config)
    if method != "fast":
        raise ValueError("method must be 'fast' or 'naive'")
    _check(dataset, config)
    X, y = dataset.X, dataset.y
    n, p = X.shape
    M = X.T @ X
    M[np.diag_indices(p)] += (n - 1) * config.lam
    factor = cho_factor(M)
    xi = X[i]
    u = cho_solve(factor, xi)
    v = cho_solve(factor, X.T @ y - xi * y[i])
    return RidgeModel(v + u * (xi @ v) / (1.0 - xi @ u))


def fold_out_coefficients(dataset: Dataset, config: RidgeConfig, fold_of: np.ndarray) -> np.ndarray:
    """Coefficients of the model trained without each sample's fold, shape ``(n, p)``."""
    _check(dataset, config)
    fold_of = np.asarray(fold_of)
    out = np.empty((dataset.n, dataset.p))
    for k in np.unique(fold_of):
        held = fold_of == k
        out[held] = _solve(dataset.X[~held], dataset.y[~held], config.lam)
    return out


@dataclass(frozen=True)
class StabilityProfile:
    b: float
    I: float  # noqa: E741
    lam: float
    kappa1: float
    kappa2: float

    def c(self, n: int) -> float:
        """Uniform-stability constant ``c_n``; removal changes predictions by at most ``c_n / 2``."""
        if n < 1:
            raise ValueError("n must be positive")
        return 16.0 * self.b**2 * self.I**2 / (self.lam * n)

    c_fn = c


def stability_profile(config: RidgeConfig) -> StabilityProfile:
    return StabilityProfile(
        b=config.b,
        I=config.I,
        lam=config.lam,
        kappa1=config.b,
        kappa2=math.sqrt(config.p) * config.b,
    )


def audit_uniform_stability(
    dataset: Dataset,
    config: RidgeConfig,
    n_swaps: int,
    probe_points,
    rng: RngStream,
) -> float:
    """Largest prediction change from a single removal over sampled indices and probes.

    Compare the result against ``stability_profile(config).c(n) / 2``.
    """
    if dataset.n < 2:
        raise ValueError("stability audit needs at least two samples")
    probes = np.atleast_2d(np.asarray(probe_points, dtype=np.float64))
    if np.any(np.linalg.norm(probes, axis=1) > config.b * (1 + 1e-12)):
        raise ValueError("probe points must lie inside the feature ball")
    full = fit(dataset, config).beta
    loo = loo_coefficients(dataset, config)
    k = min(int(n_swaps), dataset.n)
    idx = rng.generator().choice(dataset.n, size=k, replace=False)
    diffs = (loo[idx] - full[None, :]) @ probes.T
    return float(np.max(np.abs(diffs)))


def audit_bilipschitz(config: RidgeConfig, model_pairs, probe_points) -> tuple[float, float]:
    """Range of ``max_x |mu_beta(x) - mu_beta'(x)| / ||beta - beta'||_inf`` over model pairs.

    The sup over the feature ball is approximated by the probe set, so the
    returned values are lower estimates of the true ratios.
    """
    pairs = list(model_pairs)
    if not pairs:
        raise ValueError("model_pairs must be nonempty")
    probes = np.atleast_2d(np.asarray(probe_points, dtype=np.float64))
    ratios = []
    for m1, m2 in pairs:
        d = _beta(m1) - _beta(m2)
        dinf = float(np.max(np.abs(d)))
        if dinf == 0:
            raise ValueError("model pairs must be distinct")
        ratios.append(float(np.max(np.abs(probes @ d))) / dinf)
    return min(ratios), max(ratios)


def _beta(m) -> np.ndarray:
    return m.beta if isinstance(m, RidgeModel) else np.asarray(m, dtype=np.float64)


@dataclass(frozen=True)
class DensityBounds:
    """Monte Carlo stand-ins for the residual-density bounds ``L_n`` and ``L_{Q,n}``.

    These are estimates from finite differences of empirical CDFs at an
    averaged model, not certified bounds.
    """

    L_n: float
    L_Qn: float
    grid_step: float
    grid_step_Q: float
    n_fits: int
    n_mc: int

    def to_dict(self) -> dict:
        return {
            "L_n": self.L_n,
            "L_Qn": self.L_Qn,
            "grid_step": self.grid_step,
            "grid_step_Q": self.grid_step_Q,
            "n_fits": self.n_fits,
            "n_mc": self.n_mc,
            "estimated": True,
        }


def _max_slope(residuals: np.ndarray, n_bins: int) -> tuple[float, float]:
    lo, hi = float(residuals.min()), float(residuals.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        raise ValueError("density unbounded or degenerate: residuals are (nearly) constant")
    step = (hi - lo) / n_bins
    counts, _ = np.histogram(residuals, bins=n_bins, range=(lo, hi))
    return float(counts.max() / (residuals.size * step)), step


def estimate_density_bounds(
    config: RidgeConfig,
    scenario: "ShiftScenario",
    n: int,
    n_mc: int,
    rng: RngStream,
    n_fits: int = 200,
    n_bins: int = 20,
) -> DensityBounds:
    """Estimate the residual-CDF slopes under P and Q at the averaged fit.

    The averaged coefficient vector stands in for the expected fit and is the
    mean of ``n_fits`` independent fits on size-``n`` samples from P. Slopes
    are the largest histogram densities over ``n_bins`` equal bins spanning
    the observed residual range.
    """
    if n_fits < 1 or n_mc < 1 or n < 1:
        raise ValueError("n, n_mc and n_fits must be positive")
    betas = np.empty((n_fits, config.p))
    for k in range(n_fits):
        d = scenario.sample_P(rng.derive(k), n)
        betas[k] = fit(d, config).beta
    beta_bar = betas.mean(axis=0)
    sample_p = scenario.sample_P(rng.derive(n_fits), n_mc)
    res_p = np.abs(sample_p.y - sample_p.X @ beta_bar)
    Xq = scenario.sample_Q_x(rng.derive(n_fits + 1), n_mc)
    yq = scenario.sample_y_given_x(rng.derive(n_fits + 2), Xq)
    res_q = np.abs(yq - Xq @ beta_bar)
    L_n, step = _max_slope(res_p, n_bins)
    L_Qn, step_q = _max_slope(res_q, n_bins)
    return DensityBounds(L_n, L_Qn, step, step_q, n_fits, n_mc)
