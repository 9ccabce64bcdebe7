"""Weighted empirical CDFs with an optional point mass at +inf or -inf.

Quantiles use the left-continuous generalized inverse
``inf{t : F(t) >= level}``. With equal weights and the test mass at +inf this
is the ``ceil(level * (n + 1))``-th order statistic. Cumulative weights are
compared against the level with an absolute slack of ``QUANTILE_TOL`` so
that sums such as ``9 * (1/10)`` still reach 0.9.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "QUANTILE_TOL",
    "DkwBoundResult",
    "WeightedEcdf",
    "build_hat_ecdf",
    "build_test_weighted_ecdf",
    "dkw_alternative",
    "dkw_bounded_ratio",
    "dkw_second_moment",
    "eval_cdf",
    "quantile",
    "quantile_shared_atoms",
    "row_quantiles",
    "sup_deviation",
]

QUANTILE_TOL = 1e-12
_NORM_TOL = 1e-12


@dataclass(frozen=True)
class WeightedEcdf:
    """Normalized weighted step function over scores.

    ``scores`` are sorted and tie-merged; ``weights`` are the merged atom
    weights; ``infinity_mass`` sits at ``infinity_side`` (+1 or -1).
    """

    scores: np.ndarray
    weights: np.ndarray
    infinity_mass: float = 0.0
    infinity_side: int = 1

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if s.shape != w.shape:
            raise ValueError("scores and weights must have equal length")
        if np.any(np.isnan(s)):
            raise ValueError("scores must not be NaN")
        if np.any(w < 0) or self.infinity_mass < 0:
            raise ValueError("weights must be nonnegative")
        if self.infinity_side not in (1, -1):
            raise ValueError("infinity_side must be +1 or -1")
        order = np.argsort(s, kind="stable")
        s, w = s[order], w[order]
        # CDF values come from the running sum over every sorted weight, read
        # at the last member of each tie group
        cum = np.cumsum(w)
        if s.size:
            uniq, start = np.unique(s, return_index=True)
            cum = cum[np.append(start[1:], s.size) - 1]
            w = np.add.reduceat(w, start)
            s = uniq
        total = math.fsum(w) + self.infinity_mass
        if abs(total - 1.0) > _NORM_TOL:
            raise ValueError(f"weights sum to {total!r}, expected 1")
        s.setflags(write=False)
        w.setflags(write=False)
        cum.setflags(write=False)
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "infinity_mass", float(self.infinity_mass))
        object.__setattr__(self, "_cum", cum)

    @property
    def total(self) -> float:
        return math.fsum(self.weights) + self.infinity_mass

    @property
    def cumulative(self) -> np.ndarray:
        """Atom CDF values, including the -inf mass when present."""
        offset = self.infinity_mass if self.infinity_side == -1 else 0.0
        return self._cum + offset


def build_hat_ecdf(scores, ratios) -> WeightedEcdf:
    """Self-normalized weights ``r_i / sum_j r_j`` with no point mass at infinity."""
    s, r = _check_pair(scores, ratios)
    total = math.fsum(r)
    if total <= 0:
        raise ValueError("all ratios are zero; self-normalization is undefined")
    return WeightedEcdf(s, r / total, 0.0, 1)


def build_test_weighted_ecdf(scores, ratios, ratio_at_test: float, infinity_side: int = 1) -> WeightedEcdf:
    """Weights ``r_i / (r_test + sum_j r_j)`` plus the test mass at +inf or -inf."""
    s, r = _check_pair(scores, ratios)
    if ratio_at_test < 0 or not math.isfinite(ratio_at_test):
        raise ValueError("ratio_at_test must be finite and nonnegative")
    denom = ratio_at_test + math.fsum(r)
    if denom <= 0:
        raise ValueError("zero denominator: all ratios, including the test ratio, are zero")
    w = r / denom
    inf_mass = ratio_at_test / denom
    return WeightedEcdf(s, w, inf_mass, infinity_side)


def _check_pair(scores, ratios):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    r = np.asarray(ratios, dtype=np.float64).reshape(-1)
    if s.size == 0 or s.shape != r.shape:
        raise ValueError("scores and ratios must be nonempty and of equal length")
    if np.any(r < 0) or np.any(~np.isfinite(r)):
        raise ValueError("ratios must be finite and nonnegative")
    return s, r


def eval_cdf(ecdf: WeightedEcdf, t: float) -> float:
    """``F(t)``: atom weight at scores ``<= t`` plus any infinity mass below ``t``."""
    if t == math.inf:
        return 1.0
    k = int(np.searchsorted(ecdf.scores, t, side="right"))
    below = float(ecdf._cum[k - 1]) if k else 0.0
    if ecdf.infinity_side == -1:
        below += ecdf.infinity_mass
    return min(1.0, below)


def quantile(ecdf: WeightedEcdf, level: float) -> float:
    """``inf{t : F(t) >= level}`` for ``0 < level <= 1``; may return +-inf."""
    if not 0 < level <= 1:
        raise ValueError("level must lie in (0, 1]")
    target = level - QUANTILE_TOL
    if ecdf.infinity_side == -1 and ecdf.infinity_mass >= target:
        return -math.inf
    cum = ecdf.cumulative
    k = int(np.searchsorted(cum, target, side="left"))
    if k < cum.size:
        return float(ecdf.scores[k])
    return math.inf


def quantile_shared_atoms(sorted_scores, sorted_ratios, test_ratios, level: float) -> np.ndarray:
    """Quantiles of many test-weighted ECDFs sharing atoms but not the test ratio.

    Equivalent to ``quantile(build_test_weighted_ecdf(scores, ratios, t, +1), level)``
    for each ``t`` in ``test_ratios``. ``sorted_scores`` must be nondecreasing
    and ``sorted_ratios`` aligned with it.
    """
    s = np.asarray(sorted_scores, dtype=np.float64)
    r = np.asarray(sorted_ratios, dtype=np.float64)
    rt = np.atleast_1d(np.asarray(test_ratios, dtype=np.float64))
    if not 0 < level <= 1:
        raise ValueError("level must lie in (0, 1]")
    # Merge ties so that a quantile never lands in the middle of a tie block.
    uniq, start = np.unique(s, return_index=True)
    cum_r = np.cumsum(np.add.reduceat(r, start))
    denom = rt + math.fsum(r)
    target = level - QUANTILE_TOL
    # Index guess by multiplication, then settle on the division-form condition.
    k = np.searchsorted(cum_r, target * denom, side="left")
    k = np.clip(k, 0, cum_r.size)
    last = cum_r.size - 1
    while True:
        hit_prev = (k > 0) & (cum_r[np.maximum(k - 1, 0)] / denom >= target)
        if not hit_prev.any():
            break
        k = np.where(hit_prev, k - 1, k)
    while True:
        miss_here = (k <= last) & (cum_r[np.minimum(k, last)] / denom < target)
        if not miss_here.any():
            break
        k = np.where(miss_here, k + 1, k)
    out = np.full(rt.shape, math.inf)
    ok = k < cum_r.size
    out[ok] = uniq[k[ok]]
    return out


def row_quantiles(values, ratios, test_ratios, level: float) -> np.ndarray:
    """Row-wise quantile with the test mass at +inf.

    ``values`` has shape ``(rows, n)``; ``ratios`` has shape ``(n,)`` or
    ``(rows, n)``; ``test_ratios`` has shape ``(rows,)``. Each row gives
    ``quantile(build_test_weighted_ecdf(values[i], ratios[i], test_ratios[i]), level)``.
    """
    v = np.atleast_2d(np.asarray(values, dtype=np.float64))
    rows, n = v.shape
    r = np.broadcast_to(np.asarray(ratios, dtype=np.float64), (rows, n))
    rt = np.broadcast_to(np.asarray(test_ratios, dtype=np.float64), (rows,))
    if not 0 < level <= 1:
        raise ValueError("level must lie in (0, 1]")
    order = np.argsort(v, axis=1, kind="stable")
    sv = np.take_along_axis(v, order, axis=1)
    sr = np.take_along_axis(r, order, axis=1)
    cum = np.cumsum(sr, axis=1)
    # Within a tie block only the last position carries the merged cumulative weight.
    last_of_block = np.ones_like(sv, dtype=bool)
    last_of_block[:, :-1] = sv[:, 1:] != sv[:, :-1]
    denom = rt + r.sum(axis=1)
    reached = last_of_block & (cum / denom[:, None] >= level - QUANTILE_TOL)
    any_hit = reached.any(axis=1)
    first = np.argmax(reached, axis=1)
    out = np.full(rows, math.inf)
    out[any_hit] = sv[any_hit, first[any_hit]]
    return out


def sup_deviation(ecdf: WeightedEcdf, reference: Callable[[np.ndarray], np.ndarray]) -> float:
    """``sup_x |F(x) - reference(x)|`` over the real line.

    Between atoms ``F`` is flat and ``reference`` is monotone, so checking the
    right value and left limit at every atom plus the two far ends is exact.
    ``reference`` must accept an array.
    """
    scores, weights = ecdf.scores, ecdf.weights
    finite = np.isfinite(scores)
    lo_mass = float(np.sum(weights[scores == -np.inf]))
    if ecdf.infinity_side == -1:
        lo_mass += ecdf.infinity_mass
    s = scores[finite]
    cum = lo_mass + np.cumsum(weights[finite])
    top = float(cum[-1]) if s.size else lo_mass
    left_F = np.concatenate(([lo_mass], cum[:-1]))
    big = np.finfo(np.float64).max
    probes = np.concatenate((s, np.nextafter(s, -np.inf), [-big, big]))
    vals = np.asarray(reference(probes), dtype=np.float64)
    k = s.size
    dev = max(abs(lo_mass - vals[2 * k]), abs(top - vals[2 * k + 1]))
    if k:
        dev = max(dev, float(np.max(np.abs(cum - vals[:k]))), float(np.max(np.abs(left_F[:k] - vals[k : 2 * k]))))
    return float(dev)


@dataclass(frozen=True)
class DkwBoundResult:
    deviation_threshold: float
    failure_probability: float

    def to_dict(self) -> dict:
        return {"deviation_threshold": self.deviation_threshold, "failure_probability": self.failure_probability}


def _check_B(B: float) -> None:
    if not B >= 1:
        raise ValueError(f"likelihood-ratio bound must be >= 1 (got {B}); E_P[dQ/dP] = 1 forces it")


def dkw_bounded_ratio(n: int, B: float, delta_prob: float, C: float = 1.0) -> DkwBoundResult:
    """Deviation exceeded with probability at most ``delta_prob`` when ``dQ/dP <= B``.

    Solves ``4 exp(-n t^2 / (2 B^2)) = delta_prob`` for ``t`` and adds the
    expectation term ``3 C sqrt(B / n)``.
    """
    _check_B(B)
    if not 0 < delta_prob < 1:
        raise ValueError("delta_prob must lie in (0, 1)")
    t = math.sqrt(2.0 * B * B * math.log(4.0 / delta_prob) / n)
    return DkwBoundResult(t + 3.0 * C * math.sqrt(B / n), float(delta_prob))


def dkw_second_moment(n: int, K: float, deviation: float, C: float = 1.0) -> DkwBoundResult:
    """Failure probability at a given deviation when ``||dQ/dP||_{P,2} <= K``."""
    _check_B(K)
    if not deviation > 0:
        raise ValueError("deviation must be positive")
    fp = 6.0 * C * K / (deviation * math.sqrt(n)) + 4.0 * (K * K - 1.0) / (n * deviation * deviation)
    return DkwBoundResult(float(deviation), min(1.0, fp))


def dkw_alternative(n: int, B: float, deviation: float) -> DkwBoundResult:
    """Constant-free failure probability at a given deviation when ``dQ/dP <= B``."""
    _check_B(B)
    if not deviation > 0:
        raise ValueError("deviation must be positive")
    d2 = deviation * deviation
    fp = (72.0 / deviation) * math.exp(-n * d2 / (4.0 * B)) + 2.0 * math.exp(-n * d2 / (2.0 * B * B))
    return DkwBoundResult(float(deviation), min(1.0, fp))
