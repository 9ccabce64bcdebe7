"""Closed-form training-conditional miscoverage bounds.

Each calculator returns a :class:`BoundResult` whose threshold is ``alpha``
plus a named set of additive slack terms: with probability at most
``failure_probability`` over the draw of the data, the miscoverage exceeds
the threshold. ``C`` is the unspecified universal constant of the weighted
DKW inequality; it is always an explicit input (default 1.0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from .ridge import RidgeConfig, stability_profile

__all__ = [
    "BoundInputs",
    "BoundResult",
    "THEOREMS",
    "bian_cv_bound",
    "cv_plus_bound",
    "evaluate",
    "full_bound_exch",
    "full_bound_shift",
    "jackknife_bound_exch",
    "jackknife_bound_shift",
    "liang_comparison_bound",
    "ridge_inputs",
    "shorthand_A",
    "shorthand_E",
    "split_bound",
    "split_bound_second_moment",
]


def _zero(n: int) -> float:
    return 0.0


@dataclass(frozen=True)
class BoundInputs:
    """Every scalar the bounds depend on.

    ``c_n_fn`` maps a sample size to the uniform-stability constant.
    ``L``/``L_Q`` are the residual-density bounds under P and Q at whatever
    index the theorem uses. ``K2`` is the second-moment bound on the ratio.
    """

    alpha: float = 0.1
    delta: float = 0.1
    epsilon: float = 0.1
    n: int = 1000
    m: int = 100
    p: int = 1
    B: float = 1.0
    K2: float = 1.0
    C: float = 1.0
    c_n_fn: Callable[[int], float] = _zero
    kappa1: float = 1.0
    kappa2: float = 1.0
    L: float = 1.0
    L_Q: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.n < 1 or self.m < 1 or self.p < 1:
            raise ValueError("n, m and p must be positive integers")
        if self.B < 1 or self.K2 < 1:
            raise ValueError("likelihood-ratio bounds B and K2 must be >= 1")
        for name in ("C", "kappa1", "kappa2", "L", "L_Q", "gamma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative")
        if self.kappa1 <= 0 or self.gamma <= 0:
            raise ValueError("kappa1 and gamma must be positive")

    def with_(self, **kw) -> "BoundInputs":
        return replace(self, **kw)

    @classmethod
    def split_budget(cls, budget: float, **kw) -> "BoundInputs":
        """Spread a total failure budget evenly: ``epsilon = delta = budget / 2``."""
        return cls(delta=budget / 2, epsilon=budget / 2, **kw)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "c_n_fn"}
        d["c_n"] = self.c_n_fn(self.n)
        return d


@dataclass(frozen=True)
class BoundResult:
    name: str
    alpha: float
    terms: dict
    failure_probability: float
    extras: dict = field(default_factory=dict)

    @property
    def slack(self) -> float:
        return sum(self.terms.values())

    @property
    def miscoverage_threshold(self) -> float:
        return self.alpha + self.slack

    threshold = miscoverage_threshold

    @property
    def vacuous(self) -> bool:
        return self.miscoverage_threshold >= 1 or self.failure_probability >= 1

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "alpha": self.alpha,
            "terms": dict(self.terms),
            "threshold": self.miscoverage_threshold,
            "failure_probability": self.failure_probability,
            "vacuous": self.vacuous,
            **({"extras": dict(self.extras)} if self.extras else {}),
        }


def _clamp(p: float) -> float:
    return min(1.0, max(0.0, p))


def _result(name, inp: BoundInputs, terms, failure, **extras) -> BoundResult:
    return BoundResult(name, inp.alpha, terms, _clamp(failure), extras)


def shorthand_A(inp: BoundInputs) -> float:
    """``2 kappa2 c_{n-1} (1/kappa1 + sqrt(n / (2 kappa1^2) * log(2p/eps)))``."""
    n, k1 = inp.n, inp.kappa1
    c = inp.c_n_fn(n - 1) if n > 1 else inp.c_n_fn(1)
    return 2.0 * inp.kappa2 * c * (1.0 / k1 + math.sqrt(n / (2.0 * k1 * k1) * math.log(2.0 * inp.p / inp.epsilon)))


def shorthand_E(inp: BoundInputs) -> float:
    """``c_{n+1} + sqrt(2 n log(2p/eps)) * kappa2 c_n / kappa1``."""
    n = inp.n
    return inp.c_n_fn(n + 1) + math.sqrt(2.0 * n * math.log(2.0 * inp.p / inp.epsilon)) * inp.kappa2 * inp.c_n_fn(n) / inp.kappa1


def _weighted_dkw_slack(inp: BoundInputs, size: int) -> float:
    B = inp.B
    return (math.sqrt(2.0 * B * math.log(4.0 / inp.delta)) + 3.0 * inp.C) * math.sqrt(B / size)


def _exch_dkw_slack(inp: BoundInputs) -> float:
    return math.sqrt(math.log(2.0 / inp.delta) / (2.0 * inp.n))


def split_bound(inp: BoundInputs) -> BoundResult:
    """Split conformal with calibration size ``m`` under ``dQ/dP <= B``."""
    return _result("split", inp, {"weighted_dkw": _weighted_dkw_slack(inp, inp.m)}, inp.delta)


def split_bound_second_moment(inp: BoundInputs) -> BoundResult:
    """Split conformal under ``||dQ/dP||_{P,2} <= K2``; slow ``1/(delta sqrt(m))`` rate."""
    slack = 2.0 * inp.K2 * (3.0 * inp.C + 1.0) / (inp.delta * math.sqrt(inp.m))
    return _result("split_second_moment", inp, {"second_moment_dkw": slack}, inp.delta)


def jackknife_bound_exch(inp: BoundInputs) -> BoundResult:
    terms = {"dkw": _exch_dkw_slack(inp), "stability": inp.L * shorthand_A(inp)}
    return _result("jackknife_plus_exch", inp, terms, inp.epsilon + inp.delta)


def jackknife_bound_shift(inp: BoundInputs) -> BoundResult:
    terms = {"weighted_dkw": _weighted_dkw_slack(inp, inp.n), "stability": inp.L_Q * shorthand_A(inp)}
    return _result("jackknife_plus_shift", inp, terms, inp.epsilon + inp.delta)


def cv_plus_bound(inp: BoundInputs) -> BoundResult:
    """CV+ with folds of size ``m``; tight when ``m / n -> 0``."""
    n, m, k1 = inp.n, inp.m, inp.kappa1
    if m >= n:
        raise ValueError("fold size m must be smaller than n")
    root = math.sqrt(n / (2.0 * k1 * k1) * math.log(2.0 * inp.p / inp.epsilon))
    stab = 2.0 * m * inp.L * inp.kappa2 * inp.c_n_fn(n - m) * (1.0 / k1 + root)
    return _result("cv_plus", inp, {"dkw": _exch_dkw_slack(inp), "stability": stab}, inp.epsilon + inp.delta)


def full_bound_exch(inp: BoundInputs) -> BoundResult:
    terms = {"dkw": _exch_dkw_slack(inp), "stability": inp.L * shorthand_E(inp)}
    return _result("full_exch", inp, terms, inp.epsilon + inp.delta)


def full_bound_shift(inp: BoundInputs) -> BoundResult:
    terms = {"weighted_dkw": _weighted_dkw_slack(inp, inp.n), "stability": inp.L_Q * shorthand_E(inp)}
    return _result("full_shift", inp, terms, inp.epsilon + inp.delta)


def bian_cv_bound(alpha: float, delta: float, K: int, m: int) -> BoundResult:
    """Distribution-free K-fold CV+ bound ``2 alpha + sqrt(2 log(K/delta) / m)``.

    The doubled ``alpha`` is recorded as an ``extra_alpha`` term so that the
    threshold still equals ``alpha`` plus the terms.
    """
    terms = {"extra_alpha": alpha, "dkw": math.sqrt(2.0 * math.log(K / delta) / m)}
    return BoundResult("bian_cv_plus", alpha, terms, _clamp(delta), {"K": K, "m": m})


def _liang_at(inp: BoundInputs, m: int, psi_constant: float) -> tuple[dict, float, float]:
    psi = psi_constant * m * inp.c_n_fn(max(inp.n - 1, 1))
    root = (psi / inp.gamma) ** (1.0 / 3.0)
    terms = {
        "concentration": 3.0 * math.sqrt(math.log(1.0 / inp.delta) / min(m, inp.n)),
        "stability": 2.0 * root,
    }
    return terms, 3.0 * inp.delta + root, psi


def liang_comparison_bound(inp: BoundInputs, psi_constant: float = 0.5) -> BoundResult:
    """Inflated jackknife+ bound driven by out-of-sample stability ``psi = psi_constant * m * c_{n-1}``.

    ``extras`` carries the same bound evaluated at the balancing choice
    ``m = n^{2/5}``.
    """
    if psi_constant <= 0:
        raise ValueError("psi_constant must be positive")
    terms, failure, psi = _liang_at(inp, inp.m, psi_constant)
    m_bal = max(1, round(inp.n ** 0.4))
    bal_terms, bal_failure, _ = _liang_at(inp, m_bal, psi_constant)
    bal = BoundResult("liang_balanced", inp.alpha, bal_terms, _clamp(bal_failure))
    extras = {
        "psi": psi,
        "psi_constant": psi_constant,
        "balanced_m": m_bal,
        "balanced_threshold": bal.miscoverage_threshold,
        "balanced_failure_probability": bal.failure_probability,
        "balanced_rate": inp.n ** (-0.2),
    }
    return _result("liang_inflated_jackknife_plus", inp, terms, failure, **extras)


THEOREMS = {
    "split": split_bound,
    "split_second_moment": split_bound_second_moment,
    "jackknife_exch": jackknife_bound_exch,
    "jackknife_shift": jackknife_bound_shift,
    "cv_plus": cv_plus_bound,
    "full_exch": full_bound_exch,
    "full_shift": full_bound_shift,
    "liang": liang_comparison_bound,
}


def evaluate(names, inp: BoundInputs, folds: Optional[int] = None) -> list[BoundResult]:
    """Evaluate several bounds at shared inputs; ``"bian"`` needs ``folds``."""
    out = []
    for name in names:
        if name == "bian":
            K = folds or max(2, inp.n // inp.m)
            out.append(bian_cv_bound(inp.alpha, inp.delta, K, inp.m))
        else:
            out.append(THEOREMS[name](inp))
    return out


def ridge_inputs(config: RidgeConfig, **kw) -> BoundInputs:
    """:class:`BoundInputs` with the ridge stability constants filled in."""
    prof = stability_profile(config)
    kw.setdefault("p", config.p)
    return BoundInputs(c_n_fn=prof.c, kappa1=prof.kappa1, kappa2=prof.kappa2, **kw)
