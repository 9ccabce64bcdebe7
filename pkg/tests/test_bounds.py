import math

import numpy as np
import pytest

from covshift_cp.bounds import (
    BoundInputs,
    bian_cv_bound,
    cv_plus_bound,
    evaluate,
    full_bound_exch,
    full_bound_shift,
    jackknife_bound_exch,
    jackknife_bound_shift,
    liang_comparison_bound,
    ridge_inputs,
    shorthand_A,
    shorthand_E,
    split_bound,
    split_bound_second_moment,
)
from covshift_cp.ridge import RidgeConfig


def const_c(value):
    return lambda n: value


def sig4(a, b):
    """Agreement to four significant digits."""
    return abs(a - b) <= 5e-5 * abs(b)


# worked examples --------------------------------------------------------------

def test_shorthand_A_examples():
    assert shorthand_A(BoundInputs(kappa1=1, kappa2=1)) == 0.0
    inp = BoundInputs(n=100, p=2, epsilon=0.1, kappa1=1, kappa2=2, c_n_fn=const_c(0.01))
    assert sig4(shorthand_A(inp), 0.04 * (1 + math.sqrt(50 * math.log(40))))
    assert round(shorthand_A(inp), 3) == 0.583
    doubled = inp.with_(c_n_fn=const_c(0.02))
    assert shorthand_A(doubled) == pytest.approx(2 * shorthand_A(inp))


def test_shorthand_E_examples():
    assert shorthand_E(BoundInputs()) == 0.0
    inp = BoundInputs(n=100, p=2, epsilon=0.1, kappa1=1, kappa2=2, c_n_fn=lambda n: {100: 0.01, 101: 0.0099}[n])
    assert sig4(shorthand_E(inp), 0.0099 + math.sqrt(200 * math.log(40)) * 0.02)
    assert round(shorthand_E(inp), 3) == 0.553
    vals = [shorthand_E(inp.with_(epsilon=e)) for e in (0.5, 0.2, 0.1, 0.05, 0.01)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_split_bound_examples():
    r = split_bound(BoundInputs(alpha=0.1, delta=0.1, m=10_000, B=1.2, C=1))
    assert sig4(r.miscoverage_threshold, 0.16545)
    assert r.failure_probability == 0.1
    m = 400
    r = split_bound(BoundInputs(m=m, B=1.0, C=0.0, delta=4 * math.exp(-2)))
    assert r.slack == pytest.approx(2 / math.sqrt(m))
    far = split_bound(BoundInputs(m=10**12, B=1.5))
    assert far.miscoverage_threshold - far.alpha < 1e-4


def test_split_second_moment_examples():
    r = split_bound_second_moment(BoundInputs(alpha=0.1, C=1, K2=1, delta=1.0, m=64))
    assert r.miscoverage_threshold == pytest.approx(1.1)
    assert r.vacuous
    base = BoundInputs(C=1, K2=2, delta=1.0, m=100)
    assert split_bound_second_moment(base.with_(m=400)).slack == pytest.approx(split_bound_second_moment(base).slack / 2)
    assert split_bound_second_moment(base.with_(delta=0.5)).slack == pytest.approx(2 * split_bound_second_moment(base).slack)


def test_jackknife_exch_examples():
    n, t = 500, 0.05
    r = jackknife_bound_exch(BoundInputs(n=n, delta=2 * math.exp(-2 * n * t * t)))
    assert r.miscoverage_threshold == pytest.approx(0.1 + t)
    inp = BoundInputs(epsilon=0.07, delta=0.02)
    assert jackknife_bound_exch(inp).failure_probability == pytest.approx(0.09)


def test_jackknife_shift_examples():
    a = jackknife_bound_exch(BoundInputs(B=1, C=0, L=0.7, L_Q=0.7, c_n_fn=const_c(0.01)))
    b = jackknife_bound_shift(BoundInputs(B=1, C=0, L=0.7, L_Q=0.7, c_n_fn=const_c(0.01)))
    assert a.terms["stability"] == b.terms["stability"]
    assert a.terms["dkw"] != b.terms["weighted_dkw"]
    # split-bound DKW slack at n = 10^4 plus the A example
    inp = BoundInputs(n=10_000, m=10_000, B=1.2, C=1, p=2, epsilon=0.1, kappa1=1, kappa2=2, L_Q=1.0, c_n_fn=const_c(0.01))
    r = jackknife_bound_shift(inp)
    assert r.slack == pytest.approx(split_bound(inp).slack + shorthand_A(inp))
    assert jackknife_bound_shift(BoundInputs(n=10, B=3.0)).vacuous


def test_cv_plus_examples():
    inp = BoundInputs(n=500, m=1, p=3, L=0.8, kappa1=1.0, kappa2=1.5, c_n_fn=lambda n: 1.0 / n)
    assert cv_plus_bound(inp).miscoverage_threshold == pytest.approx(jackknife_bound_exch(inp).miscoverage_threshold)
    s = [cv_plus_bound(inp.with_(m=m, c_n_fn=const_c(0.001))).terms["stability"] for m in (1, 2, 4)]
    assert s[1] == pytest.approx(2 * s[0]) and s[2] == pytest.approx(4 * s[0])
    prof = ridge_inputs(RidgeConfig(1.0, 2), alpha=0.1)
    vals = []
    for n in (10**4, 10**6, 10**8):
        m = round(n**0.25)
        vals.append(cv_plus_bound(prof.with_(n=n, m=m)).slack)
    # m / n -> 0 and m sqrt(n) c_{n-m} ~ n^{-1/4} -> 0
    assert vals[0] > vals[1] > vals[2]
    assert 5 < vals[0] / vals[2] < 20
    with pytest.raises(ValueError):
        cv_plus_bound(BoundInputs(n=10, m=10))


def test_full_bound_examples():
    assert full_bound_exch(BoundInputs()).terms["stability"] == 0.0
    inp = BoundInputs(n=100, p=2, epsilon=0.1, kappa1=1, kappa2=2, L=1.0, L_Q=1.0, c_n_fn=lambda n: {100: 0.01, 101: 0.0099}[n])
    assert full_bound_exch(inp).slack == pytest.approx(math.sqrt(math.log(20) / 200) + shorthand_E(inp))
    shift = full_bound_shift(inp.with_(m=100, B=1.2))
    assert shift.slack == pytest.approx(split_bound(inp.with_(m=100, B=1.2)).slack + shorthand_E(inp))
    assert full_bound_exch(inp.with_(epsilon=0.03, delta=0.04)).failure_probability == pytest.approx(0.07)


def test_bian_examples():
    r = bian_cv_bound(0.05, 0.1, 10, 200)
    assert sig4(r.miscoverage_threshold, 0.1 + math.sqrt(2 * math.log(100) / 200))
    assert round(r.miscoverage_threshold, 4) == 0.3146
    assert bian_cv_bound(0.05, 0.1, 1, 50).miscoverage_threshold == pytest.approx(0.1 + math.sqrt(2 * math.log(10) / 50))
    assert bian_cv_bound(0.05, 0.1, 10, 10**12).miscoverage_threshold == pytest.approx(0.1, abs=1e-5)


def test_liang_examples():
    inp = ridge_inputs(RidgeConfig(1.0, 5), n=10**6, m=1000, gamma=1e30, delta=0.1)
    r = liang_comparison_bound(inp)
    assert r.miscoverage_threshold == pytest.approx(0.1 + 3 * math.sqrt(math.log(10) / 1000), rel=1e-6)
    assert r.failure_probability == pytest.approx(0.3, rel=1e-6)
    assert r.extras["balanced_m"] == round(1e6**0.4)
    assert r.extras["balanced_rate"] == pytest.approx(1e6**-0.2)


def test_liang_larger_than_jackknife_at_comparison_point():
    # n = 10^6, gamma = 1, delta = 0.1, ridge with b = I = 1, lam = 1, L = 1
    for p in (1, 2, 5):
        inp = ridge_inputs(RidgeConfig(1.0, p), n=10**6, gamma=1.0, delta=0.1, L=1.0)
        liang = liang_comparison_bound(inp.with_(m=round(1e6**0.4)))
        jack = jackknife_bound_exch(inp)
        assert liang.slack > jack.slack


# invariants -------------------------------------------------------------------

@pytest.mark.parametrize("name", ["split", "split_second_moment", "jackknife_exch", "jackknife_shift", "cv_plus", "full_exch", "full_shift", "liang", "bian"])
def test_threshold_is_alpha_plus_terms(name):
    inp = ridge_inputs(RidgeConfig(0.5, 3), n=2000, m=40, B=2.0, K2=1.5)
    (r,) = evaluate([name], inp, folds=50)
    assert r.miscoverage_threshold == pytest.approx(r.alpha + sum(r.terms.values()), abs=1e-12)
    assert 0 <= r.failure_probability <= 1
    assert r.vacuous == (r.miscoverage_threshold >= 1 or r.failure_probability >= 1)


def _strictly(vals, direction):
    pairs = list(zip(vals, vals[1:]))
    return all(b < a for a, b in pairs) if direction < 0 else all(b > a for a, b in pairs)


def test_monotonicity_suite():
    base = BoundInputs(alpha=0.1, delta=0.1, m=500, B=2.0, C=1.0)
    grid5 = lambda lo, hi: np.geomspace(lo, hi, 5)  # noqa: E731
    thr = lambda **kw: split_bound(base.with_(**kw)).miscoverage_threshold  # noqa: E731
    assert _strictly([thr(m=int(m)) for m in grid5(10, 10**5)], -1)
    assert _strictly([thr(B=float(b)) for b in grid5(1, 50)], +1)
    assert _strictly([thr(C=float(c)) for c in grid5(0.1, 10)], +1)
    assert _strictly([thr(delta=float(d)) for d in grid5(1e-4, 0.9)], -1)
    ridge = ridge_inputs(RidgeConfig(0.5, 3), m=10, B=2.0)
    for fn in (jackknife_bound_exch, jackknife_bound_shift, full_bound_exch, full_bound_shift, cv_plus_bound):
        vals = [fn(ridge.with_(n=int(n))).miscoverage_threshold for n in grid5(100, 10**6)]
        assert _strictly(vals, -1), fn.__name__
        vals = [fn(ridge.with_(n=10**4, epsilon=float(e))).miscoverage_threshold for e in grid5(1e-4, 0.9)]
        assert _strictly(vals, -1), fn.__name__
        vals = [fn(ridge.with_(n=10**4, delta=float(d))).miscoverage_threshold for d in grid5(1e-4, 0.9)]
        assert _strictly(vals, -1), fn.__name__


@pytest.mark.parametrize("fn", [jackknife_bound_exch, jackknife_bound_shift, full_bound_exch, full_bound_shift])
def test_ridge_rate_sqrt_n(fn):
    inp = ridge_inputs(RidgeConfig(1.0, 4), B=2.0)
    scaled = [fn(inp.with_(n=n)).slack * math.sqrt(n) for n in (10**3, 10**4, 10**5, 10**6)]
    assert max(scaled) / min(scaled) < 1.5
    lo, hi = fn(inp.with_(n=100)).slack, fn(inp.with_(n=10**4)).slack
    assert 5 < lo / hi < 20  # ratio 10 up to lower-order terms


def test_liang_balanced_rate():
    inp = ridge_inputs(RidgeConfig(1.0, 4), gamma=1.0)
    scaled = []
    for n in (10**3, 10**4, 10**5, 10**6):
        r = liang_comparison_bound(inp.with_(n=n))
        scaled.append((r.extras["balanced_threshold"] - r.alpha) * n**0.2)
    assert max(scaled) / min(scaled) < 1.5


def test_inputs_validation_and_budget():
    with pytest.raises(ValueError):
        BoundInputs(B=0.9)
    with pytest.raises(ValueError):
        BoundInputs(alpha=1.2)
    b = BoundInputs.split_budget(0.1, n=50)
    assert b.epsilon == b.delta == 0.05
    assert "c_n" in ridge_inputs(RidgeConfig(1.0, 2)).to_dict()
