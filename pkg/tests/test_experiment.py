import json
import math

import numpy as np
import pytest
from scipy import stats

from covshift_cp.bounds import BoundResult, split_bound, BoundInputs
from covshift_cp.core import Dataset, LikelihoodRatio, RngStream
from covshift_cp.experiment import (
    ShiftScenario,
    beta_oracle_check,
    dkw_study,
    estimate_nu,
    estimate_pe,
    make_scenario_bounded,
    make_scenario_second_moment,
    run_experiment,
)
from covshift_cp.methods import MethodConfig
from covshift_cp.ridge import RidgeConfig, stability_profile

ALPHA, M = 0.1, 99


def ridge_for(sc, lam=0.01):
    return RidgeConfig(lam, sc.p, sc.b, sc.I)


@pytest.fixture(scope="module")
def iid_split_report():
    sc = make_scenario_bounded(0.0)
    return run_experiment(MethodConfig(ALPHA, "split", n_cal=M), sc, 100 + M, 1000, 4000, ridge_for(sc), master_seed=11, threads=4)


def test_bounded_scenario_constants():
    assert make_scenario_bounded(0.0).ratio.regime == "unweighted"
    assert make_scenario_bounded(0.0).ratio.bound_value == 1.0
    assert make_scenario_bounded(0.5).ratio.bound_value == 3.0
    with pytest.raises(ValueError):
        make_scenario_bounded(1.0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_bounded_ratio_never_exceeds_B(seed):
    sc = make_scenario_bounded(0.8)
    B = sc.ratio.bound_value
    Xq = sc.sample_Q_x(RngStream(seed), 10**6)
    r = sc.ratio(Xq)  # raises if any value exceeds B
    assert r.max() <= B
    assert np.all(np.linalg.norm(Xq, axis=1) <= sc.b + 1e-12)


def test_bounded_ratio_is_the_density_ratio():
    sc = make_scenario_bounded(0.5)
    n = 200_000
    P = sc.sample_P(RngStream(1), n)
    mean_r = sc.ratio(P.X).mean()
    se = sc.ratio(P.X).std() / math.sqrt(n)
    assert abs(mean_r - 1) < 3 * se
    # reweighting P by the ratio reproduces the Q mean of x1
    xq = sc.sample_Q_x(RngStream(2), n)[:, 0]
    w = sc.ratio(P.X)
    est = np.sum(w * P.X[:, 0]) / np.sum(w)
    assert est == pytest.approx(xq.mean(), abs=5 * xq.std() / math.sqrt(n) + 5 * P.X[:, 0].std() / math.sqrt(n))


def test_second_moment_scenario_identities():
    k = 1.05
    sc = make_scenario_second_moment(k)
    assert sc.ratio.regime == "second_moment" and sc.ratio.bound_value == k
    n = 400_000
    r = sc.ratio(sc.sample_P(RngStream(3), n).X)
    assert abs(r.mean() - 1) < 3 * r.std() / math.sqrt(n)
    r2 = r**2
    assert abs(r2.mean() - k**2) < 3 * r2.std() / math.sqrt(n)
    assert make_scenario_second_moment(1.0).ratio.regime == "unweighted"
    near = make_scenario_second_moment(1 + 1e-10)
    X = np.zeros((50, 3))
    X[:, 0] = np.linspace(-0.5, 0.5, 50)
    np.testing.assert_allclose(near.ratio(X), 1.0, atol=1e-4)
    with pytest.raises(ValueError):
        make_scenario_second_moment(0.9)
    with pytest.raises(ValueError):
        make_scenario_second_moment(math.inf)


def test_shared_conditional():
    sc = make_scenario_bounded(0.5)
    P = sc.sample_P(RngStream(4), 50_000)
    y2 = sc.sample_y_given_x(RngStream(5), P.X)
    assert stats.ks_2samp(P.y, y2).pvalue > 0.001


@pytest.mark.parametrize("make", [lambda: make_scenario_bounded(0.5), lambda: make_scenario_second_moment(1.05)])
def test_true_score_cdf(make):
    sc = make()
    Xq = sc.sample_Q_x(RngStream(6), 100_000)
    y = sc.sample_y_given_x(RngStream(7), Xq)
    assert stats.kstest(np.abs(y), sc.true_score_cdf_Q).pvalue > 0.001


class _FourPoints:
    """Q cycles deterministically through four points, so miscoverage is an exact count."""

    pts = np.array([[-0.3], [-0.1], [0.1], [0.3]])
    ys = np.array([0.5, -0.2, 0.0, 0.9])

    def sample_Q_x(self, rng, count):
        return np.tile(self.pts, (count // 4, 1))

    def sample_y_given_x(self, rng, X):
        return self.ys[np.searchsorted(self.pts[:, 0], X[:, 0])]


def test_estimate_pe_trivial_predictors():
    sc = make_scenario_bounded(0.5)
    whole = lambda X: (np.full(len(X), -np.inf), np.full(len(X), np.inf))  # noqa: E731
    empty = lambda X: (np.ones(len(X)), np.zeros(len(X)))  # noqa: E731
    assert estimate_pe(whole, sc, 1000, RngStream(0)).pe_estimate == 0.0
    r = estimate_pe(empty, sc, 1000, RngStream(0))
    assert r.pe_estimate == 1.0 and r.pe_stderr == 0.0
    with pytest.raises(ValueError):
        estimate_pe(whole, sc, 0, RngStream(0))


def test_estimate_pe_enumeration():
    sc = _FourPoints()
    band = lambda X: (X[:, 0] - 0.25, X[:, 0] + 0.25)  # noqa: E731
    expected = np.mean(~((sc.ys >= sc.pts[:, 0] - 0.25) & (sc.ys <= sc.pts[:, 0] + 0.25)))
    r = estimate_pe(band, sc, 400, RngStream(0))
    assert r.pe_estimate == expected == 0.5
    assert r.pe_stderr == pytest.approx(math.sqrt(0.25 / 400))
    assert r.pe_stderr <= 0.5 / math.sqrt(400)


def test_run_experiment_single_trial():
    sc = make_scenario_bounded(0.5)
    rep = run_experiment(MethodConfig(0.1, "jaw"), sc, 30, 1, 500, ridge_for(sc))
    assert len(rep.trials) == 1
    assert len(set(rep.pe_deciles.values())) == 1


def test_run_experiment_thread_invariance():
    sc = make_scenario_bounded(0.5)
    bounds = [split_bound(BoundInputs(m=40, B=3.0))]
    a = run_experiment(MethodConfig(0.1, "split", weighted=True, n_cal=40), sc, 80, 16, 1000, ridge_for(sc), bounds, 9, threads=1)
    b = run_experiment(MethodConfig(0.1, "split", weighted=True, n_cal=40), sc, 80, 16, 1000, ridge_for(sc), bounds, 9, threads=8)
    assert a.to_json(include_wall_time=False) == b.to_json(include_wall_time=False)
    doc = json.loads(a.to_json())
    assert list(doc) == ["config", "trials", "pe_deciles", "mean_pe", "exceedance", "bounds", "wall_time_s"]
    assert all(0 <= v <= 1 for v in doc["exceedance"].values())
    assert len(doc["trials"]) == 16


def test_run_experiment_reports_failing_trial():
    sc = make_scenario_bounded(0.5)
    broken = ShiftScenario(
        "broken", sc.p, sc.b, sc.I, sc.sample_P, sc.sample_Q_x, sc.sample_y_given_x,
        LikelihoodRatio.bounded(lambda X: np.full(len(X), 5.0), 3.0),
    )
    with pytest.raises(RuntimeError, match=r"trial 0 failed \(master_seed=4, stream_id=0\)"):
        run_experiment(MethodConfig(0.1, "jaw"), broken, 20, 2, 100, ridge_for(sc), master_seed=4)


def test_exports(tmp_path):
    sc = make_scenario_bounded(0.5)
    rep = run_experiment(MethodConfig(0.1, "split", n_cal=20), sc, 40, 5, 200, ridge_for(sc), master_seed=1)
    rep.write_trials_csv(tmp_path / "t.csv")
    rep.write_histogram_csv(tmp_path / "h.csv", bins=4)
    t = (tmp_path / "t.csv").read_text().splitlines()
    assert t[0] == "trial_id,seed,pe,pe_stderr,median_width" and len(t) == 6
    h = (tmp_path / "h.csv").read_text().splitlines()
    assert h[0] == "bin_left,bin_right,count"
    assert sum(int(line.split(",")[2]) for line in h[1:]) == 5


def test_iid_split_mean_matches_rank_argument(iid_split_report):
    k = math.ceil((1 - ALPHA) * (M + 1))
    exact = 1 - k / (M + 1)
    assert abs(iid_split_report.mean_pe - exact) < 3 * iid_split_report.aggregate_stderr


@pytest.mark.parametrize("delta", [0.05, 0.2])
def test_classical_exceedance_validity(iid_split_report, delta):
    thr = ALPHA + math.sqrt(math.log(2 / delta) / (2 * M))
    freq = np.mean(iid_split_report.pe > thr)
    R = len(iid_split_report.trials)
    assert freq <= delta + 3 * math.sqrt(delta * (1 - delta) / R)


def test_beta_oracle_guard():
    sc = make_scenario_bounded(0.0)
    rep = run_experiment(MethodConfig(0.1, "jackknife_plus"), sc, 20, 2, 100, ridge_for(sc))
    with pytest.raises(ValueError, match="oracle applies to split only"):
        beta_oracle_check(rep, 0.1, 19)


def test_beta_oracle_negative_control():
    sc = make_scenario_bounded(0.8)
    rep = run_experiment(MethodConfig(ALPHA, "split", n_cal=M), sc, 100 + M, 300, 2000, ridge_for(sc), master_seed=2, threads=4)
    _, ok = beta_oracle_check(rep, ALPHA, M)
    assert not ok


def test_estimate_nu():
    sc = make_scenario_bounded(0.5)
    cfg = ridge_for(sc, 0.1)
    d = sc.sample_P(RngStream(1), 40)
    half_c = stability_profile(cfg).c(40) / 2
    assert estimate_nu(d, cfg, sc, half_c, 2000, RngStream(2)) == 0.0
    assert estimate_nu(d, cfg, sc, 0.0, 2000, RngStream(2)) > 0.99
    assert estimate_nu(d, cfg, sc, 1e-3, 500, RngStream(3)) == estimate_nu(d, cfg, sc, 1e-3, 500, RngStream(3))


@pytest.mark.parametrize("delta", [0.05, 0.2])
def test_lemma_a1_validity(delta):
    study = dkw_study(make_scenario_bounded(0.5), [400], 200, delta=delta, master_seed=3)
    assert study["rows"][0]["exceedance"] <= delta


def test_dkw_study_other_lemmas():
    s3 = dkw_study(make_scenario_bounded(0.5), [400], 20, lemma="a3")
    s2 = dkw_study(make_scenario_second_moment(1.05), [400], 20, lemma="a2")
    for s in (s2, s3):
        row = s["rows"][0]
        assert 0 < row["median_deviation"] < row["threshold"]
