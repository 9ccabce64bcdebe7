import numpy as np
import pytest

from covshift_cp.core import (
    DataError,
    Dataset,
    LikelihoodRatio,
    RngStream,
    Sample,
    SplitSpec,
    abs_residual_score,
    load_csv,
    split,
)


def write(tmp_path, text):
    path = tmp_path / "d.csv"
    path.write_text(text)
    return path


def test_load_csv_preserves_order(tmp_path):
    path = write(tmp_path, "x1,x2,y\n0.1,0.2,0.5\n-0.3,0.0,-0.2\n0.0,0.4,0.9\n")
    d = load_csv(path, 2, 1.0, 1.0)
    assert d.n == 3 and d.p == 2
    np.testing.assert_array_equal(d.y, [0.5, -0.2, 0.9])
    np.testing.assert_array_equal(d.X[1], [-0.3, 0.0])


def test_load_csv_bound_violation_names_row(tmp_path):
    path = write(tmp_path, "x1,x2,y\n0.1,0.2,0.5\n0.9,1.2,0.1\n")
    with pytest.raises(DataError, match="row 2"):
        load_csv(path, 2, 1.0, 1.0)


def test_load_csv_empty(tmp_path):
    with pytest.raises(DataError, match="empty dataset"):
        load_csv(write(tmp_path, "x1,y\n"), 1, 1.0, 1.0)


@pytest.mark.parametrize("body,msg", [("1,2,3,4\n", "row 1"), ("0.1,abc,0.2\n", "non-numeric")])
def test_load_csv_malformed(tmp_path, body, msg):
    with pytest.raises(DataError, match=msg):
        load_csv(write(tmp_path, "x1,x2,y\n" + body), 2, 1.0, 1.0)


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.array([[2.0]]), np.array([0.0]), 1.0, 1.0)
    with pytest.raises(DataError):
        Dataset(np.array([[0.5]]), np.array([1.5]), 1.0, 1.0)
    with pytest.raises(DataError, match="empty"):
        Dataset(np.zeros((0, 1)), np.zeros(0), 1.0, 1.0)
    d = Dataset(np.array([[0.5]]), np.array([0.5]), 1.0, 1.0)
    with pytest.raises(ValueError):
        d.X[0, 0] = 0.0


def test_dataset_samples_roundtrip():
    d = Dataset(np.array([[0.1, 0.2], [0.3, 0.4]]), np.array([0.1, -0.1]), 1.0, 1.0)
    back = Dataset.from_samples(d.samples, 1.0, 1.0)
    np.testing.assert_array_equal(back.X, d.X)
    assert isinstance(d.samples[0], Sample)
    assert d.without(0).n == 1


def test_split_cardinality_and_determinism():
    d = Dataset(np.linspace(-0.5, 0.5, 10)[:, None], np.zeros(10), 1.0, 1.0)
    a = split(d, 7, RngStream(3))
    b = split(d, 7, RngStream(3))
    assert len(a.train_indices) == 7 and len(a.cal_indices) == 3
    assert not set(a.train_indices) & set(a.cal_indices)
    np.testing.assert_array_equal(a.train_indices, b.train_indices)
    two = Dataset(np.array([[0.1], [0.2]]), np.zeros(2), 1.0, 1.0)
    s = split(two, 1, RngStream(0))
    assert len(s.train_indices) == 1 and len(s.cal_indices) == 1
    with pytest.raises(ValueError):
        split(d, 10, RngStream(0))
    o = split(d, 7, RngStream(0), ordered=True)
    np.testing.assert_array_equal(o.train_indices, np.arange(7))


def test_splitspec_invariants():
    with pytest.raises(ValueError):
        SplitSpec(np.array([0, 1]), np.array([1, 2]))
    with pytest.raises(ValueError):
        SplitSpec(np.array([], dtype=int), np.array([1]))


def test_rng_stream_reproducible_and_distinct():
    a = RngStream(5, 2).generator().random(4)
    b = RngStream(5, 2).generator().random(4)
    c = RngStream(5, 3).generator().random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert RngStream(5, 2).derive(1) == RngStream(5, 2).derive(1)
    assert RngStream(5, 2).derive(1) != RngStream(5, 2).derive(2)


def test_likelihood_ratio_regimes():
    X = np.array([[0.0], [0.5]])
    np.testing.assert_array_equal(LikelihoodRatio.unweighted()(X), [1.0, 1.0])
    r = LikelihoodRatio.bounded(lambda X: 1.0 + X[:, 0], 1.5)
    assert r.at([0.5]) == 1.5
    with pytest.raises(ValueError, match="exceeds"):
        LikelihoodRatio.bounded(lambda X: 1.0 + X[:, 0], 1.2)(X)
    with pytest.raises(ValueError):
        LikelihoodRatio.second_moment(lambda X: X[:, 0] - 1.0, 2.0)(X)


@pytest.mark.parametrize("y,pred,expected", [(3.0, 1.0, 2.0), (0.7, 0.7, 0.0), (-1.0, 2.5, 3.5)])
def test_abs_residual_score(y, pred, expected):
    assert abs_residual_score(y, pred) == expected
