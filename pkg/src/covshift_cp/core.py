"""Domain types, CSV ingestion, seeded random streams and the residual score.

Every real is a float64. Datasets carry their declared domain bounds
``b`` (``||x||_2 <= b``) and ``I`` (``|y| <= I``) and refuse samples that
violate them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "BOUND_RTOL",
    "DataError",
    "Dataset",
    "LikelihoodRatio",
    "RngStream",
    "Sample",
    "SplitSpec",
    "abs_residual_score",
    "load_csv",
    "split",
]

# Relative slack on the declared bounds; absorbs rounding in generated data.
BOUND_RTOL = 1e-12


class DataError(ValueError):
    """Raised for malformed or out-of-domain input data."""


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: float

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", float(self.y))
        if not (np.all(np.isfinite(x)) and math.isfinite(self.y)):
            raise DataError("sample entries must be finite")


class Dataset:
    """Ordered labelled points with declared bounds on features and response.

    Parameters
    ----------
    X : array-like of shape (n, p)
    y : array-like of shape (n,)
    b : float
        Bound on the Euclidean norm of every feature vector.
    I : float
        Bound on the absolute response.
    """

    def __init__(self, X, y, b: float, I: float):  # noqa: E741
        X = np.array(X, dtype=np.float64, copy=True)
        y = np.array(y, dtype=np.float64, copy=True).reshape(-1)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if y.size != 1 else X.reshape(1, -1)
        if X.ndim != 2:
            raise DataError("X must be two-dimensional")
        if X.shape[0] == 0:
            raise DataError("empty dataset")
        if X.shape[0] != y.shape[0]:
            raise DataError(f"X has {X.shape[0]} rows but y has {y.shape[0]} entries")
        if not (b > 0 and I > 0):
            raise DataError("bounds b and I must be positive")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("dataset entries must be finite")
        bad = _bound_violations(X, y, b, I)
        if bad.size:
            i = int(bad[0])
            raise DataError(
                f"row {i + 1} violates the domain bounds "
                f"(||x||_2={np.linalg.norm(X[i]):.6g}, b={b}; |y|={abs(y[i]):.6g}, I={I})"
            )
        X.setflags(write=False)
        y.setflags(write=False)
        self.X = X
        self.y = y
        self.b = float(b)
        self.I = float(I)  # noqa: E741

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], b: float, I: float) -> "Dataset":  # noqa: E741
        if not samples:
            raise DataError("empty dataset")
        return cls(np.stack([s.x for s in samples]), [s.y for s in samples], b, I)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def samples(self) -> list[Sample]:
        return [Sample(x, y) for x, y in zip(self.X, self.y)]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(self.X[idx], self.y[idx], self.b, self.I)

    def without(self, i: int) -> "Dataset":
        keep = np.ones(self.n, dtype=bool)
        keep[i] = False
        return Dataset(self.X[keep], self.y[keep], self.b, self.I)

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        return f"Dataset(n={self.n}, p={self.p}, b={self.b}, I={self.I})"


def _bound_violations(X: np.ndarray, y: np.ndarray, b: float, I: float) -> np.ndarray:  # noqa: E741
    norms = np.linalg.norm(X, axis=1)
    bad = (norms > b * (1 + BOUND_RTOL)) | (np.abs(y) > I * (1 + BOUND_RTOL))
    return np.flatnonzero(bad)


@dataclass(frozen=True)
class SplitSpec:
    train_indices: np.ndarray
    cal_indices: np.ndarray

    def __post_init__(self):
        tr = np.asarray(self.train_indices, dtype=np.intp)
        ca = np.asarray(self.cal_indices, dtype=np.intp)
        if tr.size == 0 or ca.size == 0:
            raise ValueError("train and calibration index sets must be nonempty")
        if np.intersect1d(tr, ca).size:
            raise ValueError("train and calibration index sets overlap")
        object.__setattr__(self, "train_indices", tr)
        object.__setattr__(self, "cal_indices", ca)


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(master_seed, stream_id)``.

    The draw sequence depends only on the two integers, never on call order
    elsewhere in the program, so parallel trials stay bit-reproducible.
    """

    master_seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("master_seed", "stream_id"):
            v = int(getattr(self, name))
            if not 0 <= v < 2**64:
                raise ValueError(f"{name} must fit in an unsigned 64-bit integer")
            object.__setattr__(self, name, v)

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.master_seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(seq))

    def derive(self, sub: int) -> "RngStream":
        """Child stream; distinct ``sub`` values give independent streams."""
        seq = np.random.SeedSequence(entropy=self.master_seed, spawn_key=(self.stream_id, int(sub)))
        child_id = int(seq.generate_state(1, dtype=np.uint64)[0])
        return RngStream(self.master_seed, child_id)


_REGIMES = ("bounded", "second_moment", "unweighted")


@dataclass(frozen=True)
class LikelihoodRatio:
    """Known covariate likelihood ratio dQ_X/dP_X.

    ``func`` maps an ``(k, p)`` array of feature rows to ``k`` nonnegative
    ratios. In the ``bounded`` regime every evaluated value is checked
    against ``bound_value``.
    """

    func: Callable[[np.ndarray], np.ndarray]
    regime: str = "unweighted"
    bound_value: float = 1.0

    def __post_init__(self):
        if self.regime not in _REGIMES:
            raise ValueError(f"regime must be one of {_REGIMES}")
        if not self.bound_value > 0:
            raise ValueError("bound_value must be positive")

    @classmethod
    def unweighted(cls) -> "LikelihoodRatio":
        return cls(_ones, "unweighted", 1.0)

    @classmethod
    def bounded(cls, func, B: float) -> "LikelihoodRatio":
        return cls(func, "bounded", float(B))

    @classmethod
    def second_moment(cls, func, K: float) -> "LikelihoodRatio":
        return cls(func, "second_moment", float(K))

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.regime == "unweighted":
            return np.ones(X.shape[0])
        r = np.asarray(self.func(X), dtype=np.float64).reshape(-1)
        if r.shape[0] != X.shape[0]:
            raise ValueError("likelihood ratio returned the wrong number of values")
        if np.any(~np.isfinite(r)) or np.any(r < 0):
            raise ValueError("likelihood ratio must be finite and nonnegative")
        if self.regime == "bounded" and np.any(r > self.bound_value * (1 + BOUND_RTOL)):
            raise ValueError(
                f"likelihood ratio {r.max():.6g} exceeds its declared bound B={self.bound_value}"
            )
        return r

    def at(self, x) -> float:
        return float(self(np.asarray(x, dtype=np.float64).reshape(1, -1))[0])


def _ones(X):
    return np.ones(np.atleast_2d(X).shape[0])


def load_csv(path, p: int, b: float, I: float) -> Dataset:  # noqa: E741
    """Read ``x1,...,xp,y`` rows (one header line) into a :class:`Dataset`.

    Row numbers in error messages count data rows from 1, excluding the header.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    rows: list[list[float]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError("empty dataset")
        if len(header) != p + 1:
            raise DataError(f"header has {len(header)} columns, expected {p + 1}")
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != p + 1:
                raise DataError(f"row {lineno}: expected {p + 1} fields, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise DataError(f"row {lineno}: non-numeric field") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"row {lineno}: non-finite field")
            rows.append(vals)
    if not rows:
        raise DataError("empty dataset")
    arr = np.asarray(rows)
    return Dataset(arr[:, :p], arr[:, p], b, I)


def split(dataset: Dataset, n_train: int, rng: RngStream, ordered: bool = False) -> SplitSpec:
    """Partition ``[n]`` into ``n_train`` training and ``n - n_train`` calibration indices.

    With ``ordered=True`` the first ``n_train`` rows train, as in the usual
    textbook presentation; otherwise a seeded permutation decides.
    """
    n = dataset.n
    if not 1 <= n_train < n:
        raise ValueError(f"n_train must satisfy 1 <= n_train < n (got {n_train}, n={n})")
    order = np.arange(n) if ordered else rng.generator().permutation(n)
    return SplitSpec(np.sort(order[:n_train]), np.sort(order[n_train:]))


def abs_residual_score(y, prediction):
    """Absolute residual ``|y - prediction|``; broadcasts over arrays."""
    if np.ndim(y) or np.ndim(prediction):
        return np.abs(np.asarray(y, dtype=np.float64) - prediction)
    return abs(float(y) - float(prediction))

