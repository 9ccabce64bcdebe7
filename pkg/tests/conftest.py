import numpy as np
import pytest

from covshift_cp.core import Dataset


def random_dataset(rng: np.random.Generator, n: int, p: int, b: float = 1.0, I: float = 1.0) -> Dataset:  # noqa: E741
    """Uniform draws inside the (b, I) domain, features in the ball and responses in [-I, I]."""
    X = rng.standard_normal((n, p))
    X *= (b * rng.random(n) ** (1.0 / p) / np.linalg.norm(X, axis=1))[:, None]
    y = I * rng.uniform(-1.0, 1.0, n)
    return Dataset(X, y, b, I)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
