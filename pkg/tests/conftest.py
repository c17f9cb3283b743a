import numpy as np
import pytest

from owra.scores import Batch, ScoreRecord

_CRITERIA: list[str] = []


def record_criterion(number, title: str, passed: bool, detail: str = "") -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}"
    if detail:
        line += f" ({detail})"
    _CRITERIA.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: s.split("criterion ")[1].split(":")[0].zfill(4)):
            terminalreporter.write_line(line)


def make_batch(softmax, evm=None, index=1):
    softmax = list(softmax)
    evm = list(evm) if evm is not None else [0.5] * len(softmax)
    return Batch(index, tuple(ScoreRecord(f"s{i}", float(a), float(b)) for i, (a, b) in enumerate(zip(softmax, evm))))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def two_clusters(seed=0, n=50, sigma=0.5, sep=10.0):
    g = np.random.default_rng(seed)
    a = g.normal([0.0, 0.0], sigma, (n, 2))
    b = g.normal([sep, 0.0], sigma, (n, 2))
    x = np.vstack([a, b])
    y = np.r_[np.ones(n, int), np.full(n, 2)]
    return x, y
