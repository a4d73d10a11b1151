import numpy as np
import pytest

from vertiglm.simulation import generate_dataset, split_blocks

PSK = bytes(range(32))


@pytest.fixture
def psk():
    return PSK


def make_split(n=200, p=6, cov=0.3, family="gaussian", seed=0, first=None):
    data = generate_dataset(n, p, cov, family, np.random.default_rng(seed))
    a, b = split_blocks(data.X, range(p // 2) if first is None else first, family)
    return a, b, data.y, data


@pytest.fixture
def gaussian_split():
    return make_split()


@pytest.fixture
def binomial_split():
    return make_split(n=400, family="binomial", seed=1)


ACCEPTANCE_LINES = []


def record(criterion, passed, detail):
    line = f"[criterion {criterion}] {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
