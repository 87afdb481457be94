import numpy as np
import pytest


def smooth_2d(X):
    return np.sin(3 * X[:, 0]) * np.cos(2 * X[:, 1]) + 0.5 * np.sin(5 * X[:, 0] * X[:, 1])


def make_2d_task(seed, n_train=4096, n_test=1024, noise=0.1):
    """Standardized 2-D regression task shared by fusion/harness tests."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, (n_train, 2))
    Xt = rng.uniform(-2, 2, (n_test, 2))
    y = smooth_2d(X) + noise * rng.standard_normal(n_train)
    yt = smooth_2d(Xt) + noise * rng.standard_normal(n_test)
    return X, y, Xt, yt


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion and assert it."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(label, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {label}" + (f"  ({detail})" if detail else "")
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
