import numpy as np
import pytest

from tlinformer.model import ModelConfig
from tlinformer.tensor import ledger_reset


@pytest.fixture(autouse=True)
def _fresh_ledger():
    ledger_reset()
    yield


@pytest.fixture
def micro_cfg():
    return ModelConfig(vocab_size=11, D=8, n_head=2, H=1, n_blocks=2, Woh=4, Wog=4, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` w.r.t. array ``x`` (mutated in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        fp = f()
        x[i] = orig - eps
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance criterion outcome; the line is printed now and in the run summary."""

    def record(num: int, title: str, passed: bool, detail: str = "") -> None:
        line = f"criterion {num} {'PASS' if passed else 'FAIL'}: {title}" + (f" [{detail}]" if detail else "")
        print(line)
        ACCEPTANCE_LINES.append(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
