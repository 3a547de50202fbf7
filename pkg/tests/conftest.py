import numpy as np
import pytest

from glmtp.panel import Panel


def random_binary_panel(n, tau, seed, p_cov=1):
    """Small panel with binary treatments and gaussian covariates."""
    rng = np.random.default_rng(seed)
    L = [rng.normal(size=(n, p_cov)) for _ in range(tau)]
    A = (rng.random((n, tau)) < 0.5).astype(float)
    Y = rng.random(n)
    return Panel(L=L, A=A, Y=Y, supports=[(0.0, 1.0)] * tau, y_bounds=(0.0, 1.0))


@pytest.fixture
def small_panel():
    return random_binary_panel(40, 3, 7)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def report_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
