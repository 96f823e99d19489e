import numpy as np
import pytest

from pidenn.model import PideModel, gaussian_levy, zero_levy


def make_model(d=1, *, drift=None, diffusion=None, jump=None, driver=None, terminal=None,
               levy=None, lipschitz=1.0, horizon=1.0, **kw):
    """Model with zero coefficients unless overridden."""
    return PideModel(
        dim=d,
        horizon=horizon,
        drift=drift or (lambda x: np.zeros_like(x)),
        diffusion=diffusion or (lambda x: np.zeros((x.shape[0], d, d))),
        jump=jump or (lambda x, y: np.zeros_like(x)),
        driver=driver or (lambda t, x, y, z, w: np.zeros(np.shape(y))),
        terminal=terminal or (lambda x: np.zeros(x.shape[0])),
        levy=levy if levy is not None else zero_levy(d),
        lipschitz=lipschitz,
        **kw,
    )


@pytest.fixture
def zero_model():
    return make_model(1)


@pytest.fixture
def gauss_jump_model():
    """d=1, beta(x, y) = y, lambda = 2 N(0, 1), exact compensator 0."""
    return make_model(
        1,
        jump=lambda x, y: np.asarray(y, dtype=float).copy(),
        levy=gaussian_levy(1, 2.0),
        jump_compensator=lambda x: np.zeros_like(x),
    )


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
