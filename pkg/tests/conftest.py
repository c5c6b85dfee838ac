import numpy as np
import pytest

from loreopt.oracles import GradientOracle

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def report_criterion():
    """Record one PASS/FAIL line for the acceptance summary, then assert."""
    def _report(number, title, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {title}" + (f" -- {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line
    return _report


class HalfSquare(GradientOracle):
    """f(X) = c/2 ||X||^2 on given shapes, exact gradients, optional isotropic noise."""

    name = "half_square"

    def __init__(self, shapes=((2, 2),), c=1.0, sigma=0.0, x0=None):
        self.shapes = [tuple(s) for s in shapes]
        self.c = c
        self.smoothness = c
        self.variance_bound = sigma ** 2
        self.optimum_value = 0.0
        self.noise = sigma
        self.x0 = x0

    def loss(self, xs):
        return 0.5 * self.c * sum(float(np.sum(x * x)) for x in xs)

    def true_grad(self, xs):
        return [self.c * np.asarray(x, dtype=float) for x in xs]

    def stoch_grad(self, xs, batch, rng):
        gen = rng.generator()
        total = sum(int(np.prod(s)) for s in self.shapes)
        scale = self.noise / np.sqrt(total * batch)
        return [g + scale * gen.standard_normal(g.shape) for g in self.true_grad(xs)]

    def initial_point(self):
        if self.x0 is not None:
            return [np.array(x, dtype=float) for x in self.x0]
        return [np.arange(1.0, np.prod(s) + 1).reshape(s) for s in self.shapes]


@pytest.fixture
def half_square():
    return HalfSquare
