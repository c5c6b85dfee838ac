import math

import numpy as np
import pytest

from loreopt.errors import InvalidConstruction, InvalidInput, OracleContractViolation, ShapeError
from loreopt.linalg import RandomSource, gaussian_matrix, read_matrix
from loreopt.oracles import (
    ORACLES,
    QuadraticCE,
    RandomQuadratic,
    SparseTrap,
    SvdTrap,
    build_oracle,
    rademacher_mean,
    verify_oracle,
)


# --- quadratic with a noisy corner ---------------------------------------------

def test_ce_gradient_at_zero_is_linear_term():
    o = QuadraticCE()
    g = o.grad(np.zeros((16, 16)))
    np.testing.assert_array_equal(g, o.B)
    np.testing.assert_array_equal(g[:12, :12], o.D)
    np.testing.assert_array_equal(g[12:], 0)


def test_ce_optimum():
    o = QuadraticCE(n=10, r=3, seed=5)
    X = o.minimizer()
    assert np.max(np.abs(o.grad(X))) <= 1e-12
    assert o.objective(X) == pytest.approx(-0.5 * np.sum(o.D ** 2), rel=1e-14)
    assert o.optimum_value == pytest.approx(o.objective(X), rel=1e-14)


def test_ce_structure_and_noise():
    o = QuadraticCE(n=6, r=2, sigma=0.7)
    X = gaussian_matrix(6, 6, RandomSource(1))
    g = o.grad(X)
    np.testing.assert_array_equal(g[4:], 0)
    np.testing.assert_allclose(g[:4], X[:4] + o.B[:4])
    noisy = o.grad(X, xi=-1.0)
    diff = noisy - g
    np.testing.assert_allclose(diff[4:, 4:], -0.7 * np.eye(2))
    assert np.count_nonzero(diff) == 2
    # the noise energy is sigma^2 r, as published
    assert o.variance_bound == pytest.approx(0.7 ** 2 * 2)
    assert np.sum(diff ** 2) == pytest.approx(o.variance_bound)
    with pytest.raises(ShapeError):
        o.grad(np.zeros((5, 6)))


def test_ce_finite_differences():
    o = QuadraticCE(n=6, r=2)
    X = gaussian_matrix(6, 6, RandomSource(2))
    g = o.grad(X)
    h = 1e-5
    for i, j in [(0, 0), (1, 3), (4, 4), (5, 1), (3, 5)]:
        E = np.zeros((6, 6))
        E[i, j] = h
        fd = (o.objective(X + E) - o.objective(X - E)) / (2 * h)
        assert abs(fd - g[i, j]) <= 1e-5


def test_ce_fixed_documented_seed_and_persist(tmp_path):
    a, b = QuadraticCE(seed=3), QuadraticCE(seed=3)
    np.testing.assert_array_equal(a.D, b.D)
    np.testing.assert_array_equal(a.D, gaussian_matrix(12, 12, RandomSource(3)))
    (path,) = a.persist(tmp_path)
    np.testing.assert_array_equal(read_matrix(path), a.D)


def test_ce_construction_errors():
    for kw in (dict(n=4, r=4), dict(r=0), dict(sigma=-1)):
        with pytest.raises(InvalidConstruction):
            QuadraticCE(**kw)


# --- traps ------------------------------------------------------------------------

def test_svd_trap_gradient_and_energy():
    o = SvdTrap()
    X = o.initial_point()[0]
    g = o.grad(X)
    assert np.sum(g ** 2) == pytest.approx(o.L ** 2 * o.lam ** 2, rel=1e-15)
    assert o.eps0 == pytest.approx(0.01)
    Z = X.copy()
    Z[0] = 0
    np.testing.assert_array_equal(o.grad(Z), 0)
    noise = o.grad(X, xi=1.0) - g
    # sigma_tilde^2 * (0 + 1 + ... + n-1) = sigma^2 exactly
    assert np.sum(noise ** 2) == pytest.approx(o.noise ** 2, rel=1e-14)
    np.testing.assert_allclose(np.diag(noise), o.sigma_tilde * np.sqrt(np.arange(8)))


def test_svd_trap_validation():
    with pytest.raises(InvalidConstruction):
        SvdTrap(sigma=0.2)  # sigma_tilde = 0.038 < L lam = 0.1
    SvdTrap(n=4, lam=0.1, sigma=1.0)
    with pytest.raises(ShapeError):
        SvdTrap(init=np.zeros((3, 3)))


def test_sparse_trap_gradient_and_energy():
    o = SparseTrap()
    X = o.initial_point()[0]
    g = o.grad(X)
    assert np.sum(g ** 2) == pytest.approx(o.eps0, rel=1e-15)
    assert o.Q[0, 0] == 0 and o.Q[1, 0] == 1 and o.Q[0, 1] == math.sqrt(8)
    assert np.sum(o.Q ** 2) * o.sigma_tilde ** 2 == pytest.approx(o.noise ** 2, rel=1e-14)
    with pytest.raises(InvalidConstruction):
        SparseTrap(sigma=1.0)


def test_rademacher_mean_batches():
    draws = np.array([rademacher_mean(1, RandomSource(0, i)) for i in range(200)])
    assert set(np.unique(draws)) == {-1.0, 1.0}
    means = np.array([rademacher_mean(4, RandomSource(1, i)) for i in range(4000)])
    se = np.std(means ** 2, ddof=1) / np.sqrt(means.size)
    assert abs(np.mean(means ** 2) - 0.25) <= 3 * se


# --- random quadratic --------------------------------------------------------------

def test_random_quadratic_optimum_and_smoothness():
    o = RandomQuadratic(seed=2)
    g = o.true_grad(o.optimum)
    assert max(np.max(np.abs(x)) for x in g) <= 1e-10
    for H in o.H:
        eig = np.linalg.eigvalsh(H)
        assert eig.max() == pytest.approx(o.L, rel=1e-10)
        assert eig.min() >= o.mu * (1 - 1e-10)
    xs = o.initial_point()
    assert o.loss(xs) > o.optimum_value


def test_random_quadratic_batch_variance():
    o = RandomQuadratic(sigma=2.0)
    xs = o.initial_point()
    g = o.true_grad(xs)
    for B in (1, 4):
        e = np.array([sum(np.sum((a - b) ** 2) for a, b in zip(o.stoch_grad(xs, B, RandomSource(3).split(B, i)), g))
                      for i in range(3000)])
        se = e.std(ddof=1) / np.sqrt(e.size)
        assert abs(e.mean() - 4.0 / B) <= 3 * se


def test_build_oracle_and_errors():
    o = build_oracle({"kind": "random_quadratic", "shapes": [[2, 3]], "sigma": 0.5})
    assert o.shapes == [(2, 3)]
    with pytest.raises(InvalidInput):
        build_oracle({"kind": "nope"})
    with pytest.raises(ShapeError):
        o.loss([np.zeros((3, 2))])


# --- contracts -----------------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(ORACLES))
def test_builtin_oracles_pass_contract(name):
    report = verify_oracle(ORACLES[name](), trials=10_000, rng=RandomSource(2024))
    assert report.passed
    assert [c.name for c in report.checks] == ["unbiased", "variance", "finite_difference", "smoothness"]


def test_deterministic_oracle_variance_zero():
    report = verify_oracle(QuadraticCE(sigma=0.0), trials=200)
    var = next(c for c in report.checks if c.name == "variance")
    assert var.statistic == 0.0 and var.passed


class BiasedCE(QuadraticCE):
    name = "biased"

    def stoch_grad(self, xs, batch, rng):
        g = super().stoch_grad(xs, batch, rng)
        return [g[0] + 0.05]


class OverNoisy(QuadraticCE):
    name = "over_noisy"

    def stoch_grad(self, xs, batch, rng):
        return [self.grad(xs[0], 1.5 * rademacher_mean(batch, rng))]


class WrongGradient(RandomQuadratic):
    name = "wrong_gradient"

    def true_grad(self, xs):
        return [1.01 * g for g in super().true_grad(xs)]


def test_negative_controls():
    with pytest.raises(OracleContractViolation, match="unbiased"):
        verify_oracle(BiasedCE(), trials=10_000)
    with pytest.raises(OracleContractViolation, match="variance"):
        verify_oracle(OverNoisy(), trials=1000)
    report = verify_oracle(WrongGradient(), trials=200, raise_on_failure=False)
    failed = {c.name for c in report.checks if not c.passed}
    assert "finite_difference" in failed
    with pytest.raises(InvalidInput):
        verify_oracle(QuadraticCE(), trials=50)
