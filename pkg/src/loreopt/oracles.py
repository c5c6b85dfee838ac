"""Objectives and stochastic gradient oracles.

Every oracle works on a list of weight matrices (one per layer) and exposes the
true objective, its exact gradient and a seeded stochastic gradient whose
batch-``B`` version averages ``B`` independent samples. The constants needed by
the convergence theory (smoothness ``L``, variance bound ``sigma^2``, optimal
value) are published as attributes so tests can check them independently.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidConstruction, InvalidInput, OracleContractViolation, ShapeError
from .linalg import RandomSource, frob_sq, gaussian_matrix, orthonormalize, write_matrix


def rademacher_mean(batch: int, rng: RandomSource) -> float:
    """Mean of ``batch`` independent +-1 draws."""
    if batch < 1:
        raise InvalidInput(f"batch must be >= 1, got {batch}")
    xi = rng.generator().integers(0, 2, size=batch) * 2 - 1
    return float(xi.mean())


class GradientOracle(ABC):
    """Objective ``f(x) = E F(x; xi)`` over a list of layer matrices."""

    #: layer shapes, in order
    shapes: list[tuple[int, int]]
    #: smoothness constant L
    smoothness: float
    #: bound on E||grad F - grad f||^2 for a single sample
    variance_bound: float
    #: inf f when known in closed form
    optimum_value: float | None = None
    name = "oracle"

    @abstractmethod
    def loss(self, xs) -> float: ...

    @abstractmethod
    def true_grad(self, xs) -> list[np.ndarray]: ...

    @abstractmethod
    def stoch_grad(self, xs, batch: int, rng: RandomSource) -> list[np.ndarray]: ...

    @abstractmethod
    def initial_point(self) -> list[np.ndarray]: ...

    @property
    def sigma(self) -> float:
        return math.sqrt(self.variance_bound)

    def _check(self, xs):
        if len(xs) != len(self.shapes):
            raise ShapeError(f"expected {len(self.shapes)} layers, got {len(xs)}")
        for x, shape in zip(xs, self.shapes):
            if np.shape(x) != shape:
                raise ShapeError(f"layer shape {np.shape(x)} != {shape}")

    def describe(self) -> dict:
        return {"kind": self.name}

    def persist(self, directory) -> list[Path]:
        """Write construction data needed to reproduce the oracle; returns paths."""
        return []


class _SingleMatrixOracle(GradientOracle):
    """Shared plumbing for the one-layer constructions driven by a Rademacher xi."""

    n: int

    @abstractmethod
    def grad(self, X, xi: float | None = None) -> np.ndarray:
        """Exact gradient when ``xi`` is None, otherwise the noisy sample for that xi."""

    @abstractmethod
    def objective(self, X) -> float: ...

    def loss(self, xs) -> float:
        self._check(xs)
        return self.objective(xs[0])

    def true_grad(self, xs):
        self._check(xs)
        return [self.grad(xs[0])]

    def stoch_grad(self, xs, batch, rng):
        self._check(xs)
        # the oracles are linear in xi, so the batch mean is the gradient at mean(xi)
        return [self.grad(xs[0], rademacher_mean(batch, rng))]


class QuadraticCE(_SingleMatrixOracle):
    """``f(X) = 1/2 ||A X||_F^2 + <B, X>`` with noise ``xi * sigma * C``.

    ``A = [I_{n-r} 0]``, ``B = [[D, 0], [0, 0]]`` with ``D`` standard normal
    drawn from ``RandomSource(seed)``, and ``C`` the identity on the
    bottom-right r x r block. Since ``||C||_F^2 = r`` the single-sample noise
    energy is ``sigma^2 r``; that is the published ``variance_bound``.
    """

    name = "quadratic_ce"

    def __init__(self, n: int = 16, r: int = 4, sigma: float = 1.0, seed: int = 0):
        if not (1 <= r < n):
            raise InvalidConstruction(f"need 1 <= r < n, got n={n}, r={r}")
        if sigma < 0:
            raise InvalidConstruction("sigma must be non-negative")
        self.n, self.r, self.noise = n, r, float(sigma)
        self.seed = seed
        self.D = gaussian_matrix(n - r, n - r, RandomSource(seed))
        self.shapes = [(n, n)]
        self.smoothness = 1.0
        self.variance_bound = self.noise ** 2 * r
        self.optimum_value = -0.5 * frob_sq(self.D)

    @property
    def B(self) -> np.ndarray:
        B = np.zeros((self.n, self.n))
        k = self.n - self.r
        B[:k, :k] = self.D
        return B

    def minimizer(self) -> np.ndarray:
        return -self.B

    def objective(self, X) -> float:
        k = self.n - self.r
        return 0.5 * frob_sq(X[:k]) + float(np.sum(self.D * X[:k, :k]))

    def grad(self, X, xi=None):
        X = np.asarray(X, dtype=np.float64)
        if X.shape != (self.n, self.n):
            raise ShapeError(f"expected {(self.n, self.n)}, got {X.shape}")
        k = self.n - self.r
        g = np.zeros_like(X)
        g[:k] = X[:k]
        g[:k, :k] += self.D
        if xi is not None:
            g[k:, k:] += xi * self.noise * np.eye(self.r)
        return g

    def initial_point(self):
        return [np.zeros((self.n, self.n))]

    def describe(self):
        return {"kind": self.name, "n": self.n, "r": self.r, "sigma": self.noise, "seed": self.seed}

    def persist(self, directory):
        path = Path(directory) / "quadratic_ce_D.bin"
        write_matrix(path, self.D)
        return [path]


class SvdTrap(_SingleMatrixOracle):
    """``f(X) = (L/2) ||first row of X||^2`` with noise ``xi * st * diag(0, 1, sqrt 2, ...)``.

    ``st = sigma / sqrt(n (n-1) / 2)`` so that the noise energy is exactly
    ``sigma^2``. Starting from a first row ``(lam, 0, ..., 0)`` with
    ``L * lam < st``, the top singular directions of every sample are pure noise.
    """

    name = "svd_trap"

    def __init__(self, n: int = 8, L: float = 1.0, lam: float = 0.1, sigma: float = 1.0,
                 init=None, seed: int = 0):
        if n < 2:
            raise InvalidConstruction("n must be at least 2")
        if L <= 0 or lam <= 0:
            raise InvalidConstruction("L and lam must be positive")
        self.n, self.L, self.lam, self.noise = n, float(L), float(lam), float(sigma)
        self.sigma_tilde = self.noise / math.sqrt(n * (n - 1) / 2)
        if not self.L * self.lam < self.sigma_tilde:
            raise InvalidConstruction(
                f"trap needs L*lam < sigma_tilde; got {self.L * self.lam:g} >= {self.sigma_tilde:g}")
        self.seed = seed
        if init is None:
            init = gaussian_matrix(n - 1, n, RandomSource(seed, 1))
        init = np.asarray(init, dtype=np.float64)
        if init.shape != (n - 1, n):
            raise ShapeError(f"init block must be {(n - 1, n)}")
        self.init_block = init
        self.noise_diag = np.sqrt(np.arange(n, dtype=np.float64))
        self.shapes = [(n, n)]
        self.smoothness = self.L
        self.variance_bound = self.noise ** 2
        self.optimum_value = 0.0

    @property
    def eps0(self) -> float:
        return self.L ** 2 * self.lam ** 2

    def objective(self, X) -> float:
        return 0.5 * self.L * float(np.dot(X[0], X[0]))

    def grad(self, X, xi=None):
        X = np.asarray(X, dtype=np.float64)
        if X.shape != (self.n, self.n):
            raise ShapeError(f"expected {(self.n, self.n)}, got {X.shape}")
        g = np.zeros_like(X)
        g[0] = self.L * X[0]
        if xi is not None:
            g[np.diag_indices(self.n)] += xi * self.sigma_tilde * self.noise_diag
        return g

    def initial_point(self):
        first = np.zeros((1, self.n))
        first[0, 0] = self.lam
        return [np.vstack([first, self.init_block])]

    def describe(self):
        return {"kind": self.name, "n": self.n, "L": self.L, "lam": self.lam,
                "sigma": self.noise, "seed": self.seed}


class SparseTrap(_SingleMatrixOracle):
    """``f(X) = (L/2) X_00^2`` with noise ``xi * st * Q``, ``Q_ij = sqrt(j n + i)``.

    ``Q`` enumerates entries in column-major order, so only ``Q_00`` is zero.
    ``st = sigma / sqrt(n^2 (n^2 - 1) / 2)`` normalizes the noise energy to
    ``sigma^2``.
    """

    name = "sparse_trap"

    def __init__(self, n: int = 8, L: float = 1.0, lam: float = 0.1, sigma: float = 10.0,
                 init=None, seed: int = 0):
        if n < 2:
            raise InvalidConstruction("n must be at least 2")
        if L <= 0 or lam <= 0:
            raise InvalidConstruction("L and lam must be positive")
        self.n, self.L, self.lam, self.noise = n, float(L), float(lam), float(sigma)
        self.sigma_tilde = self.noise / math.sqrt(n * n * (n * n - 1) / 2)
        if not self.L * self.lam < self.sigma_tilde:
            raise InvalidConstruction(
                f"trap needs L*lam < sigma_tilde; got {self.L * self.lam:g} >= {self.sigma_tilde:g}")
        self.seed = seed
        i, j = np.indices((n, n))
        self.Q = np.sqrt(j * n + i, dtype=np.float64)
        if init is None:
            init = gaussian_matrix(n, n, RandomSource(seed, 1))
        init = np.array(init, dtype=np.float64)
        if init.shape != (n, n):
            raise ShapeError(f"init must be {(n, n)}")
        init[0, 0] = self.lam
        self.init = init
        self.shapes = [(n, n)]
        self.smoothness = self.L
        self.variance_bound = self.noise ** 2
        self.optimum_value = 0.0

    @property
    def eps0(self) -> float:
        return self.L ** 2 * self.lam ** 2

    def objective(self, X) -> float:
        return 0.5 * self.L * float(X[0, 0]) ** 2

    def grad(self, X, xi=None):
        X = np.asarray(X, dtype=np.float64)
        if X.shape != (self.n, self.n):
            raise ShapeError(f"expected {(self.n, self.n)}, got {X.shape}")
        g = np.zeros_like(X)
        g[0, 0] = self.L * X[0, 0]
        if xi is not None:
            g += xi * self.sigma_tilde * self.Q
        return g

    def initial_point(self):
        return [self.init.copy()]

    def describe(self):
        return {"kind": self.name, "n": self.n, "L": self.L, "lam": self.lam,
                "sigma": self.noise, "seed": self.seed}


class RandomQuadratic(GradientOracle):
    """Multi-layer convex quadratic with Gaussian gradient noise.

    Layer ``l`` contributes ``1/2 vec(X)^T H_l vec(X) + <B_l, X>`` where
    ``H_l`` is a dense PSD matrix on the row-major vectorization with spectrum
    spread log-uniformly over ``[mu, L]`` (``L`` attained), so the smoothness
    constant is exactly ``L`` and the minimizer is ``-H^{-1} b``. The noise is
    isotropic within each layer and split across layers in proportion to their
    size so that the total single-sample energy is ``sigma^2``.
    """

    name = "random_quadratic"

    def __init__(self, shapes=((6, 10), (9, 5)), L: float = 1.0, mu: float = 0.1,
                 sigma: float = 1.0, seed: int = 0):
        if not (0 < mu <= L):
            raise InvalidConstruction("need 0 < mu <= L")
        if sigma < 0:
            raise InvalidConstruction("sigma must be non-negative")
        self.shapes = [tuple(int(d) for d in s) for s in shapes]
        self.L, self.mu, self.noise, self.seed = float(L), float(mu), float(sigma), seed
        root = RandomSource(seed, 7)
        self.H, self.b = [], []
        for idx, (m, n) in enumerate(self.shapes):
            d = m * n
            basis = orthonormalize(gaussian_matrix(d, d, root.split(idx, 0)))
            if d == 1:
                eigs = np.array([self.L])
            else:
                u = root.split(idx, 1).generator().uniform(size=d - 1)
                eigs = np.concatenate([[self.L], self.mu * (self.L / self.mu) ** u])
            self.H.append((basis * eigs) @ basis.T)
            self.b.append(gaussian_matrix(m, n, root.split(idx, 2)).ravel())
        sizes = np.array([m * n for m, n in self.shapes], dtype=np.float64)
        self.layer_variance = self.noise ** 2 * sizes / sizes.sum()
        self.smoothness = self.L
        self.variance_bound = self.noise ** 2
        self.optimum = [-np.linalg.solve(H, b).reshape(s) for H, b, s in zip(self.H, self.b, self.shapes)]
        self.optimum_value = self.loss(self.optimum)

    def loss(self, xs) -> float:
        self._check(xs)
        total = 0.0
        for X, H, b in zip(xs, self.H, self.b):
            v = np.asarray(X, dtype=np.float64).ravel()
            total += 0.5 * float(v @ H @ v) + float(b @ v)
        return total

    def true_grad(self, xs):
        self._check(xs)
        return [(H @ np.asarray(X, dtype=np.float64).ravel() + b).reshape(s)
                for X, H, b, s in zip(xs, self.H, self.b, self.shapes)]

    def stoch_grad(self, xs, batch, rng):
        if batch < 1:
            raise InvalidInput(f"batch must be >= 1, got {batch}")
        grads = self.true_grad(xs)
        gen = rng.generator()
        out = []
        for g, var, (m, n) in zip(grads, self.layer_variance, self.shapes):
            samples = gen.standard_normal((batch, m, n)) * math.sqrt(var / (m * n))
            out.append(g + samples.mean(axis=0))
        return out

    def initial_point(self):
        root = RandomSource(self.seed, 8)
        return [gaussian_matrix(m, n, root.split(i)) for i, (m, n) in enumerate(self.shapes)]

    def describe(self):
        return {"kind": self.name, "shapes": [list(s) for s in self.shapes], "L": self.L,
                "mu": self.mu, "sigma": self.noise, "seed": self.seed}


ORACLES = {cls.name: cls for cls in (QuadraticCE, SvdTrap, SparseTrap, RandomQuadratic)}


def build_oracle(spec: dict) -> GradientOracle:
    """Construct an oracle from ``{"kind": name, **params}``."""
    params = dict(spec)
    kind = params.pop("kind", None)
    if kind not in ORACLES:
        raise InvalidInput(f"unknown oracle kind {kind!r}; expected one of {sorted(ORACLES)}")
    if kind == "random_quadratic" and "shapes" in params:
        params["shapes"] = [tuple(s) for s in params["shapes"]]
    return ORACLES[kind](**params)


# ---------------------------------------------------------------------------
# Contract verification
# ---------------------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    statistic: float
    tolerance: float
    detail: str = ""
    counterexample: dict | None = field(default=None, repr=False)


@dataclass
class Report:
    subject: str
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, check: Check) -> Check:
        self.checks.append(check)
        return check

    def lines(self) -> list[str]:
        return [f"{'PASS' if c.passed else 'FAIL'}  {self.subject}/{c.name}: "
                f"stat={c.statistic:.6g} tol={c.tolerance:.6g} {c.detail}".rstrip()
                for c in self.checks]


def _flat(grads) -> np.ndarray:
    return np.concatenate([np.ravel(g) for g in grads])


def _random_point(oracle, rng) -> list[np.ndarray]:
    return [gaussian_matrix(m, n, rng.split(i)) for i, (m, n) in enumerate(oracle.shapes)]


def verify_oracle(oracle: GradientOracle, trials: int = 10_000, rng: RandomSource | None = None,
                  fd_points: int = 10, fd_step: float = 1e-5, fd_tol: float = 1e-5,
                  raise_on_failure: bool = True) -> Report:
    """Monte-Carlo and finite-difference check of the oracle assumptions.

    * unbiasedness: ``||mean(noise)|| <= 3 * sqrt(vhat / trials)``, i.e. within
      three standard errors of the norm of the sample mean;
    * variance: single-sample ``E||noise||^2 <= variance_bound`` up to three
      standard errors of the estimate;
    * gradient: central differences agree with ``true_grad`` to ``fd_tol``
      (relative) on ``fd_points`` random points;
    * smoothness: ``||grad f(x) - grad f(y)|| <= L ||x - y||`` on random pairs.
    """
    if trials < 100:
        raise InvalidInput("verify_oracle needs at least 100 trials")
    rng = rng or RandomSource(0)
    report = Report(oracle.name)
    x0 = oracle.initial_point()
    g0 = _flat(oracle.true_grad(x0))
    noise = np.stack([_flat(oracle.stoch_grad(x0, 1, rng.split(1, i))) - g0 for i in range(trials)])

    mean = noise.mean(axis=0)
    energy = np.einsum("ij,ij->i", noise, noise)
    spread = float(np.sum((noise - mean) ** 2) / (trials - 1))
    se_mean = math.sqrt(spread / trials)
    dev = float(np.linalg.norm(mean))
    report.add(Check("unbiased", dev <= 3 * se_mean + 1e-12 * max(1.0, float(np.linalg.norm(g0))),
                     dev, 3 * se_mean, "norm of mean noise vs 3 SE"))

    vhat = float(energy.mean())
    se_var = float(energy.std(ddof=1)) / math.sqrt(trials)
    bound = oracle.variance_bound
    tol = bound + 3 * se_var + 1e-12 * max(1.0, bound)
    report.add(Check("variance", vhat <= tol, vhat, tol, f"bound sigma^2={bound:.6g}"))

    worst = 0.0
    for p in range(fd_points):
        xs = _random_point(oracle, rng.split(2, p))
        g = _flat(oracle.true_grad(xs))
        fd = np.empty_like(g)
        pos = 0
        for li, X in enumerate(xs):
            for idx in np.ndindex(X.shape):
                plus = [x.copy() for x in xs]
                minus = [x.copy() for x in xs]
                plus[li][idx] += fd_step
                minus[li][idx] -= fd_step
                fd[pos] = (oracle.loss(plus) - oracle.loss(minus)) / (2 * fd_step)
                pos += 1
        worst = max(worst, float(np.linalg.norm(fd - g)) / max(1.0, float(np.linalg.norm(g))))
    report.add(Check("finite_difference", worst <= fd_tol, worst, fd_tol, "relative error"))

    L = oracle.smoothness
    ratio = 0.0
    for p in range(fd_points):
        xs = _random_point(oracle, rng.split(3, 2 * p))
        ys = _random_point(oracle, rng.split(3, 2 * p + 1))
        num = float(np.linalg.norm(_flat(oracle.true_grad(xs)) - _flat(oracle.true_grad(ys))))
        den = float(np.linalg.norm(_flat(xs) - _flat(ys)))
        ratio = max(ratio, num / den)
    report.add(Check("smoothness", ratio <= L * (1 + 1e-9), ratio, L, "max ||dg||/||dx||"))

    if raise_on_failure and not report.passed:
        raise OracleContractViolation(report)
    return report
