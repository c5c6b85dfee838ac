"""Hyperparameter formulas from the convergence theorems, the memory/compute
cost model of the two implementations, and a randomized check of the
supporting projection lemmas."""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import HorizonTooShort, InvalidInput, LemmaViolation
from .linalg import RandomSource, frob_sq, gaussian_matrix
from .oracles import Check, RandomQuadratic, Report
from .projectors import (
    Side,
    fit_svd_projector,
    lift,
    project,
    sample_rand_mask,
    sample_uniform_stiefel,
    topk_mask,
)


def _ceil(x: float) -> int:
    # absorb rounding noise so that e.g. 101.00000000000001 maps to 101
    nearest = round(x)
    if abs(x - nearest) <= 1e-9 * max(1.0, abs(x)):
        return int(nearest)
    return math.ceil(x)


@dataclass(frozen=True)
class ProblemConstants:
    L: float
    Delta: float
    sigma: float
    delta_lower: float
    T: int
    delta_upper: Optional[float] = None

    def __post_init__(self):
        if self.L <= 0 or self.Delta <= 0 or self.sigma < 0 or self.T < 1:
            raise InvalidInput("need L > 0, Delta > 0, sigma >= 0, T >= 1")
        if not (0 < self.delta_lower <= 1):
            raise InvalidInput("delta_lower must lie in (0, 1]")
        if self.delta_upper is None:
            object.__setattr__(self, "delta_upper", self.delta_lower)
        elif not (self.delta_lower <= self.delta_upper <= 1):
            raise InvalidInput("delta_upper must lie in [delta_lower, 1]")

    @classmethod
    def from_layers(cls, specs, L, Delta, sigma, T, sparse=False):
        """Derive the rank ratios ``r / min(m, n)`` (or ``k / (m n)``) from layer specs."""
        ratios = []
        for s in specs:
            ratios.append(s.k / (s.m * s.n) if sparse else s.rank / min(s.m, s.n))
        return cls(L, Delta, sigma, min(ratios), T, max(ratios))


@dataclass(frozen=True)
class HparamBundle:
    theorem: str
    beta1: float
    tau: int
    eta: float
    B: Optional[int] = None

    def to_dict(self):
        return asdict(self)


def _eta(L, delta, beta1, tau, c3, c4):
    # c3, c4: coefficients of the tau^2 and tau terms, which differ between theorems
    return 1.0 / (4 * L
                  + math.sqrt(80 * L ** 2 / (3 * delta * beta1 ** 2))
                  + math.sqrt(c3 * tau ** 2 * L ** 2 / delta)
                  + math.sqrt(c4 * tau * L ** 2 / beta1))


def stochastic_horizon(c: ProblemConstants) -> float:
    d = c.delta_lower
    return 2 + 128 / (3 * d) + (128 * c.sigma) ** 2 / (9 * math.sqrt(d) * c.L * c.Delta)


def _stochastic_beta1(c: ProblemConstants) -> tuple[float, float]:
    """Returns (beta1, 1/beta1); the inverse is formed directly to keep ceilings exact."""
    s = math.sqrt(c.delta_lower ** 1.5 * c.sigma ** 2 * c.T / (c.L * c.Delta))
    return 1.0 / (1.0 + s), 1.0 + s


def hparams_deterministic(c: ProblemConstants) -> HparamBundle:
    """Deterministic GaLore with MSGD and momentum projection."""
    d = c.delta_lower
    if c.T < 64 / (3 * d):
        raise HorizonTooShort(f"T={c.T} < 64/(3 delta) = {64 / (3 * d):.4g}")
    beta1 = 1.0
    tau = _ceil(64 / (3 * d * beta1))
    eta = _eta(c.L, d, beta1, tau, 80 / 3, 16 / 3)
    return HparamBundle("deterministic", beta1, tau, eta)


def hparams_largebatch(c: ProblemConstants) -> HparamBundle:
    """Large-batch GaLore: batch ``B`` is used at refresh steps only."""
    d = c.delta_lower
    need = stochastic_horizon(c)
    if c.T < need:
        raise HorizonTooShort(f"T={c.T} < {need:.6g}")
    beta1, inv = _stochastic_beta1(c)
    tau = _ceil(64 * inv / (3 * d))
    B = _ceil(inv / d)
    eta = _eta(c.L, d, beta1, tau, 40.0, 32 / 3)
    return HparamBundle("large_batch", beta1, tau, eta, B)


def hparams_golore(c: ProblemConstants) -> HparamBundle:
    """GoLore with small-batch stochastic gradients."""
    d = c.delta_lower
    need = stochastic_horizon(c)
    if c.T < need:
        raise HorizonTooShort(f"T={c.T} < {need:.6g}")
    beta1, inv = _stochastic_beta1(c)
    tau = _ceil(64 * inv / (3 * d))
    eta = _eta(c.L, d, beta1, tau, 80 / 3, 16 / 3)
    return HparamBundle("golore", beta1, tau, eta)


HPARAMS = {
    "deterministic": hparams_deterministic,
    "large_batch": hparams_largebatch,
    "golore": hparams_golore,
}


def check_bundle(bundle: HparamBundle, c: ProblemConstants) -> list[str]:
    """Substitute a bundle back into its theorem's constraints; returns violations."""
    d, L = c.delta_lower, c.L
    problems = []
    if bundle.tau < 64 / (3 * bundle.beta1 * d) - 1e-9:
        problems.append("tau < 64/(3 beta1 delta)")
    c3, c4 = (40.0, 32 / 3) if bundle.theorem == "large_batch" else (80 / 3, 16 / 3)
    terms = [4 * L, math.sqrt(80 * L ** 2 / (3 * d * bundle.beta1 ** 2)),
             math.sqrt(c3 * bundle.tau ** 2 * L ** 2 / d), math.sqrt(c4 * bundle.tau * L ** 2 / bundle.beta1)]
    for i, term in enumerate(terms):
        if bundle.eta > 1 / term * (1 + 1e-12):
            problems.append(f"eta exceeds bound term {i}")
    if bundle.B is not None and bundle.B < 1 / (d * bundle.beta1) - 1e-9:
        problems.append("B < 1/(delta beta1)")
    if not (0 < bundle.beta1 <= 1):
        problems.append("beta1 outside (0, 1]")
    return problems


def cost_model(m: int, n: int, r: int, b: int, impl: str = "original") -> tuple[int, int]:
    """(memory, computation) of one MSGD step for an m x n weight, m <= n.

    ``impl`` is ``"original"`` (project the full gradient) or ``"relora"``
    (train a low-rank factor directly).
    """
    if m > n:
        raise InvalidInput("the cost model assumes m <= n")
    if min(m, n, b) < 1 or r < 0:
        raise InvalidInput("dimensions and batch must be positive, rank non-negative")
    if impl == "original":
        return (m * n + r * m + r * n + b * m,
                6 * b * m * n + 4 * r * m * n + 2 * m * n + 3 * r * n)
    if impl == "relora":
        return (m * n + r * m + 2 * r * n + b * m + b * r,
                4 * b * m * n + 4 * b * r * m + 6 * b * r * n + 5 * r * n)
    raise InvalidInput(f"unknown implementation {impl!r}")


# ---------------------------------------------------------------------------
# Lemma suite
# ---------------------------------------------------------------------------

_REL = 1e-12


def _shape(gen, lo=2, hi=12):
    return int(gen.integers(lo, hi + 1)), int(gen.integers(lo, hi + 1))


def _scaled_gaussian(gen, m, n):
    return gen.standard_normal((m, n)) * 10.0 ** gen.uniform(-3, 3)


def _bounded_projection_error(name, trials, rng, make, bound):
    """Deterministic inequality ``err <= bound`` over random instances."""
    worst, bad = -np.inf, None
    gen = rng.generator()
    for i in range(trials):
        G, p, ratio = make(gen, rng.split(i))
        err = frob_sq(lift(project(G, p), p) - G)
        rhs = (1 - ratio) * frob_sq(G)
        slack = err - rhs
        if slack / max(frob_sq(G), 1e-300) > worst:
            worst = slack / max(frob_sq(G), 1e-300)
        if slack > _REL * frob_sq(G) and bad is None:
            bad = {"G": G, "err": err, "bound": rhs, "ratio": ratio}
    return Check(name, bad is None, float(worst), _REL,
                 f"{trials} instances, max (err - bound)/||G||^2", counterexample=bad)


def _check_svd_error(rng, trials, svd_projector):
    def make(gen, _):
        m, n = _shape(gen)
        G = _scaled_gaussian(gen, m, n)
        side = Side.LEFT if gen.uniform() < 0.5 else Side.RIGHT
        dim = m if side is Side.LEFT else n
        r = int(gen.integers(1, min(m, n)))
        return G, svd_projector(G, r, side), r / dim
    return _bounded_projection_error("svd projection error bound", trials, rng, make, None)


def _check_topk_error(rng, trials):
    def make(gen, _):
        m, n = _shape(gen, 1, 10)
        if m * n < 2:
            n += 1
        G = _scaled_gaussian(gen, m, n)
        if gen.uniform() < 0.2:
            G = np.round(G)  # ties exercise the tie-breaking rule
        k = int(gen.integers(1, m * n))
        return G, topk_mask(G, k), k / (m * n)
    return _bounded_projection_error("top-k mask error bound", trials, rng, make, None)


def _check_orthogonality(rng, trials):
    gen = rng.generator()
    worst, bad = 0.0, None
    for i in range(trials):
        m, n = _shape(gen)
        r = int(gen.integers(1, m + 1))
        P = sample_uniform_stiefel(m, r, rng.split(i)).factor
        A, B = _scaled_gaussian(gen, m, n), _scaled_gaussian(gen, m, n)
        PA = P @ (P.T @ A)
        QB = B - P @ (P.T @ B)
        lhs = frob_sq(PA + QB)
        rhs = frob_sq(PA) + frob_sq(QB)
        rel = abs(lhs - rhs) / max(rhs, 1e-300)
        worst = max(worst, rel)
        if rel > 1e-9 and bad is None:
            bad = {"P": P, "A": A, "B": B, "lhs": lhs, "rhs": rhs}
    return Check("projection orthogonality", bad is None, worst, 1e-9,
                 f"{trials} instances, max relative gap", counterexample=bad)


def _check_gradient_connection(rng, instances=100):
    gen = rng.generator()
    worst, bad = -np.inf, None
    for i in range(instances):
        tau = int(gen.choice([2, 5, 10]))
        m, n = _shape(gen, 1, 6)
        g0 = _scaled_gaussian(gen, m, n)
        # mix drifting and unrelated sequences
        drift = 10.0 ** gen.uniform(-3, 1)
        seq = [g0]
        for _ in range(tau - 1):
            if gen.uniform() < 0.5:
                seq.append(seq[-1] + drift * gen.standard_normal((m, n)))
            else:
                seq.append(_scaled_gaussian(gen, m, n))
        lhs = frob_sq(seq[0])
        rhs = (2 / tau) * sum(frob_sq(g) for g in seq) + (tau - 1) * sum(
            frob_sq(seq[j + 1] - seq[j]) for j in range(tau - 1))
        slack = (lhs - rhs) / max(lhs, rhs, 1e-300)
        worst = max(worst, slack)
        if slack > _REL and bad is None:
            bad = {"sequence": np.stack(seq), "lhs": lhs, "rhs": rhs}
    return Check("gradient connection bound", bad is None, float(worst), _REL,
                 f"{instances} sequences, tau in {{2,5,10}}", counterexample=bad)


def _check_descent(rng, instances=100):
    oracle = RandomQuadratic(shapes=[(3, 4), (5, 2)], L=2.0, mu=0.05, sigma=0.0,
                             seed=int(rng.split(99).generator().integers(0, 2 ** 31)))
    L = oracle.smoothness
    gen = rng.generator()
    worst, bad = -np.inf, None
    for i in range(instances):
        xs = [gen.standard_normal(s) * 3 for s in oracle.shapes]
        ms = [gen.standard_normal(s) * 10.0 ** gen.uniform(-2, 1) for s in oracle.shapes]
        eta = gen.uniform(1e-3, 1.0) / L
        g = oracle.true_grad(xs)
        nxt = [x - eta * mt for x, mt in zip(xs, ms)]
        lhs = oracle.loss(nxt)
        step_sq = sum(frob_sq(a - b) for a, b in zip(nxt, xs))
        rhs = (oracle.loss(xs) - (1 / (2 * eta) - L / 2) * step_sq
               + eta / 2 * sum(frob_sq(mt - gt) for mt, gt in zip(ms, g))
               - eta / 2 * sum(frob_sq(gt) for gt in g))
        scale = max(abs(lhs), abs(rhs), 1.0)
        slack = (lhs - rhs) / scale
        worst = max(worst, slack)
        if slack > 1e-10 and bad is None:
            bad = {"x": np.concatenate([x.ravel() for x in xs]),
                   "m": np.concatenate([x.ravel() for x in ms]), "eta": eta, "lhs": lhs, "rhs": rhs}
    return Check("descent inequality", bad is None, float(worst), 1e-10,
                 f"{instances} (x, m, eta<=1/L) triples", counterexample=bad)


def _mean_check(name, samples, target):
    samples = np.asarray(samples)
    mean = float(samples.mean())
    se = float(samples.std(ddof=1)) / math.sqrt(len(samples))
    dev = abs(mean - target)
    return Check(name, dev <= 3 * se + 1e-12 * abs(target), dev / se if se else 0.0, 3.0,
                 f"mean={mean:.6g} target={target:.6g} ({len(samples)} draws), stat in SE units")


def _matrix_mean_check(name, samples, target):
    # Frobenius deviation of the sample mean against the norm of its standard error
    samples = np.asarray(samples)
    mean = samples.mean(axis=0)
    se = math.sqrt(float(samples.var(axis=0, ddof=1).sum()) / len(samples))
    dev = float(np.linalg.norm(mean - target))
    return Check(name, dev <= 3 * se, dev / se if se else 0.0, 3.0,
                 f"||mean - target||_F in SE units ({len(samples)} draws)")


def _check_stiefel_moments(rng, draws):
    checks = []
    gen = rng.generator()
    for label, (m, n), side in (("left", (6, 9), Side.LEFT), ("right", (9, 5), Side.RIGHT)):
        dim = m if side is Side.LEFT else n
        r = 2
        G = gen.standard_normal((m, n))
        errs = np.empty(draws)
        outer = np.empty((draws, dim, dim))
        for i in range(draws):
            p = sample_uniform_stiefel(dim, r, rng.split(5, i, dim), side)
            errs[i] = frob_sq(lift(project(G, p), p) - G)
            outer[i] = p.factor @ p.factor.T
        checks.append(_mean_check(f"stiefel projection error mean ({label})", errs,
                                  (1 - r / dim) * frob_sq(G)))
        checks.append(_matrix_mean_check(f"stiefel E[PP^T] = (r/dim) I ({label})", outer,
                                         (r / dim) * np.eye(dim)))
    return checks


def _check_randk_moments(rng, draws):
    gen = rng.generator()
    m, n, k = 4, 5, 7
    G = gen.standard_normal((m, n))
    errs = np.empty(draws)
    masks = np.empty((draws, m, n))
    for i in range(draws):
        S = sample_rand_mask(m, n, k, rng.split(6, i))
        masks[i] = S.mask
        errs[i] = frob_sq(S.mask * G - G)
    return [
        _mean_check("rand-k mask error mean", errs, (1 - k / (m * n)) * frob_sq(G)),
        _matrix_mean_check("rand-k E[S] = (k/mn) ones", masks, np.full((m, n), k / (m * n))),
    ]


def verify_lemma_suite(rng: RandomSource, trials: int = 1000, draws: int = 10_000,
                       instances: int = 100,
                       svd_projector: Callable = fit_svd_projector,
                       artifact_dir=None, raise_on_failure: bool = True) -> Report:
    """Randomized instantiation of the projection and descent lemmas.

    ``trials`` random instances for each deterministic inequality, ``draws``
    Monte Carlo samples for the expectation identities and ``instances`` cases
    for the gradient-connection and descent checks. ``svd_projector`` can be
    swapped for a fault-injection double. Counter-instances of failed checks
    are written to ``artifact_dir`` when given.
    """
    report = Report("lemmas")
    report.add(_check_svd_error(rng.split(1), trials, svd_projector))
    report.add(_check_gradient_connection(rng.split(2), instances))
    report.add(_check_orthogonality(rng.split(3), trials))
    report.add(_check_descent(rng.split(4), instances))
    for c in _check_stiefel_moments(rng.split(5), draws):
        report.add(c)
    report.add(_check_topk_error(rng.split(7), trials))
    for c in _check_randk_moments(rng.split(6), draws):
        report.add(c)
    failed = [c for c in report.checks if not c.passed]
    if artifact_dir is not None and failed:
        out = Path(artifact_dir)
        out.mkdir(parents=True, exist_ok=True)
        for c in failed:
            if c.counterexample:
                slug = re.sub(r"[^a-z0-9]+", "_", c.name.lower()).strip("_")
                arrays = {k: np.asarray(v) for k, v in c.counterexample.items()}
                np.savez(out / f"lemma_{slug}_counterexample.npz", **arrays)
        (out / "lemma_report.json").write_text(json.dumps(
            [{"name": c.name, "passed": c.passed, "statistic": c.statistic,
              "tolerance": c.tolerance, "detail": c.detail} for c in report.checks], indent=2))
    if raise_on_failure and failed:
        raise LemmaViolation(report)
    return report
