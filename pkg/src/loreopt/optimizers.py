"""Subspace optimizer engines.

Two engines produce the same iterates:

* :func:`train_step` keeps full weights ``X`` and optimizer state in subspace
  coordinates, projecting each gradient and lifting each update;
* :func:`relora_train_step` keeps ``X = W + B A`` with one factor frozen to the
  current projector, folding ``B A`` into ``W`` at every refresh.

Momentum follows the convention ``M <- (1 - beta1) M + beta1 R`` throughout,
so ``beta1 = 1`` means no momentum and the standard Adam ``(0.9, 0.999)``
pair corresponds to ``beta1 = 0.1, beta2 = 0.001`` here.
"""

from __future__ import annotations

import enum
import io
import json
import math
import time
import zipfile
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import InvalidInput, InvalidRank, NumericalDivergence, ShapeError
from .linalg import RandomSource, frob_sq, matrix_from_bytes, matrix_to_bytes
from .projectors import (
    LowRankProjector,
    Projector,
    ProjectorKind,
    Side,
    SparseMask,
    default_side,
    fit_svd_projector,
    lift,
    project,
    projector_from_bytes,
    projector_to_bytes,
    sample_gaussian_projector,
    sample_rand_mask,
    sample_uniform_stiefel,
    topk_mask,
    transport,
)

DIVERGENCE_LIMIT = 1e12

# stream keys for RandomSource.split
_GRAD_STREAM = 0
_PROJ_STREAM = 1


class Optimizer(str, enum.Enum):
    MSGD = "msgd"
    ADAMW = "adamw"


class Schedule(str, enum.Enum):
    GALORE = "galore"
    GOLORE = "golore"
    GAUSSIAN = "gaussian"
    GASARE = "gasare"
    GOSARE = "gosare"
    HYBRID = "hybrid"
    FULL = "full"

    @property
    def sparse(self) -> bool:
        return self in (Schedule.GASARE, Schedule.GOSARE)


class GradMode(str, enum.Enum):
    STOCHASTIC = "stochastic"
    DETERMINISTIC = "deterministic"
    LARGE_BATCH = "large_batch"


@dataclass(frozen=True)
class LayerSpec:
    m: int
    n: int
    rank: Optional[int] = None
    k: Optional[int] = None
    side: Optional[Side] = None

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise InvalidInput(f"layer dimensions must be positive, got ({self.m}, {self.n})")
        if self.rank is not None and not (1 <= self.rank <= min(self.m, self.n)):
            raise InvalidRank(f"rank {self.rank} outside [1, {min(self.m, self.n)}]")
        if self.k is not None and not (1 <= self.k < self.m * self.n):
            raise InvalidRank(f"k {self.k} outside [1, {self.m * self.n - 1}]")
        if self.side is not None:
            object.__setattr__(self, "side", Side(self.side))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.m, self.n)

    @property
    def resolved_side(self) -> Side:
        return self.side if self.side is not None else default_side(self.m, self.n)


@dataclass
class OptConfig:
    eta: float
    T: int
    tau: int = 1
    beta1: float = 1.0
    beta2: float = 0.001
    eps: float = 1e-8
    alpha: float = 1.0
    weight_decay: float = 0.0
    optimizer: Optimizer = Optimizer.MSGD
    schedule: Schedule = Schedule.GALORE
    hybrid_percent: float = 50.0
    grad_mode: GradMode = GradMode.STOCHASTIC
    batch_size: int = 1
    momentum_projection: bool = True

    def __post_init__(self):
        self.optimizer = Optimizer(self.optimizer)
        self.schedule = Schedule(self.schedule)
        self.grad_mode = GradMode(self.grad_mode)
        checks = [
            (self.eta > 0, "eta must be positive"),
            (self.T >= 0, "T must be non-negative"),
            (self.tau >= 1, "tau must be >= 1"),
            (0 < self.beta1 <= 1, "beta1 must lie in (0, 1]"),
            (0 < self.beta2 < 1, "beta2 must lie in (0, 1)"),
            (self.eps > 0, "eps must be positive"),
            (self.alpha > 0, "alpha must be positive"),
            (self.weight_decay >= 0, "weight_decay must be non-negative"),
            (0 <= self.hybrid_percent <= 100, "hybrid_percent must lie in [0, 100]"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InvalidInput(msg)

    @property
    def hybrid_switch(self) -> int:
        """First step index from which hybrid refreshes draw Stiefel projectors."""
        return math.ceil(round((100 - self.hybrid_percent) * self.T / 100, 9))

    def kind_at(self, t: int) -> Optional[ProjectorKind]:
        """Projector kind used by a refresh at step ``t`` (None for full training)."""
        s = self.schedule
        if s is Schedule.HYBRID:
            return ProjectorKind.SVD if t < self.hybrid_switch else ProjectorKind.STIEFEL
        return {
            Schedule.GALORE: ProjectorKind.SVD,
            Schedule.GOLORE: ProjectorKind.STIEFEL,
            Schedule.GAUSSIAN: ProjectorKind.GAUSSIAN,
            Schedule.GASARE: ProjectorKind.TOPK,
            Schedule.GOSARE: ProjectorKind.RANDK,
            Schedule.FULL: None,
        }[s]

    def to_dict(self) -> dict:
        out = {}
        for key, value in self.__dict__.items():
            out[key] = value.value if isinstance(value, enum.Enum) else value
        return out


@dataclass
class SubspaceState:
    projector: Optional[Projector]
    M: np.ndarray
    V: np.ndarray
    t: int = 0


@dataclass
class Layer:
    spec: LayerSpec
    weight: np.ndarray
    state: SubspaceState


def _empty_state(spec: LayerSpec) -> SubspaceState:
    # replaced at the first refresh; zeros with the full shape work for every kind at t=0
    return SubspaceState(None, np.zeros(spec.shape), np.zeros(spec.shape), 0)


@dataclass
class ModelState:
    layers: list[Layer]

    @classmethod
    def from_weights(cls, specs, weights) -> "ModelState":
        specs = list(specs)
        weights = [np.array(w, dtype=np.float64) for w in weights]
        if len(specs) != len(weights):
            raise ShapeError("one LayerSpec per weight matrix is required")
        for spec, w in zip(specs, weights):
            if w.shape != spec.shape:
                raise ShapeError(f"weight shape {w.shape} does not match spec {spec.shape}")
        return cls([Layer(s, w, _empty_state(s)) for s, w in zip(specs, weights)])

    @property
    def weights(self) -> list[np.ndarray]:
        return [layer.weight for layer in self.layers]

    def copy(self) -> "ModelState":
        return ModelState([
            Layer(l.spec, l.weight.copy(),
                  SubspaceState(l.state.projector, l.state.M.copy(), l.state.V.copy(), l.state.t))
            for l in self.layers])


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def refresh_subspace(G, spec: LayerSpec, cfg: OptConfig, t: int,
                     rng: RandomSource) -> Optional[Projector]:
    """Projector chosen at refresh step ``t`` for one layer."""
    if t % cfg.tau:
        raise InvalidInput(f"step {t} is not a refresh step for tau={cfg.tau}")
    kind = cfg.kind_at(t)
    if kind is None:
        return None
    side = spec.resolved_side
    if kind.sparse:
        if spec.k is None:
            raise InvalidRank("sparse schedules need LayerSpec.k")
        if kind is ProjectorKind.TOPK:
            return topk_mask(G, spec.k)
        return sample_rand_mask(spec.m, spec.n, spec.k, rng)
    if spec.rank is None:
        raise InvalidRank("low-rank schedules need LayerSpec.rank")
    if kind is ProjectorKind.SVD:
        return fit_svd_projector(G, spec.rank, side)
    dim = spec.m if side is Side.LEFT else spec.n
    if kind is ProjectorKind.STIEFEL:
        return sample_uniform_stiefel(dim, spec.rank, rng, side)
    return sample_gaussian_projector(dim, spec.rank, rng, side)


def momentum_update(state: SubspaceState, R, prev_projector: Optional[Projector],
                    cfg: OptConfig, refreshed: bool) -> np.ndarray:
    """New first moment; ``state.projector`` is the projector in force this step.

    With momentum projection at a refresh the old moment is transported into
    the new coordinates before the usual EMA; otherwise it is reused as is.
    """
    R = np.asarray(R, dtype=np.float64)
    M = state.M
    b1 = cfg.beta1
    if (refreshed and cfg.momentum_projection and prev_projector is not None
            and state.projector is not None):
        M = transport(M, state.projector, prev_projector)
    if M.shape != R.shape:
        raise ShapeError(f"momentum shape {M.shape} does not match subspace gradient {R.shape}")
    return (1 - b1) * M + b1 * R


def msgd_direction(M) -> np.ndarray:
    return M


def adamw_direction(state: SubspaceState, R, cfg: OptConfig):
    """Second-moment update and Adam direction.

    ``state.M`` must already hold this step's first moment. Returns
    ``(M, V_new, N)``; stored moments stay uncorrected, the bias correction
    ``1 - (1 - beta)^(t+1)`` is applied only to form ``N``.
    """
    R = np.asarray(R, dtype=np.float64)
    V = state.V
    if isinstance(state.projector, SparseMask):
        V = state.projector.mask * V
    if V.shape != R.shape:
        # low-rank V is never transported; a shape change can only come from a kind switch
        raise ShapeError(f"second moment shape {V.shape} does not match {R.shape}")
    V = (1 - cfg.beta2) * V + cfg.beta2 * R * R
    step = state.t + 1
    c1 = 1 - (1 - cfg.beta1) ** step
    c2 = 1 - (1 - cfg.beta2) ** step
    N = (state.M / c1) / (np.sqrt(V / c2) + cfg.eps)
    return state.M, V, N


def _grads(oracle, xs, cfg: OptConfig, t: int, refreshing: bool, rng: RandomSource):
    if cfg.grad_mode is GradMode.DETERMINISTIC:
        return oracle.true_grad(xs)
    batch = cfg.batch_size if (cfg.grad_mode is GradMode.LARGE_BATCH and refreshing) else 1
    return oracle.stoch_grad(xs, batch, rng.split(t, _GRAD_STREAM))


def _direction(state: SubspaceState, R, cfg: OptConfig):
    """Updates ``state`` moments in place, returns the subspace direction N."""
    if cfg.optimizer is Optimizer.MSGD:
        return msgd_direction(state.M)
    state.M, state.V, N = adamw_direction(state, R, cfg)
    return N


def _guard(arrays, t: int) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)) or np.max(np.abs(a)) > DIVERGENCE_LIMIT:
            raise NumericalDivergence(f"weights diverged at step {t}", step=t)


# ---------------------------------------------------------------------------
# Engine 1: projected updates on full weights
# ---------------------------------------------------------------------------

def train_step(model: ModelState, oracle, cfg: OptConfig, t: int,
               rng: RandomSource) -> ModelState:
    """One iteration of the subspace method on every layer (in place)."""
    if not (0 <= t < cfg.T):
        raise InvalidInput(f"step {t} outside [0, {cfg.T})")
    refreshing = t % cfg.tau == 0
    grads = _grads(oracle, model.weights, cfg, t, refreshing, rng)
    for idx, (layer, G) in enumerate(zip(model.layers, grads)):
        state = layer.state
        prev = state.projector
        if refreshing:
            state.projector = refresh_subspace(G, layer.spec, cfg, t, rng.split(t, _PROJ_STREAM, idx))
            if state.projector is not None and (prev is None or isinstance(prev, SparseMask)
                                                != isinstance(state.projector, SparseMask)):
                shape = state.projector.subspace_shape(*layer.spec.shape)
                if state.M.shape != shape:
                    state.M, state.V = np.zeros(shape), np.zeros(shape)
        p = state.projector
        R = G if p is None else project(G, p)
        state.M = momentum_update(state, R, prev, cfg, refreshing)
        N = _direction(state, R, cfg)
        update = N if p is None else lift(N, p)
        X = layer.weight
        new = X - cfg.eta * cfg.alpha * update
        if cfg.optimizer is Optimizer.ADAMW and cfg.weight_decay:
            new -= cfg.eta * cfg.weight_decay * X
        layer.weight = new
        state.t += 1
    _guard(model.weights, t)
    return model


# ---------------------------------------------------------------------------
# Engine 2: ReLoRA-like factorized updates
# ---------------------------------------------------------------------------

@dataclass
class FactorLayer:
    spec: LayerSpec
    W: np.ndarray
    A: np.ndarray
    B: np.ndarray
    state: SubspaceState

    @property
    def side(self) -> Side:
        return self.spec.resolved_side

    @property
    def weight(self) -> np.ndarray:
        return self.W + self.B @ self.A


@dataclass
class ReLoRAModel:
    """Weights held as ``X = W + B A``; for the LEFT side ``B`` is the frozen
    projector and ``A`` trains, for the RIGHT side ``A = Q^T`` is frozen and
    ``B`` trains."""

    layers: list[FactorLayer]

    @classmethod
    def from_weights(cls, specs, weights) -> "ReLoRAModel":
        layers = []
        for spec, w in zip(specs, weights):
            w = np.array(w, dtype=np.float64)
            if w.shape != spec.shape:
                raise ShapeError(f"weight shape {w.shape} does not match spec {spec.shape}")
            if spec.rank is None:
                raise InvalidRank("the factorized engine needs LayerSpec.rank")
            r = spec.rank
            A = np.zeros((r, spec.n))
            B = np.zeros((spec.m, r))
            layers.append(FactorLayer(spec, w, A, B, _empty_state(spec)))
        return cls(layers)

    @property
    def weights(self) -> list[np.ndarray]:
        return [layer.weight for layer in self.layers]


def relora_train_step(model: ReLoRAModel, oracle, cfg: OptConfig, t: int,
                      rng: RandomSource) -> ReLoRAModel:
    """One iteration of the factorized engine (in place).

    Between refreshes the subspace gradient is the gradient of the trainable
    factor, ``B^T dX`` or ``dX A^T``; at a refresh ``B A`` is folded into ``W``
    and the frozen factor is re-seated to the new projector.
    """
    if cfg.schedule.sparse or cfg.schedule is Schedule.FULL:
        raise InvalidInput("the factorized engine supports low-rank schedules only")
    if not (0 <= t < cfg.T):
        raise InvalidInput(f"step {t} outside [0, {cfg.T})")
    refreshing = t % cfg.tau == 0
    xs = model.weights
    grads = _grads(oracle, xs, cfg, t, refreshing, rng)
    step = cfg.eta * cfg.alpha
    keep = 1.0
    if cfg.optimizer is Optimizer.ADAMW and cfg.weight_decay:
        keep = 1.0 - cfg.eta * cfg.weight_decay
    for idx, (layer, G) in enumerate(zip(model.layers, grads)):
        state = layer.state
        left = layer.side is Side.LEFT
        if refreshing:
            p = refresh_subspace(G, layer.spec, cfg, t, rng.split(t, _PROJ_STREAM, idx))
            R = project(G, p)
            if state.t == 0:
                state.M = np.zeros_like(R)
                state.V = np.zeros_like(R)
            # the frozen factor still holds the previous projector
            if cfg.momentum_projection:
                carried = p.factor.T @ layer.B @ state.M if left else state.M @ layer.A @ p.factor
            else:
                carried = state.M
            state.M = (1 - cfg.beta1) * carried + cfg.beta1 * R
            state.projector = p
        else:
            R = layer.B.T @ G if left else G @ layer.A.T
            state.M = (1 - cfg.beta1) * state.M + cfg.beta1 * R
        N = _direction(state, R, cfg)
        if refreshing:
            layer.W = keep * (layer.W + layer.B @ layer.A)
            if left:
                layer.A, layer.B = -step * N, state.projector.factor.copy()
            else:
                layer.A, layer.B = state.projector.factor.T.copy(), -step * N
        else:
            layer.W = keep * layer.W
            if left:
                layer.A = keep * layer.A - step * N
            else:
                layer.B = keep * layer.B - step * N
        state.t += 1
    _guard(model.weights, t)
    return model


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

CSV_HEADER = "t,loss,grad_norm_sq,refreshed,projector_kind"


@dataclass
class StepRecord:
    t: int
    loss: float
    grad_norm_sq: float
    refreshed: bool
    projector_kind: str
    wall_time: float


@dataclass
class Trajectory:
    records: list[StepRecord] = field(default_factory=list)
    diverged: bool = False
    divergence_step: Optional[int] = None
    final_loss: Optional[float] = None
    final_grad_norm_sq: Optional[float] = None

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for r in self.records:
            lines.append(f"{r.t},{r.loss!r},{r.grad_norm_sq!r},{int(r.refreshed)},{r.projector_kind}")
        return "\n".join(lines) + "\n"


def _kind_label(proj) -> str:
    return "full" if proj is None else proj.kind.value


def run(model, oracle, cfg: OptConfig, rng: RandomSource, metric_every: int = 1,
        engine: str = "subspace", progress=None) -> Trajectory:
    """Execute ``cfg.T`` steps, recording true loss and gradient norm.

    Metrics at step ``t`` are measured at ``x_t`` before the update, using
    the exact objective and gradient regardless of the gradient mode. The
    values at ``x_T`` are kept in ``final_loss``/``final_grad_norm_sq``.
    """
    if metric_every < 1:
        raise InvalidInput("metric_every must be >= 1")
    step_fn = {"subspace": train_step, "relora": relora_train_step}[engine]
    traj = Trajectory()
    start = time.perf_counter()
    for t in range(cfg.T):
        record = t % metric_every == 0
        if record:
            xs = model.weights
            loss = oracle.loss(xs)
            gsq = sum(frob_sq(g) for g in oracle.true_grad(xs))
        try:
            step_fn(model, oracle, cfg, t, rng)
        except NumericalDivergence as exc:
            traj.diverged = True
            traj.divergence_step = exc.step
            break
        if record:
            kind = _kind_label(model.layers[0].state.projector) if model.layers else "full"
            traj.records.append(StepRecord(t, loss, gsq, t % cfg.tau == 0, kind,
                                           time.perf_counter() - start))
        if progress is not None:
            progress(t)
    if not traj.diverged:
        xs = model.weights
        traj.final_loss = oracle.loss(xs)
        traj.final_grad_norm_sq = sum(frob_sq(g) for g in oracle.true_grad(xs))
    return traj


def make_model(oracle, rank=None, k=None, side=None, weights=None) -> ModelState:
    """ModelState over every layer of ``oracle`` with a common rank/sparsity."""
    specs = []
    for m, n in oracle.shapes:
        r = None if rank is None else min(rank, min(m, n))
        specs.append(LayerSpec(m, n, rank=r, k=k, side=side))
    return ModelState.from_weights(specs, weights if weights is not None else oracle.initial_point())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: ModelState, t: int, cfg: Optional[OptConfig] = None) -> None:
    """Zip bundle: ``manifest.json`` plus matrix/projector blobs per layer."""
    manifest = {"format": 1, "t": t, "config": cfg.to_dict() if cfg else None, "layers": []}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for i, layer in enumerate(model.layers):
            spec = layer.spec
            manifest["layers"].append({
                "m": spec.m, "n": spec.n, "rank": spec.rank, "k": spec.k,
                "side": spec.side.value if spec.side else None,
                "state_t": layer.state.t, "has_projector": layer.state.projector is not None,
            })
            zf.writestr(f"layer{i}/weight.bin", matrix_to_bytes(layer.weight))
            zf.writestr(f"layer{i}/M.bin", matrix_to_bytes(layer.state.M))
            zf.writestr(f"layer{i}/V.bin", matrix_to_bytes(layer.state.V))
            if layer.state.projector is not None:
                zf.writestr(f"layer{i}/projector.bin", projector_to_bytes(layer.state.projector))
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[ModelState, int, Optional[dict]]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        layers = []
        for i, entry in enumerate(manifest["layers"]):
            spec = LayerSpec(entry["m"], entry["n"], rank=entry["rank"], k=entry["k"],
                             side=entry["side"])
            weight, _ = matrix_from_bytes(zf.read(f"layer{i}/weight.bin"))
            M, _ = matrix_from_bytes(zf.read(f"layer{i}/M.bin"))
            V, _ = matrix_from_bytes(zf.read(f"layer{i}/V.bin"))
            proj = None
            if entry["has_projector"]:
                proj = projector_from_bytes(zf.read(f"layer{i}/projector.bin"))
            layers.append(Layer(spec, weight, SubspaceState(proj, M, V, entry["state_t"])))
    return ModelState(layers), manifest["t"], manifest["config"]
