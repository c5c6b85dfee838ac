"""Experiment runner: YAML configs, per-seed runs, run records and plot tables.

A config file looks like::

    oracle: {kind: quadratic_ce, n: 16, r: 4, sigma: 1.0, seed: 0}
    model: {rank: 4}              # or {k: ...} for sparse schedules
    optimizer: {eta: 0.01, T: 1000, tau: 200, schedule: galore}
    variants:                     # optional; each overrides optimizer/model keys
      galore: {}
      golore50: {schedule: hybrid, hybrid_percent: 50}
    seeds: [0, 1, 2]
    output_dir: runs/example
    metric_every: 1
    engine: subspace              # or relora

Each (variant, seed) pair writes ``<output_dir>/<variant>/seed_<s>.csv`` and
a matching ``seed_<s>.json`` run record. Oracle data needed to rebuild the
problem (the random matrix of ``quadratic_ce``) is saved in ``output_dir``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .errors import ConfigError, InvalidInput, InvalidMetric, LoreOptError
from .linalg import RandomSource
from .oracles import ORACLES, build_oracle
from .optimizers import OptConfig, Schedule, make_model, run

SEED_ENV = "LOREOPT_SEED"
_OPT_KEYS = {f.name for f in dataclasses.fields(OptConfig)}
_MODEL_KEYS = {"rank", "k", "side"}
_TOP_KEYS = {"oracle", "model", "optimizer", "variants", "seeds", "output_dir", "metric_every", "engine"}
_ENGINES = ("subspace", "relora")
_MAX_SEED = 2 ** 64 - 1
_NUMERIC = {"eta": float, "T": int, "tau": int, "beta1": float, "beta2": float, "eps": float,
            "alpha": float, "weight_decay": float, "hybrid_percent": float, "batch_size": int,
            "rank": int, "k": int}


# ---------------------------------------------------------------------------
# Parsing with line numbers
# ---------------------------------------------------------------------------

class _LineDict(dict):
    """dict that remembers the 1-based source line of each key and of itself."""
    line: Optional[int] = None
    key_lines: dict


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    out = _LineDict()
    out.line = node.start_mark.line + 1
    out.key_lines = {}
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", key_node.start_mark.line + 1)
        out[key] = loader.construct_object(value_node, deep=True)
        out.key_lines[key] = key_node.start_mark.line + 1
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _line(d, key=None):
    if isinstance(d, _LineDict):
        return d.key_lines.get(key, d.line) if key is not None else d.line
    return None


@dataclass
class Variant:
    name: str
    opt: OptConfig
    rank: Optional[int]
    k: Optional[int]
    side: Optional[str]
    engine: str


@dataclass
class ExperimentConfig:
    oracle: dict
    variants: list[Variant]
    seeds: list[int]
    output_dir: Path
    metric_every: int = 1
    source: Optional[str] = None

    @property
    def opt(self) -> OptConfig:
        return self.variants[0].opt


def _fail(msg, d=None, key=None, path=None):
    raise ConfigError(msg, _line(d, key), path)


def _int_list(value, d, key, path):
    if isinstance(value, int) and not isinstance(value, bool):
        value = [value]
    if not isinstance(value, list) or not value:
        _fail("seeds must be a non-empty list of integers", d, key, path)
    for s in value:
        if isinstance(s, bool) or not isinstance(s, int) or not (0 <= s <= _MAX_SEED):
            _fail(f"seed {s!r} is not a 64-bit unsigned integer", d, key, path)
    return list(value)


def _seeds_from_env(path):
    raw = os.environ.get(SEED_ENV)
    if raw is None or not raw.strip():
        return None
    try:
        seeds = [int(tok) for tok in raw.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not a list of integers", None, path) from None
    if not all(0 <= s <= _MAX_SEED for s in seeds):
        raise ConfigError(f"{SEED_ENV} seeds must be 64-bit unsigned integers", None, path)
    return seeds


def _build_variant(name, opt_raw, model_raw, engine, where, path):
    opt_kwargs = {}
    model = {"rank": None, "k": None, "side": None}
    model.update({k: model_raw[k] for k in model_raw})
    for key, value in opt_raw.items():
        want = _NUMERIC.get(key)
        if want is not None and value is not None:
            ok = not isinstance(value, bool) and (isinstance(value, int) if want is int
                                                  else isinstance(value, (int, float)))
            if not ok:
                _fail(f"{key} must be {'an integer' if want is int else 'a number'}, got {value!r}",
                      *where.get(key, (None, None)), path)
        if key == "momentum_projection" and not isinstance(value, bool):
            _fail("momentum_projection must be true or false", *where.get(key, (None, None)), path)
        if key in _MODEL_KEYS:
            model[key] = value
        elif key == "engine":
            engine = value
        elif key in _OPT_KEYS:
            opt_kwargs[key] = value
        else:
            _fail(f"unknown optimizer key {key!r}", *where.get(key, (None, None)), path)
    if "eta" not in opt_kwargs or "T" not in opt_kwargs:
        _fail(f"variant {name!r}: optimizer needs both 'eta' and 'T'", None, None, path)
    try:
        opt = OptConfig(**opt_kwargs)
    except (InvalidInput, ValueError, TypeError) as exc:
        d, key = _blame(where, str(exc))
        _fail(f"variant {name!r}: {exc}", d, key, path)
    if engine not in _ENGINES:
        _fail(f"engine must be one of {_ENGINES}, got {engine!r}", *where.get("engine", (None, None)), path)
    if opt.schedule.sparse and model["k"] is None:
        _fail(f"variant {name!r}: sparse schedule needs model.k", *where.get("schedule", (None, None)), path)
    if not opt.schedule.sparse and opt.schedule is not Schedule.FULL and model["rank"] is None:
        _fail(f"variant {name!r}: low-rank schedule needs model.rank", *where.get("schedule", (None, None)), path)
    return Variant(name, opt, model["rank"], model["k"], model["side"], engine)


def _blame(where, message):
    # point at the key the validation message mentions, else at the block
    for key, loc in where.items():
        if message.startswith(key + " ") or f" {key} " in f" {message} ":
            return loc
    loc = where.get("__block__")
    return loc if loc else (None, None)


def parse_config(text: str, path=None, env_seeds: bool = True) -> ExperimentConfig:
    """Parse and validate a config document; errors carry the offending line."""
    try:
        doc = yaml.load(text, Loader=_Loader)
    except ConfigError as exc:
        raise ConfigError(exc.message, exc.line, path) from None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"YAML syntax error: {problem}", mark.line + 1 if mark else None, path) from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping at top level", 1, path)
    for key in doc:
        if key not in _TOP_KEYS:
            _fail(f"unknown top-level key {key!r}", doc, key, path)

    oracle = doc.get("oracle")
    if not isinstance(oracle, dict):
        _fail("'oracle' must be a mapping with a 'kind'", doc, "oracle", path)
    if oracle.get("kind") not in ORACLES:
        _fail(f"unknown oracle kind {oracle.get('kind')!r}; expected one of {sorted(ORACLES)}",
              oracle, "kind", path)
    try:
        build_oracle(dict(oracle))
    except (LoreOptError, TypeError) as exc:
        _fail(f"invalid oracle: {exc}", oracle, None, path)

    model = doc.get("model", {}) or {}
    if not isinstance(model, dict):
        _fail("'model' must be a mapping", doc, "model", path)
    for key in model:
        if key not in _MODEL_KEYS:
            _fail(f"unknown model key {key!r}", model, key, path)
    base = doc.get("optimizer")
    if not isinstance(base, dict):
        _fail("'optimizer' must be a mapping", doc, "optimizer", path)
    engine = doc.get("engine", "subspace")

    raw_variants = doc.get("variants")
    if raw_variants is None:
        raw_variants = {"default": {}}
    if not isinstance(raw_variants, dict) or not raw_variants:
        _fail("'variants' must be a non-empty mapping of name -> overrides", doc, "variants", path)
    variants = []
    for name, over in raw_variants.items():
        over = over or {}
        if not isinstance(over, dict):
            _fail(f"variant {name!r} must be a mapping", raw_variants, name, path)
        merged = dict(base)
        merged.update(over)
        where = {k: (base, k) for k in base}
        where.update({k: (over, k) for k in over})
        where["__block__"] = (over, None) if over else (base, None)
        if "engine" in doc:
            where.setdefault("engine", (doc, "engine"))
        variants.append(_build_variant(str(name), merged, model, engine, where, path))

    seeds = _int_list(doc.get("seeds", [0]), doc, "seeds", path)
    if env_seeds:
        seeds = _seeds_from_env(path) or seeds
    metric_every = doc.get("metric_every", 1)
    if isinstance(metric_every, bool) or not isinstance(metric_every, int) or metric_every < 1:
        _fail("metric_every must be an integer >= 1", doc, "metric_every", path)
    out = doc.get("output_dir", "runs")
    if not isinstance(out, str) or not out:
        _fail("output_dir must be a path string", doc, "output_dir", path)
    return ExperimentConfig(dict(oracle), variants, seeds, Path(out), metric_every,
                            str(path) if path else None)


def packaged_config(name: str) -> Path:
    """Path of a config shipped with the package (``minimal``, ``noisy_quadratic``)."""
    return Path(__file__).parent / "configs" / f"{name}.yaml"


def load_config(path, env_seeds: bool = True) -> ExperimentConfig:
    """Read a config file; a bare name such as ``noisy_quadratic`` selects a shipped config."""
    path = Path(path)
    if not path.exists() and packaged_config(str(path)).exists():
        path = packaged_config(str(path))
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, path) from None
    return parse_config(text, path, env_seeds)


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode("utf-8")


def git_blob_sha1(data: bytes) -> str:
    """SHA-1 of ``data`` framed as a git blob object."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def summarize(losses, grad_norms) -> dict:
    """Run summary from the recorded columns (exactly reproducible from the CSV)."""
    losses = [float(v) for v in losses]
    grads = [float(v) for v in grad_norms]
    if not grads:
        return {"final_loss": None, "min_grad_norm_sq": None, "mean_grad_norm_sq_last10": None}
    tail = grads[len(grads) - max(1, math.ceil(len(grads) / 10)):]
    return {
        "final_loss": losses[-1],
        "min_grad_norm_sq": min(grads),
        "mean_grad_norm_sq_last10": math.fsum(tail) / len(tail),
    }


@dataclass
class RunRecord:
    variant: str
    seed: int
    config_hash: str
    content_hash: str
    csv_path: str
    summary: dict
    diverged: bool = False
    divergence_step: Optional[int] = None
    wall_time: float = 0.0
    final_state: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))


def _variant_inputs(cfg: ExperimentConfig, v: Variant) -> dict:
    return {"oracle": cfg.oracle, "optimizer": v.opt.to_dict(), "engine": v.engine,
            "model": {"rank": v.rank, "k": v.k, "side": v.side}, "metric_every": cfg.metric_every}


def run_variant(cfg: ExperimentConfig, v: Variant, seed: int, oracle=None):
    """One deterministic run; returns the trajectory (no files written)."""
    oracle = oracle or build_oracle(dict(cfg.oracle))
    model = make_model(oracle, rank=v.rank, k=v.k, side=v.side)
    if v.engine == "relora":
        from .optimizers import ReLoRAModel
        model = ReLoRAModel.from_weights([layer.spec for layer in model.layers], model.weights)
    return run(model, oracle, v.opt, RandomSource(seed), metric_every=cfg.metric_every, engine=v.engine)


def cli_run(cfg: ExperimentConfig, output_dir=None, log=None) -> list[RunRecord]:
    """Execute every (variant, seed) pair and persist trajectories and records."""
    out = Path(output_dir) if output_dir is not None else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    oracle = build_oracle(dict(cfg.oracle))
    persisted = b"".join(p.read_bytes() for p in sorted(oracle.persist(out)))
    records = []
    for v in cfg.variants:
        vdir = out / v.name
        vdir.mkdir(parents=True, exist_ok=True)
        inputs = _variant_inputs(cfg, v)
        config_hash = hashlib.sha256(_canonical(inputs)).hexdigest()
        for seed in cfg.seeds:
            start = time.perf_counter()
            traj = run_variant(cfg, v, seed, oracle)
            wall = time.perf_counter() - start
            csv_path = vdir / f"seed_{seed}.csv"
            with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(traj.to_csv())
            content = git_blob_sha1(_canonical({**inputs, "seed": seed}) + persisted)
            rec = RunRecord(
                variant=v.name, seed=seed, config_hash=config_hash, content_hash=content,
                csv_path=str(csv_path.relative_to(out)),
                summary=summarize(traj.column("loss"), traj.column("grad_norm_sq")),
                diverged=traj.diverged, divergence_step=traj.divergence_step, wall_time=wall,
                final_state={"loss": traj.final_loss, "grad_norm_sq": traj.final_grad_norm_sq},
            )
            (vdir / f"seed_{seed}.json").write_text(rec.to_json(), encoding="utf-8")
            records.append(rec)
            if log is not None:
                status = f"diverged at step {traj.divergence_step}" if traj.diverged else \
                    f"final loss {rec.summary['final_loss']:.6g}"
                log(f"{v.name} seed {seed}: {status} ({wall:.2f}s)")
    return records


# ---------------------------------------------------------------------------
# Reading results back
# ---------------------------------------------------------------------------

def read_csv_columns(path) -> dict[str, list[str]]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise InvalidInput(f"{path}: empty CSV")
    header = lines[0].split(",")
    cols = {h: [] for h in header}
    for line in lines[1:]:
        for h, v in zip(header, line.split(",")):
            cols[h].append(v)
    return cols


def load_records(directory) -> list[tuple[Path, RunRecord]]:
    """All run records below ``directory``, sorted by (variant, seed)."""
    found = []
    for path in Path(directory).rglob("seed_*.json"):
        rec = RunRecord.from_json(path.read_text(encoding="utf-8"))
        found.append((path, rec))
    found.sort(key=lambda pr: (pr[1].variant, pr[1].seed))
    return found


def _csv_of(record_path: Path, rec: RunRecord) -> Path:
    # the record lives in <out>/<variant>/ and stores the CSV relative to <out>
    return record_path.parent.parent / rec.csv_path


def recompute_summary(record_path) -> dict:
    record_path = Path(record_path)
    rec = RunRecord.from_json(record_path.read_text(encoding="utf-8"))
    cols = read_csv_columns(_csv_of(record_path, rec))
    return summarize(cols["loss"], cols["grad_norm_sq"])


def log_grid_indices(length: int, size) -> np.ndarray:
    """``ceil(size)`` strictly increasing row indices, log-spaced over ``range(length)``."""
    count = min(int(math.ceil(size)), length)
    if count < 1:
        raise InvalidInput("log-grid size must be positive")
    raw = np.rint(np.geomspace(1, length, count)).astype(int) - 1
    idx = np.empty(count, dtype=int)
    prev = -1
    for i, v in enumerate(raw):
        prev = max(int(v), prev + 1)
        idx[i] = prev
    # push back from the end so the last index stays inside the table
    for i in range(count - 1, -1, -1):
        limit = length - count + i
        if idx[i] > limit:
            idx[i] = limit
    return idx


def plotdata(directory, metric: str, median: bool = False, log_grid=None, sep: str = ",") -> str:
    """Long-format table ``algorithm,seed,t,value`` of one metric across runs.

    With ``median`` each algorithm collapses to one row per ``t`` (seed column
    ``median``). ``log_grid`` keeps a log-spaced subset of the rows.
    """
    records = load_records(directory)
    if not records:
        raise InvalidInput(f"no run records found under {directory}")
    series: dict[str, list[tuple[int, list[int], list[str]]]] = {}
    for path, rec in records:
        cols = read_csv_columns(_csv_of(path, rec))
        if metric not in cols or metric == "t":
            raise InvalidMetric(f"metric {metric!r} not in {path.name}; available: "
                                f"{[c for c in cols if c != 't']}")
        series.setdefault(rec.variant, []).append((rec.seed, [int(t) for t in cols["t"]], cols[metric]))

    rows = [sep.join(("algorithm", "seed", "t", "value"))]
    for algo, runs in series.items():
        if median:
            ts = runs[0][1]
            if any(r[1] != ts for r in runs):
                raise InvalidInput(f"{algo}: runs record different steps; cannot take a median")
            values = np.median(np.array([[float(v) for v in r[2]] for r in runs]), axis=0)
            table = [("median", ts, [repr(float(v)) for v in values])]
        else:
            table = runs
        for seed, ts, values in table:
            idx = range(len(ts)) if log_grid is None else log_grid_indices(len(ts), log_grid)
            for i in idx:
                rows.append(sep.join((algo, str(seed), str(ts[i]), values[i])))
    return "\n".join(rows) + "\n"
