"""Command-line entry point: ``loreopt {run,verify,hparams,cost,plotdata}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import LoreOptError
from .linalg import RandomSource
from .oracles import ORACLES, verify_oracle
from .projectors import fit_svd_projector
from .theory import HPARAMS, ProblemConstants, cost_model, verify_lemma_suite


def _aligned(pairs) -> str:
    width = max(len(k) for k, _ in pairs)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in pairs)


def cmd_run(args) -> int:
    from .harness import cli_run, load_config

    cfg = load_config(args.config)
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    records = cli_run(cfg, output_dir=args.output_dir, log=log)
    out = Path(args.output_dir) if args.output_dir else cfg.output_dir
    for rec in records:
        s = rec.summary
        print(f"{rec.variant}\tseed={rec.seed}\tfinal_loss={s['final_loss']!r}\t"
              f"mean_grad_norm_sq_last10={s['mean_grad_norm_sq_last10']!r}\t{out / rec.csv_path}")
    diverged = [r for r in records if r.diverged]
    for rec in diverged:
        print(f"error: {rec.variant} seed {rec.seed} diverged at step {rec.divergence_step}",
              file=sys.stderr)
    return 1 if diverged else 0


def cli_verify(trials: int = 10_000, seed: int = 0, svd_projector=fit_svd_projector,
               artifact_dir=None, out=None, err=None) -> int:
    """Oracle contracts for every built-in oracle plus the lemma suite."""
    out = out or sys.stdout
    err = err or sys.stderr
    failures = []
    root = RandomSource(seed)
    for i, (name, cls) in enumerate(sorted(ORACLES.items())):
        report = verify_oracle(cls(), trials=trials, rng=root.split(100, i), raise_on_failure=False)
        for line in report.lines():
            print(f"[{name}] {line}", file=out)
        failures += [f"{name}: {c.name}: {c.detail}" for c in report.checks if not c.passed]
    report = verify_lemma_suite(root.split(200), trials=min(trials, 1000), draws=trials,
                                instances=min(trials, 100), svd_projector=svd_projector,
                                artifact_dir=artifact_dir, raise_on_failure=False)
    for line in report.lines():
        print(f"[lemmas] {line}", file=out)
    failures += [f"lemma {c.name}: {c.detail}" for c in report.checks if not c.passed]
    for f in failures:
        print(f"violation: {f}", file=err)
    return 1 if failures else 0


def cmd_verify(args) -> int:
    return cli_verify(args.trials, args.seed, artifact_dir=args.artifact_dir)


def cmd_hparams(args) -> int:
    c = ProblemConstants(L=args.L, Delta=args.Delta, sigma=args.sigma,
                         delta_lower=args.delta, T=args.T)
    bundle = HPARAMS[args.theorem](c)
    if args.json:
        print(json.dumps(bundle.to_dict(), sort_keys=True))
    else:
        pairs = [(k, v) for k, v in bundle.to_dict().items() if v is not None]
        print(_aligned([(k, repr(v) if isinstance(v, float) else str(v)) for k, v in pairs]))
    return 0


def cmd_cost(args) -> int:
    memory, compute = cost_model(args.m, args.n, args.r, args.b, args.impl)
    if args.json:
        print(json.dumps({"impl": args.impl, "memory": memory, "computation": compute}, sort_keys=True))
    else:
        print(_aligned([("impl", args.impl), ("memory", str(memory)), ("computation", str(compute))]))
    return 0


def cmd_plotdata(args) -> int:
    from .harness import plotdata

    table = plotdata(args.directory, args.metric, median=args.median, log_grid=args.log_grid,
                     sep="\t" if args.tsv else ",")
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(table)
    else:
        sys.stdout.write(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loreopt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every variant and seed of an experiment config")
    p.add_argument("config")
    p.add_argument("--output-dir", default=None, help="override the config's output_dir")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="check oracle contracts and projection lemmas")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--artifact-dir", default=None, help="where counter-instances are written")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("hparams", help="step size, momentum and refresh period from the theory")
    p.add_argument("theorem", choices=sorted(HPARAMS))
    p.add_argument("--L", type=float, required=True)
    p.add_argument("--Delta", type=float, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--delta", type=float, required=True, help="smallest rank ratio over layers")
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_hparams)

    p = sub.add_parser("cost", help="memory and computation of one step")
    for name in ("m", "n", "r", "b"):
        p.add_argument(f"--{name}", type=int, required=True)
    p.add_argument("--impl", choices=("original", "relora"), default="original")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("plotdata", help="long-format table of a metric across runs")
    p.add_argument("directory")
    p.add_argument("--metric", required=True)
    p.add_argument("--median", action="store_true", help="median across seeds per step")
    p.add_argument("--log-grid", type=float, default=None, help="keep this many log-spaced steps")
    p.add_argument("--tsv", action="store_true")
    p.add_argument("--output", "-o", default=None)
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LoreOptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
