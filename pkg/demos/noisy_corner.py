"""A quadratic whose gradient noise dwarfs the signal near the optimum.

Condensed version of the packaged ``noisy_quadratic`` experiment: one seed,
a quarter of the horizon. GaLore locks onto noise directions and plateaus;
switching to random projections for the second half (GoLore@50%), averaging a large batch
for the subspace fit, or full-rank training all keep descending.

Run:  python3 demos/noisy_corner.py      (about 20 seconds)
The full experiment is ``loreopt run noisy_quadratic``.
"""

# %%
import tempfile

from loreopt.harness import cli_run, parse_config
from loreopt.oracles import QuadraticCE

CONFIG = """
oracle: {kind: quadratic_ce, n: 16, r: 4, sigma: 1.0, seed: 0}
model: {rank: 4}
optimizer: {optimizer: msgd, eta: 0.02, T: 5000, tau: 100, beta1: 0.05, schedule: galore}
variants:
  galore: {}
  golore50: {schedule: hybrid, hybrid_percent: 50}
  largebatch: {grad_mode: large_batch, batch_size: 256}
  full: {schedule: full}
seeds: [0]
metric_every: 50
"""

cfg = parse_config(CONFIG, env_seeds=False)
f_star = QuadraticCE(n=16, r=4, sigma=1.0, seed=0).optimum_value

# %%
with tempfile.TemporaryDirectory() as out:
    records = cli_run(cfg, out)

print(f"{'variant':<12} {'f(x_T) - f*':>12} {'tail ||grad||^2':>16}")
for rec in records:
    gap = rec.final_state["loss"] - f_star
    print(f"{rec.variant:<12} {gap:12.3e} {rec.summary['mean_grad_norm_sq_last10']:16.3e}")
