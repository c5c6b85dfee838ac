"""Where SVD projection stalls and a random projection does not.

The SVD trap: the true gradient lives in one corner of an n x n matrix, while
the sampled gradient carries a noise component that is larger than the true
gradient in spectral norm. Every rank-r SVD subspace then sits in the noise
block, the projected true gradient is exactly zero, and the iterate never moves.
A uniformly random subspace catches the true gradient a fraction r/n of the
time, which is enough to make progress.

Run:  python3 demos/trap_stall.py
"""

# %%
import numpy as np

from loreopt import OptConfig, RandomSource, make_model, run
from loreopt.oracles import SvdTrap

trap = SvdTrap(n=8, L=1.0, lam=0.1, sigma=1.0)
print(f"||grad f||^2 at every point of the plateau: {trap.eps0:.4f}")
print(f"noise spectral scale {trap.sigma_tilde:.3f} > L*lam = {trap.L * trap.lam:.3f}")

# %%
# Same step size, momentum and refresh period; only the projector differs.
results = {}
for schedule in ("galore", "golore", "full"):
    cfg = OptConfig(eta=0.05, T=3000, tau=10, beta1=0.1, schedule=schedule)
    traj = run(make_model(trap, rank=2), trap, cfg, RandomSource(0), metric_every=100)
    results[schedule] = traj.column("grad_norm_sq")

print(f"\n{'t':>6} " + " ".join(f"{s:>12}" for s in results))
steps = np.arange(0, 3000, 100)
for i in range(0, len(steps), 5):
    print(f"{steps[i]:>6} " + " ".join(f"{results[s][i]:12.3e}" for s in results))

# %%
# GaLore reports the same gradient norm at every step, to the last bit.
g = results["galore"]
print(f"\ngalore: max |g/eps0 - 1| = {np.max(np.abs(g / trap.eps0 - 1)):.1e}")
print(f"golore: final/initial = {results['golore'][-1] / results['golore'][0]:.2e}")
