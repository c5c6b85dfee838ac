"""From problem constants to step size, momentum and refresh period.

The convergence results fix eta, beta1 and tau as functions of the smoothness
L, the initial gap Delta, the noise level sigma, the smallest rank ratio delta
and the horizon T. This walks through the three recipes, shows how the horizon
requirement bites, and prints the per-step cost of the two implementations.

Run:  python3 demos/theory_walkthrough.py
"""

# %%
from loreopt.errors import HorizonTooShort
from loreopt.oracles import RandomQuadratic
from loreopt.theory import HPARAMS, ProblemConstants, check_bundle, cost_model

o = RandomQuadratic(seed=0)
delta = min(2 / min(m, n) for m, n in o.shapes)  # rank 2 on every layer
Delta = o.loss(o.initial_point()) - o.optimum_value

for T in (50, 1_000, 100_000, 10_000_000):
    c = ProblemConstants(L=o.smoothness, Delta=Delta, sigma=o.sigma, delta_lower=delta, T=T)
    print(f"\nT = {T}")
    for name, recipe in sorted(HPARAMS.items()):
        try:
            hp = recipe(c)
        except HorizonTooShort as exc:
            print(f"  {name:<14} horizon too short: {exc}")
            continue
        extra = f" B={hp.B}" if hp.B is not None else ""
        ok = "ok" if not check_bundle(hp, c) else "violates bounds"
        print(f"  {name:<14} beta1={hp.beta1:.4g} tau={hp.tau} eta={hp.eta:.3e}{extra} ({ok})")

# %%
# Momentum gets smaller and the refresh period longer as T grows; the step
# size is capped by the refresh period, so long horizons mean small steps.

# %%
print(f"\n{'m':>5} {'n':>5} {'r':>4} {'b':>4} {'memory orig/relora':>22} {'compute orig/relora':>26}")
for m, n, r, b in ((512, 512, 16, 1), (512, 2048, 64, 8), (4096, 4096, 128, 32)):
    mo, co = cost_model(m, n, r, b, "original")
    mr, cr = cost_model(m, n, r, b, "relora")
    print(f"{m:>5} {n:>5} {r:>4} {b:>4} {mo:>10}/{mr:<11} {co:>12}/{cr:<13}")
