"""Heavy-ball vs tuned gradient descent on a quadratic, mode by mode.

Run: python demos/03_filter_lab.py
"""
# %%
import numpy as np

from optformer import filterlab as fl

# %% predicted and fitted contraction rates
print(fl.sweep_csv(fl.sweep(depth=200)))

# %% momentum loses early and wins late; the crossover sits inside the analytic bound
c = fl.compare_filters(1.0, 9.0, depth=50)
for n in (1, 2, 5, 10, 20, 50):
    print(f"N={n:>2}  vanilla {c.worst_vanilla[n]:.2e}  heavy ball {c.worst_mom[n]:.2e}")
print("crossover", c.crossover_N, "analytic N0", c.analytic_N0, "C_mom", round(c.c_mom, 2))

# %% at the band edges the characteristic roots coincide, so C_mom grows with depth
for depth in (50, 100, 200):
    print(depth, round(fl.compare_filters(1.0, 9.0, depth=depth).c_mom, 1))

# %% diagonal redundancy: a balanced gain vector adds little beyond a scalar
rng = np.random.default_rng(0)
for eps in (0.01, 0.1, 0.5, 1.0):
    r = fl.diagonal_redundancy_check(fl.random_balanced_vector(rng, 32, eps), 0.05, eps)
    print(f"eps={eps:<5} deviation {r.deviation:.3e}  bound {r.bound:.3e}  holds {r.holds}")
