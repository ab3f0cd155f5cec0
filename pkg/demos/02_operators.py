"""The two matrix operators behind the Muon/Ortho and Shampoo/SOAP blocks.

Run: python demos/02_operators.py
"""
# %%
import numpy as np

from optformer.core.ops import inv_sqrt_newton, newton_schulz_polar

rng = np.random.default_rng(0)
m = rng.standard_normal((4, 8))

# %% quintic Newton-Schulz pushes every singular value up towards 1
print("K  singular values")
print(0, np.round(np.linalg.svd(m / np.linalg.norm(m), compute_uv=False), 4))
for k in range(1, 7):
    print(k, np.round(np.linalg.svd(newton_schulz_polar(m, k).data, compute_uv=False), 4))

# %% coupled Newton inverse square root: residual ||Z A Z - I|| by condition number
print("\ncond   D=4       D=8       D=16")
for cond in (1, 10, 100, 1000):
    row = []
    for D in (4, 8, 16):
        q, _ = np.linalg.qr(rng.standard_normal((D, D)))
        a = (q * np.geomspace(1, cond, D)) @ q.T
        a = 0.5 * (a + a.T)
        z = inv_sqrt_newton(a, 10).data
        row.append(np.abs(z @ a @ z - np.eye(D)).max())
    print(f"{cond:<6} " + "  ".join(f"{r:.1e}" for r in row))
