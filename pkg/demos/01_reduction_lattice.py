"""Pinning one learned scalar collapses a block family onto its simpler parent.

Run: python demos/01_reduction_lattice.py
"""
# %%
import numpy as np

from optformer.blocks import ModelConfig, init_params, layer_scalars, model_forward

LATTICE = [
    ("tmm", {"nu": 1.0}, "yurii"),
    ("yurii", {"mu": 0.0}, "hb"),
    ("adam", {"beta1": 0.0}, "rmsprop"),
    ("adamw", {"lambda": 0.0}, "adam"),
    ("muon", {"beta": 0.0}, "ortho"),
    ("soap", {"beta1": 0.0}, "shampoo"),
]

def toy(variant):
    return ModelConfig(layers=2, heads=2, d_model=16, context=8, vocab=16, variant=variant, seed=3)

ids = np.random.default_rng(0).integers(0, 16, (4, 8))

def trained_looking(cfg):
    # move the raw scalars off their init so the pins actually do something
    params = init_params(cfg)
    rng = np.random.default_rng(1)
    return {k: v + 0.5 * rng.standard_normal() if v.ndim == 0 else v for k, v in params.items()}

# %% the parent's parameters are a subset of the child's, so both read the same dict
for big, pins, small in LATTICE:
    params = trained_looking(toy(big))
    pinned = model_forward(toy(big), params, ids, overrides=pins).data
    free = model_forward(toy(big), params, ids).data
    parent = model_forward(toy(small), params, ids).data
    print(f"{big:>6} {pins} -> {small:<8} pinned diff {np.abs(pinned - parent).max():.1e}"
          f"   unpinned diff {np.abs(free - parent).max():.1e}")

# %% TMM starts close to the Yurii regime: nu = softplus(raw) is about 1 at init
cfg = toy("tmm")
init = layer_scalars(cfg, init_params(cfg), 0, "a")
print("tmm layer-0 scalars at init:", {k: round(float(v.data), 4) for k, v in init.items()})
