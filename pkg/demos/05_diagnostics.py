"""Jacobian spectra, sharpness, a loss slice and forgetting on a small trained model.

Run: python demos/05_diagnostics.py   (about a minute)
"""
# %%
import numpy as np

from optformer import diagnostics as dg
from optformer.blocks import ModelConfig
from optformer.harness import (CorpusSpec, FinetuneConfig, TrainConfig, finetune_forgetting,
                               gen_corpus, make_eval_batches, train)
from optformer.paramopt import Schedule

cfg = ModelConfig(variant="tmm", layers=2, heads=2, d_model=16, context=16, vocab=32)
source = gen_corpus(CorpusSpec(name="markov", vocab=32, train_tokens=40_000, val_tokens=5_000))
target = gen_corpus(CorpusSpec(name="brackets", vocab=32, train_tokens=40_000, val_tokens=5_000))
ckpt, rec = train(cfg, source, schedule=Schedule(total=120, warmup=6),
                  train_cfg=TrainConfig(steps=120, batch_size=8, eval_every=40))
print("val loss", [round(r[2], 3) for r in rec.rows])

# %% full-block Jacobians along one sequence; P sums log sigma_min over layers
probe = make_eval_batches(source.val, 1, 1, cfg.context, 0)[0][0][0]
report = dg.spectrum_metrics(dg.layer_jacobians(cfg, ckpt.params, probe))
print(report.to_csv(), "P =", round(report.persistence, 3))

# %% curvature: top Hessian eigenvalue, Hutchinson trace, filter-normalized slice
batches = make_eval_batches(source.val, 2, 8, cfg.context, 0)
s = dg.sharpness(cfg, ckpt.params, batches, power_iters=30, probes=6, curve_grid=11)
print(f"lambda_max {s.lambda_max:.3f}  tr(H)/N {s.trace_per_param:.2e}  slice range {s.curve_range:.3f}")
print("slice", np.round(s.curve_losses, 3))

# %% forgetting: source loss before and after fine-tuning on brackets
ft = finetune_forgetting(ckpt, source, target, 60, FinetuneConfig(lr=1e-3, batch_size=8, eval_every=20))
print(f"source {ft.source_before:.3f} -> {ft.source_after:.3f}, forgetting {ft.forgetting:+.3f}")
print("perplexity on source", round(dg.perplexity_eval(cfg, ckpt.params, batches), 2))
