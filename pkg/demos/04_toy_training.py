"""Train two variants on the synthetic Markov corpus with shared data.

Run: python demos/04_toy_training.py   (about a minute)
"""
# %%
from optformer.blocks import ModelConfig
from optformer.harness import CorpusSpec, TrainConfig, gen_corpus, train
from optformer.paramopt import Schedule

corpus = gen_corpus(CorpusSpec(name="markov"))
steps = 150
records = {}
for variant in ("vanilla", "tmm"):
    _, rec = train(ModelConfig(variant=variant), corpus,
                   schedule=Schedule(total=steps, warmup=8),
                   train_cfg=TrainConfig(steps=steps, eval_every=25))
    records[variant] = rec
    print(variant, "eval batch hash", rec.summary["eval_batch_hash"])

# %% both read the same eval batches, so the columns are directly comparable
print("step  " + "  ".join(f"{v:>8}" for v in records))
for i, row in enumerate(records["vanilla"].rows):
    print(f"{row[0]:>4}  " + "  ".join(f"{records[v].rows[i][2]:8.4f}" for v in records))
