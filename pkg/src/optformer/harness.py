"""Synthetic corpora, training loop, checkpoints and the forgetting protocol.

Two built-in corpora stand in for real text:

``markov``
    A seeded order-2 Markov chain. Each previous token ``b`` has
    ``branching`` successors; their weights depend on ``b`` and on the parity
    of the token before it, mixed with ``smoothing`` uniform mass so the
    chain is ergodic. Next-token entropy is below ``log(branching)`` plus the
    smoothing term, so a model that learns the chain sits well under
    ``log(vocab)``. The unigram marginal is the stationary distribution from
    :func:`markov_stationary`.

``brackets``
    A seeded mix of nested-bracket words (depth at most 4, ``n_pairs``
    bracket types) and copy segments ``x1..xn SEP x1..xn SEP`` over filler
    tokens. Token 0 is ``SEP``.

Each corpus is one stream split into a train prefix and a validation
suffix, so no window crosses the split.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import ModelConfig, init_params, loss_and_grads, model_forward
from .core import autograd as tt
from .errors import ConfigError, DivergenceError, ValidationError
from .paramopt import OptimConfig, Optimizer, Schedule, sam_active, sam_wrap, schedule_value

log = logging.getLogger(__name__)

CORPORA = ("markov", "brackets")


@dataclass(frozen=True)
class CorpusSpec:
    name: str = "markov"
    vocab: int = 64
    seed: int = 0
    train_tokens: int = 200_000
    val_tokens: int = 20_000

    def __post_init__(self):
        if self.name not in CORPORA:
            raise ConfigError(f"unknown corpus {self.name!r}; choose from {CORPORA}")
        if self.vocab < 8:
            raise ConfigError("corpus vocab must be >= 8")
        if self.train_tokens < 2 or self.val_tokens < 2:
            raise ConfigError("split sizes must be >= 2 tokens")

    def key(self):
        return f"{self.name}-v{self.vocab}-s{self.seed}-{self.train_tokens}-{self.val_tokens}"


@dataclass
class Corpus:
    spec: CorpusSpec
    train: np.ndarray
    val: np.ndarray


# ---------------------------------------------------------------------------
# generators


def markov_table(vocab, seed, branching=4, smoothing=0.02):
    """Transition tensor ``P[a, b, c] = p(next=c | prev2=a, prev=b)``."""
    rng = np.random.default_rng([seed, 7])
    succ = np.stack([rng.choice(vocab, size=branching, replace=False) for _ in range(vocab)])
    weights = rng.dirichlet(np.ones(branching), size=(2, vocab))
    P = np.full((vocab, vocab, vocab), smoothing / vocab)
    for parity in (0, 1):
        rows = np.zeros((vocab, vocab))
        np.put_along_axis(rows, succ, weights[parity], axis=1)
        P[parity::2] += (1.0 - smoothing) * rows[None, :, :]
    return P


def markov_stationary(P, tol=1e-14, max_iter=100_000):
    """Stationary distribution over pairs ``(a, b)`` and its unigram marginal."""
    V = P.shape[0]
    pi = np.full((V, V), 1.0 / V ** 2)
    for _ in range(max_iter):
        nxt = np.einsum("ab,abc->bc", pi, P)
        if np.abs(nxt - pi).sum() < tol:
            pi = nxt
            break
        pi = nxt
    return pi, pi.sum(axis=0)


def _markov_stream(vocab, seed, n):
    P = markov_table(vocab, seed)
    cdf = np.cumsum(P, axis=2)
    cdf[..., -1] = 1.0
    rng = np.random.default_rng([seed, 11])
    u = rng.random(n)
    out = np.empty(n, dtype=np.int64)
    a, b = rng.integers(vocab, size=2)
    for i in range(n):
        c = int(np.searchsorted(cdf[a, b], u[i], side="right"))
        out[i] = c
        a, b = b, c
    return out


def _brackets_stream(vocab, seed, n, n_pairs=4, max_depth=4):
    rng = np.random.default_rng([seed, 13])
    sep = 0
    opens = list(range(1, 1 + n_pairs))
    closes = list(range(1 + n_pairs, 1 + 2 * n_pairs))
    fillers = np.arange(1 + 2 * n_pairs, vocab)
    if len(fillers) < 2:
        raise ConfigError("brackets corpus needs vocab >= 2*n_pairs + 3")
    out = []
    while len(out) < n:
        if rng.random() < 0.5:
            stack = []
            length = int(rng.integers(4, 17))
            for _ in range(length):
                if stack and (len(stack) >= max_depth or rng.random() < 0.45):
                    out.append(closes[stack.pop()])
                else:
                    k = int(rng.integers(n_pairs))
                    stack.append(k)
                    out.append(opens[k])
            while stack:
                out.append(closes[stack.pop()])
        else:
            seg = rng.choice(fillers, size=int(rng.integers(3, 9))).tolist()
            out.extend(seg + [sep] + seg + [sep])
    return np.asarray(out[:n], dtype=np.int64)


def gen_corpus(spec, cache_dir=None):
    """Deterministic token streams for ``spec`` (optionally cached as .npy)."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"{spec.key()}.npy"
        if path.exists():
            stream = np.load(path)
            return Corpus(spec, stream[: spec.train_tokens], stream[spec.train_tokens:])
    n = spec.train_tokens + spec.val_tokens
    if spec.name == "markov":
        stream = _markov_stream(spec.vocab, spec.seed, n)
    else:
        stream = _brackets_stream(spec.vocab, spec.seed, n)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, stream)
    return Corpus(spec, stream[: spec.train_tokens], stream[spec.train_tokens:])


# ---------------------------------------------------------------------------
# batches and loss


def sample_batch(tokens, batch, T, rng):
    if len(tokens) < T + 1:
        raise ConfigError(f"split of {len(tokens)} tokens too short for context {T}")
    starts = rng.integers(0, len(tokens) - T, size=batch)
    idx = starts[:, None] + np.arange(T + 1)[None, :]
    w = tokens[idx]
    return w[:, :-1], w[:, 1:]


def make_eval_batches(tokens, n_batches, batch, T, seed):
    rng = np.random.default_rng([seed, 101])
    return [sample_batch(tokens, batch, T, rng) for _ in range(n_batches)]


def batch_hash(batches):
    h = hashlib.sha256()
    for x, y in batches:
        h.update(np.ascontiguousarray(x, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(y, dtype="<i8").tobytes())
    return h.hexdigest()[:16]


def cross_entropy(logits, targets):
    """Mean token-level cross-entropy in nats."""
    z = logits.data if isinstance(logits, tt.Tensor) else np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets)
    if t.shape != z.shape[:-1]:
        raise ValidationError(f"targets shape {t.shape} does not match logits {z.shape}")
    if t.size and (t.min() < 0 or t.max() >= z.shape[-1]):
        raise ValidationError("target id out of range")
    return float(tt.cross_entropy(z, t).data)


def evaluate(cfg, params, batches):
    losses = [cross_entropy(model_forward(cfg, params, x), y) for x, y in batches]
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# checkpoints


CKPT_FORMAT = "optformer-ckpt-1"


@dataclass
class Checkpoint:
    config: dict
    params: dict
    opt_state: dict = field(default_factory=dict)
    step: int = 0
    best_val_loss: float = float("inf")

    def model_config(self):
        return ModelConfig(**self.config["model"])

    def _tensors(self):
        items = [(f"param/{k}", v) for k, v in sorted(self.params.items())]
        items += [(f"opt/{k}", v) for k, v in sorted(self.opt_state.items())]
        return items

    def to_bytes(self):
        """``(manifest_json_bytes, payload_bytes)``; little-endian float64 payload."""
        entries, chunks, offset = [], [], 0
        for name, arr in self._tensors():
            a = np.asarray(arr, dtype="<f8")
            raw = a.tobytes()
            entries.append({"name": name, "shape": list(a.shape), "dtype": "<f8",
                            "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        best = self.best_val_loss
        manifest = {
            "format": CKPT_FORMAT,
            "config": self.config,
            "step": int(self.step),
            "best_val_loss": best if math.isfinite(best) else None,
            "tensors": entries,
        }
        text = json.dumps(manifest, sort_keys=True, indent=1) + "\n"
        return text.encode(), b"".join(chunks)

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        manifest, payload = self.to_bytes()
        (d / "checkpoint.json").write_bytes(manifest)
        (d / "checkpoint.bin").write_bytes(payload)
        return d

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        manifest = json.loads((d / "checkpoint.json").read_text())
        if manifest.get("format") != CKPT_FORMAT:
            raise ValidationError(f"{d} is not an {CKPT_FORMAT} checkpoint")
        payload = (d / "checkpoint.bin").read_bytes()
        params, opt = {}, {}
        for e in manifest["tensors"]:
            raw = payload[e["offset"]: e["offset"] + e["nbytes"]]
            arr = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
            kind, name = e["name"].split("/", 1)
            (params if kind == "param" else opt)[name] = arr
        best = manifest["best_val_loss"]
        return cls(manifest["config"], params, opt, manifest["step"],
                   float("inf") if best is None else best)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 16
    eval_every: int = 25
    eval_batches: int = 8
    data_seed: int = 0
    sam_mode: str = "off"
    sam_rho: float = 0.05

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1 or self.eval_batches < 1:
            raise ConfigError("invalid training budget")


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    COLUMNS = ("step", "train_loss", "val_loss", "lr_mult")

    def add(self, step, train_loss, val_loss, lr_mult):
        if self.rows and step <= self.rows[-1][0]:
            raise ValidationError("RunRecord steps must increase")
        self.rows.append((int(step), float(train_loss), float(val_loss), float(lr_mult)))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for step, tr, va, lr in self.rows:
            w.writerow([step, repr(tr), repr(va), repr(lr)])
        return buf.getvalue()

    def write_csv(self, path):
        Path(path).write_text(self.to_csv())

    @property
    def val_losses(self):
        return [r[2] for r in self.rows]


def _finite(x):
    return x is not None and math.isfinite(x)


def train(cfg, corpus, optim_cfg=None, schedule=None, train_cfg=None, config_extra=None):
    """Train from initialization; returns the best-validation checkpoint and the record.

    Eval batches come from ``train_cfg.data_seed`` only, so runs sharing a
    data seed score every variant on identical inputs.
    """
    optim_cfg = optim_cfg or OptimConfig()
    train_cfg = train_cfg or TrainConfig()
    schedule = schedule or Schedule(total=max(train_cfg.steps, 1), warmup=0)
    if train_cfg.steps > schedule.total:
        raise ConfigError(f"schedule covers {schedule.total} steps, training asks for {train_cfg.steps}")
    if corpus.spec.vocab != cfg.vocab:
        raise ConfigError(f"corpus vocab {corpus.spec.vocab} != model vocab {cfg.vocab}")

    params = init_params(cfg)
    opt = Optimizer.create(params, optim_cfg)
    T, B = cfg.context, train_cfg.batch_size
    eval_set = make_eval_batches(corpus.val, train_cfg.eval_batches, B, T, train_cfg.data_seed)
    probe = make_eval_batches(corpus.train, 1, B, T, train_cfg.data_seed)[0]
    data_rng = np.random.default_rng([train_cfg.data_seed, 202])
    config = {
        "model": cfg.to_dict(),
        "corpus": dataclasses.asdict(corpus.spec),
        "optim": optim_cfg.to_dict(),
        "schedule": dataclasses.asdict(schedule),
        "train": dataclasses.asdict(train_cfg),
    }
    if config_extra:
        config.update(config_extra)

    def snapshot(step, best):
        return Checkpoint(config, {k: v.copy() for k, v in params.items()},
                          opt.state_arrays(), step, best)

    record = RunRecord()
    val0 = evaluate(cfg, params, eval_set)
    train0 = cross_entropy(model_forward(cfg, params, probe[0]), probe[1])
    record.add(0, train0, val0, schedule_value(schedule, 0))
    best = snapshot(0, val0)
    window = []

    def lg(p, x, y):
        return loss_and_grads(cfg, p, x, y)

    for t in range(train_cfg.steps):
        mult = schedule_value(schedule, t)
        x, y = sample_batch(corpus.train, B, T, data_rng)
        if sam_active(train_cfg.sam_mode, schedule, t):
            res = sam_wrap(lambda p: lg(p, x, y), params, train_cfg.sam_rho)
            loss, grads = res.loss, res.grads
        else:
            loss, grads = lg(params, x, y)
        if not _finite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            record.summary = _summary(record, best, eval_set, failed_at=t)
            raise DivergenceError(f"non-finite loss/gradient at step {t}", best, record)
        params, _ = opt.step(params, grads, mult)
        window.append(loss)
        done = t + 1
        if done % train_cfg.eval_every == 0 or done == train_cfg.steps:
            val = evaluate(cfg, params, eval_set)
            if not _finite(val):
                record.summary = _summary(record, best, eval_set, failed_at=done)
                raise DivergenceError(f"non-finite validation loss at step {done}", best, record)
            record.add(done, float(np.mean(window)), val, schedule_value(schedule, done))
            window = []
            if val < best.best_val_loss:
                best = snapshot(done, val)
    record.summary = _summary(record, best, eval_set)
    return best, record


def _summary(record, best, eval_set, failed_at=None):
    out = {
        "best_val_loss": best.best_val_loss,
        "best_step": best.step,
        "initial_val_loss": record.rows[0][2],
        "final_val_loss": record.rows[-1][2],
        "steps": record.rows[-1][0],
        "eval_batch_hash": batch_hash(eval_set),
    }
    if failed_at is not None:
        out["failed_at"] = failed_at
    return out


# ---------------------------------------------------------------------------
# forgetting


def forgetting(source_before, source_after):
    """Rise in source-corpus loss caused by fine-tuning."""
    return source_after - source_before


@dataclass
class FinetuneConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.95)
    warmup_frac: float = 0.1
    clip: float = 1.0
    batch_size: int = 16
    eval_every: int = 25
    eval_batches: int = 8
    data_seed: int = 0


@dataclass
class ForgettingResult:
    forgetting: float
    source_before: float
    source_after: float
    curves: list
    source_hash: str
    target_hash: str


def finetune_forgetting(ckpt, source, target, ft_steps, ft_cfg=None):
    """Fine-tune ``ckpt`` on ``target`` and report the source-loss rise.

    Every variant uses the same fixed AdamW recipe; the learning rate warms
    up over ``warmup_frac * ft_steps`` then cosine-decays to 0.1 of peak.
    ``curves`` rows are ``(step, source_loss, target_loss)``.
    """
    ft_cfg = ft_cfg or FinetuneConfig()
    if source.spec == target.spec:
        raise ValidationError("target corpus must differ from the source corpus")
    cfg = ckpt.model_config()
    if target.spec.vocab != cfg.vocab or source.spec.vocab != cfg.vocab:
        raise ConfigError("corpus vocab does not match the checkpoint model")
    params = {k: v.copy() for k, v in ckpt.params.items()}
    T, B = cfg.context, ft_cfg.batch_size
    src_eval = make_eval_batches(source.val, ft_cfg.eval_batches, B, T, ft_cfg.data_seed)
    tgt_eval = make_eval_batches(target.val, ft_cfg.eval_batches, B, T, ft_cfg.data_seed)
    warm = int(math.ceil(ft_cfg.warmup_frac * ft_steps))
    sched = Schedule("warmup-cosine", total=max(ft_steps, 1), warmup=min(warm, max(ft_steps, 1)),
                     min_lr=0.1)
    ocfg = OptimConfig(kind="adamw", adamw_lr=ft_cfg.lr, adamw_wd=ft_cfg.weight_decay,
                       betas=ft_cfg.betas, clip=ft_cfg.clip)
    opt = Optimizer.create(params, ocfg)
    for g in opt.groups:
        g.weight_decay = ft_cfg.weight_decay
    rng = np.random.default_rng([ft_cfg.data_seed, 303])

    before = evaluate(cfg, params, src_eval)
    curves = [(0, before, evaluate(cfg, params, tgt_eval))]
    after = before
    for t in range(ft_steps):
        x, y = sample_batch(target.train, B, T, rng)
        loss, grads = loss_and_grads(cfg, params, x, y)
        if not _finite(loss):
            raise DivergenceError(f"non-finite fine-tuning loss at step {t}")
        params, _ = opt.step(params, grads, schedule_value(sched, t))
        done = t + 1
        if done % ft_cfg.eval_every == 0 or done == ft_steps:
            after = evaluate(cfg, params, src_eval)
            curves.append((done, after, evaluate(cfg, params, tgt_eval)))
    return ForgettingResult(forgetting(before, after), before, after, curves,
                            batch_hash(src_eval), batch_hash(tgt_eval))
