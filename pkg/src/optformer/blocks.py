"""Optimizer-inspired residual blocks and the full language-model forward.

Every variant is one branch of :func:`apply_substep`. A layer is the
attention substep followed by the MLP substep (:func:`block_forward`), each
with its own copy of the learned scalars.

Parameters live in a flat ``dict[str, np.ndarray]``. Names are shared across
variants (``h0.a.beta`` means the same thing for HB, Yurii and TMM), and
each tensor is drawn from an RNG keyed by ``(seed, name)``, so two variants
built with the same seed agree on every parameter they have in common.
"""

from __future__ import annotations

import dataclasses
import enum
import math
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import autograd as tt
from .core.ops import (
    ADAM_EPS,
    LN_EPS,
    attention_oracle,
    ema,
    inv_sqrt_newton,
    layernorm,
    materialize_tensor,
    mlp_oracle,
    newton_schulz_polar,
    raw_for,
)
from .core.autograd import Tensor, tensor
from .errors import ConfigError, ContractError, DimensionError, NumericError


class BlockVariant(str, enum.Enum):
    VANILLA = "vanilla"
    HB = "hb"
    YURII = "yurii"
    TMM = "tmm"
    ADAM = "adam"
    ADAMW = "adamw"
    RMSPROP = "rmsprop"
    MUON = "muon"
    ORTHO = "ortho"
    SHAMPOO = "shampoo"
    SOAP = "soap"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower()
        for v in cls:
            if v.value == key or v.name.lower() == key:
                return v
        valid = ", ".join(v.value for v in cls)
        raise ConfigError(f"unknown variant {name!r}; valid names: {valid}")


V = BlockVariant

STREAMS = {
    V.VANILLA: (),
    V.HB: ("v",),
    V.YURII: ("v",),
    V.TMM: ("v",),
    V.ADAM: ("m", "s"),
    V.ADAMW: ("m", "s"),
    V.RMSPROP: ("s",),
    V.MUON: ("m",),
    V.ORTHO: (),
    V.SHAMPOO: ("r",),
    V.SOAP: ("m", "r"),
}

SCALARS = {
    V.VANILLA: (),
    V.HB: ("beta", "gamma"),
    V.YURII: ("mu", "beta", "gamma"),
    V.TMM: ("mu", "beta", "gamma", "nu"),
    V.ADAM: ("beta1", "beta2", "gamma"),
    V.ADAMW: ("beta1", "beta2", "gamma", "lambda"),
    V.RMSPROP: ("beta2", "gamma"),
    V.MUON: ("beta", "gamma"),
    V.ORTHO: ("gamma",),
    V.SHAMPOO: ("betaR", "gamma"),
    V.SOAP: ("beta1", "betaR", "gamma"),
}

SCALAR_KIND = {
    "mu": "unit", "beta": "unit", "beta1": "unit", "beta2": "unit",
    "betaR": "unit", "lambda": "unit", "gamma": "positive", "nu": "positive",
}

# materialized starting values; lambda is set by its raw value instead
SCALAR_INIT = {
    "mu": 0.5, "beta": 0.9, "beta1": 0.9, "beta2": 0.9, "betaR": 0.9,
    "gamma": 1.0, "nu": 1.0,
}
LAMBDA_RAW_INIT = -5.0

VELOCITY_FAMILY = (V.HB, V.YURII, V.TMM)

SUBSTEPS = ("a", "m")


@dataclass
class ModelConfig:
    layers: int = 2
    heads: int = 4
    d_model: int = 32
    context: int = 64
    vocab: int = 64
    variant: BlockVariant = V.VANILLA
    seed: int = 0
    mlp_ratio: int = 4
    ns_steps: int = 5
    inv_sqrt_steps: int = 10
    ridge: float = 1e-6
    ln_eps: float = LN_EPS
    adam_eps: float = ADAM_EPS

    def __post_init__(self):
        self.variant = BlockVariant.parse(self.variant)
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        for name in ("layers", "heads", "d_model", "context", "vocab", "mlp_ratio",
                     "ns_steps", "inv_sqrt_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def head_dim(self):
        return self.d_model // self.heads

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        return d


@dataclass
class AuxStreams:
    v: Optional[Tensor] = None
    m: Optional[Tensor] = None
    s: Optional[Tensor] = None
    r: Optional[Tensor] = None

    def present(self):
        return tuple(k for k in ("v", "m", "s", "r") if getattr(self, k) is not None)

    def detached(self):
        return AuxStreams(**{k: None if t is None else Tensor(t.data)
                             for k, t in dataclasses.asdict(self).items()})


# ---------------------------------------------------------------------------
# parameters


def _rng(seed, name):
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def param_names(cfg):
    """Parameter names (and shapes) the configured variant uses, in fixed order."""
    d, T, Vc = cfg.d_model, cfg.context, cfg.vocab
    hidden = cfg.mlp_ratio * d
    variant = cfg.variant
    shapes = {"wte": (Vc, d), "wpe": (T, d)}
    for stream in STREAMS[variant]:
        if stream in ("v", "m"):
            shapes[f"aux.{stream}.wte"] = (Vc, d)
            shapes[f"aux.{stream}.wpe"] = (T, d)
    for layer in range(cfg.layers):
        p = f"h{layer}"
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{w}"] = (d, d)
        shapes[f"{p}.mlp.w1"] = (d, hidden)
        shapes[f"{p}.mlp.w2"] = (hidden, d)
        for sub in SUBSTEPS:
            shapes[f"{p}.ln_{sub}.gain"] = (d,)
            if variant in VELOCITY_FAMILY:
                shapes[f"{p}.ln_v_{sub}.gain"] = (d,)
            elif variant is not V.VANILLA:
                shapes[f"{p}.ln_u_{sub}.gain"] = (d,)
            for s in SCALARS[variant]:
                shapes[f"{p}.{sub}.{s}"] = ()
    shapes["ln_f.gain"] = (d,)
    return shapes


def init_params(cfg):
    params = {}
    out_std = 0.02 / math.sqrt(2 * cfg.layers)
    for name, shape in param_names(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".gain"):
            params[name] = np.ones(shape)
        elif shape == ():
            if leaf == "lambda":
                raw = LAMBDA_RAW_INIT
            else:
                raw = raw_for(SCALAR_INIT[leaf], SCALAR_KIND[leaf])
            params[name] = np.asarray(raw, dtype=np.float64)
        else:
            std = out_std if leaf in ("wo", "w2") else 0.02
            params[name] = _rng(cfg.seed, name).normal(0.0, std, size=shape)
    return params


def count_params(params):
    return int(sum(np.asarray(p).size for p in params.values()))


# ---------------------------------------------------------------------------
# auxiliary streams


def _check_ids(cfg, token_ids):
    ids = np.asarray(token_ids)
    if ids.ndim not in (1, 2):
        raise DimensionError("token ids must be (T,) or (B, T)")
    if ids.shape[-1] > cfg.context:
        raise DimensionError(f"sequence length {ids.shape[-1]} exceeds context {cfg.context}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab):
        raise DimensionError(f"token id out of range [0, {cfg.vocab})")
    return ids.astype(np.int64)


def _embed(params, prefix, ids):
    T = ids.shape[-1]
    return tt.take_rows(params[f"{prefix}wte"], ids) + tt.getitem(tensor(params[f"{prefix}wpe"]), slice(0, T))


def init_aux_streams(cfg, token_ids, params):
    """Starting auxiliary streams: learned embeddings for V/M, S=1, R=I_D."""
    ids = _check_ids(cfg, token_ids)
    streams = STREAMS[cfg.variant]
    lead = ids.shape
    out = AuxStreams()
    if "v" in streams:
        out.v = _embed(params, "aux.v.", ids)
    if "m" in streams:
        out.m = _embed(params, "aux.m.", ids)
    if "s" in streams:
        out.s = Tensor(np.ones(lead + (cfg.d_model,)))
    if "r" in streams:
        D = cfg.head_dim
        out.r = Tensor(np.broadcast_to(np.eye(D), lead + (D, D)).copy())
    return out


# ---------------------------------------------------------------------------
# substeps


def _heads(t, H):
    *lead, d = t.shape
    return t.reshape(*lead, H, d // H)


def _flat(t):
    *lead, H, D = t.shape
    return t.reshape(*lead, H * D)


def _gram(g):
    return g.mT @ g


def _require(scalars, names, variant):
    missing = [n for n in names if n not in scalars]
    if missing:
        raise ContractError(f"{variant.value} substep missing scalars {missing}")
    return [scalars[n] for n in names]


def apply_substep(variant, x, aux, scalars, oracle, ln, ln_v=None, ln_u=None, *,
                  heads=1, ns_steps=5, inv_sqrt_steps=10, ridge=1e-6,
                  ln_eps=LN_EPS, adam_eps=ADAM_EPS, label="substep"):
    """One optimizer-template substep ``(X, S) -> (X', S')``.

    ``oracle`` maps the pre-normalized state to an update direction; ``ln``,
    ``ln_v`` and ``ln_u`` are gain tensors (or ``None`` for a plain
    normalization). ``scalars`` holds materialized values by name.
    """
    variant = BlockVariant.parse(variant)
    x = tensor(x)
    want = STREAMS[variant]
    if aux.present() != want:
        raise ContractError(
            f"{variant.value} expects aux streams {want}, got {aux.present()}")

    def pre(t):
        return layernorm(t, ln, eps=ln_eps)

    def norm_v(t):
        return layernorm(t, ln_v, eps=ln_eps)

    def norm_u(t):
        return layernorm(t, ln_u, eps=ln_eps)

    new = AuxStreams(aux.v, aux.m, aux.s, aux.r)

    try:
        if variant is V.VANILLA:
            x_out = x + oracle(pre(x))

        elif variant is V.HB:
            beta, gamma = _require(scalars, ("beta", "gamma"), variant)
            g = oracle(pre(x))
            new.v = norm_v(ema(aux.v, g, beta, convex=False, gain=gamma))
            x_out = x + new.v

        elif variant in (V.YURII, V.TMM):
            mu, beta, gamma = _require(scalars, ("mu", "beta", "gamma"), variant)
            look = x + mu * aux.v
            g = oracle(pre(look))
            new.v = norm_v(ema(aux.v, g, beta, convex=False, gain=gamma))
            if variant is V.TMM:
                (nu,) = _require(scalars, ("nu",), variant)
                x_out = x + nu * new.v
            else:
                x_out = x + new.v

        elif variant in (V.ADAM, V.ADAMW):
            beta1, beta2, gamma = _require(scalars, ("beta1", "beta2", "gamma"), variant)
            g = oracle(pre(x))
            new.m = ema(aux.m, g, beta1)
            new.s = ema(aux.s, g * g, beta2)
            step = gamma * norm_u(new.m / (tt.sqrt(new.s) + adam_eps))
            if variant is V.ADAMW:
                (lam,) = _require(scalars, ("lambda",), variant)
                x_out = (1.0 - lam) * x + step
            else:
                x_out = x + step

        elif variant is V.RMSPROP:
            beta2, gamma = _require(scalars, ("beta2", "gamma"), variant)
            g = oracle(pre(x))
            new.s = ema(aux.s, g * g, beta2)
            x_out = x + gamma * norm_u(g / (tt.sqrt(new.s) + adam_eps))

        elif variant is V.MUON:
            beta, gamma = _require(scalars, ("beta", "gamma"), variant)
            g = oracle(pre(x))
            new.m = ema(aux.m, g, beta)
            ortho = _flat(newton_schulz_polar(_heads(new.m, heads), ns_steps))
            x_out = x + gamma * norm_u(ortho)

        elif variant is V.ORTHO:
            (gamma,) = _require(scalars, ("gamma",), variant)
            g = oracle(pre(x))
            ortho = _flat(newton_schulz_polar(_heads(g, heads), ns_steps))
            x_out = x + gamma * norm_u(ortho)

        elif variant is V.SHAMPOO:
            beta_r, gamma = _require(scalars, ("betaR", "gamma"), variant)
            g = _heads(oracle(pre(x)), heads)
            new.r = ema(aux.r, _gram(g), beta_r)
            pre_r = inv_sqrt_newton(new.r, inv_sqrt_steps, ridge, check_symmetric=False)
            x_out = x + gamma * norm_u(_flat(g @ pre_r))

        elif variant is V.SOAP:
            beta1, beta_r, gamma = _require(scalars, ("beta1", "betaR", "gamma"), variant)
            g = oracle(pre(x))
            new.m = ema(aux.m, g, beta1)
            gh = _heads(g, heads)
            new.r = ema(aux.r, _gram(gh), beta_r)
            pre_r = inv_sqrt_newton(new.r, inv_sqrt_steps, ridge, check_symmetric=False)
            x_out = x + gamma * norm_u(_flat(_heads(new.m, heads) @ pre_r))

        else:  # pragma: no cover - enum is exhaustive
            raise ContractError(f"unhandled variant {variant}")
    except NumericError as exc:
        raise NumericError(f"{variant.value} {label}: {exc}") from exc

    for name, t in (("x", x_out),) + tuple((k, getattr(new, k)) for k in new.present()):
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"non-finite {name} in {variant.value} {label}")
    return x_out, new


# ---------------------------------------------------------------------------
# layers and model


def layer_scalars(cfg, params, layer, sub, overrides=None):
    """Materialized scalars for one substep copy, with optional fixed overrides.

    ``overrides`` maps ``name`` or ``"a.name"``/``"m.name"`` to a float that
    replaces the materialized value (used to pin e.g. nu=1 exactly).
    """
    out = {}
    overrides = overrides or {}
    for s in SCALARS[cfg.variant]:
        key = f"{sub}.{s}"
        if key in overrides:
            out[s] = float(overrides[key])
        elif s in overrides:
            out[s] = float(overrides[s])
        else:
            out[s] = materialize_tensor(params[f"h{layer}.{sub}.{s}"], SCALAR_KIND[s])
    return out


def _gain(params, name):
    return params.get(name)


def block_forward(cfg, x, aux, params, layer, overrides=None):
    """Attention substep then MLP substep of layer ``layer``."""
    p = f"h{layer}"
    attn_w = {k: params[f"{p}.attn.{k}"] for k in ("wq", "wk", "wv", "wo")}
    mlp_w = {k: params[f"{p}.mlp.{k}"] for k in ("w1", "w2")}
    oracles = {
        "a": lambda t: attention_oracle(t, attn_w, cfg.heads),
        "m": lambda t: mlp_oracle(t, mlp_w),
    }
    for sub in SUBSTEPS:
        x, aux = apply_substep(
            cfg.variant, x, aux,
            layer_scalars(cfg, params, layer, sub, overrides),
            oracles[sub],
            _gain(params, f"{p}.ln_{sub}.gain"),
            _gain(params, f"{p}.ln_v_{sub}.gain"),
            _gain(params, f"{p}.ln_u_{sub}.gain"),
            heads=cfg.heads, ns_steps=cfg.ns_steps, inv_sqrt_steps=cfg.inv_sqrt_steps,
            ridge=cfg.ridge, ln_eps=cfg.ln_eps, adam_eps=cfg.adam_eps,
            label=f"layer {layer} {'attention' if sub == 'a' else 'mlp'} substep",
        )
    return x, aux


def model_forward(cfg, params, token_ids, overrides=None, trace=None):
    """Logits ``(..., T, vocab)`` for token ids ``(T,)`` or ``(B, T)``.

    If ``trace`` is a list, the ``(x, aux)`` entering each layer is appended.
    """
    ids = _check_ids(cfg, token_ids)
    x = _embed(params, "", ids)
    aux = init_aux_streams(cfg, ids, params)
    for layer in range(cfg.layers):
        if trace is not None:
            trace.append((x, aux))
        x, aux = block_forward(cfg, x, aux, params, layer, overrides)
    x = layernorm(x, params["ln_f.gain"], eps=cfg.ln_eps)
    return x @ tensor(params["wte"]).mT


def loss_and_grads(cfg, params, token_ids, targets, overrides=None):
    """Cross-entropy loss and its gradient w.r.t. every parameter."""
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    logits = model_forward(cfg, leaves, token_ids, overrides)
    loss = tt.cross_entropy(logits, targets)
    names = list(leaves)
    grads = tt.grad(loss, [leaves[k] for k in names])
    return float(loss.data), dict(zip(names, grads))


def eval_loss(cfg, params, token_ids, targets, overrides=None):
    logits = model_forward(cfg, params, token_ids, overrides)
    return float(tt.cross_entropy(logits, targets).data)


def greedy_decode(cfg, params, prompt, steps):
    """Debug-only greedy continuation (recomputes the full prefix each step)."""
    ids = list(np.asarray(prompt, dtype=np.int64))
    for _ in range(steps):
        window = np.asarray(ids[-cfg.context:])
        logits = model_forward(cfg, params, window).data
        ids.append(int(np.argmax(logits[-1])))
    return np.asarray(ids)

