"""Parameter-space training: schedules, AdamW, Muon, SAM and group routing.

Training splits parameters into four groups: 2-D projection weights go to
Muon; embeddings, LayerNorm gains and the per-layer scalars go to AdamW
(scalars at a higher rate). One schedule multiplier scales every group.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from .core.ops import newton_schulz_polar
from .errors import ConfigError, ValidationError

log = logging.getLogger(__name__)


class RoutingError(ConfigError):
    """A tensor was sent to an optimizer that cannot handle it."""


# ---------------------------------------------------------------------------
# schedules


@dataclass
class Schedule:
    kind: Literal["warmup-cosine", "wsd", "constant"] = "warmup-cosine"
    total: int = 500
    warmup: int = 50
    decay_start: int | None = None
    min_lr: float = 0.1

    def __post_init__(self):
        if self.kind not in ("warmup-cosine", "wsd", "constant"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.decay_start is None:
            self.decay_start = self.warmup if self.kind != "wsd" else self.total
        if not 0 <= self.warmup <= self.decay_start <= self.total:
            raise ConfigError(
                f"need 0 <= warmup <= decay_start <= total, got "
                f"{self.warmup}, {self.decay_start}, {self.total}")
        if not 0.0 < self.min_lr <= 1.0:
            raise ConfigError("min_lr must lie in (0, 1]")


def schedule_value(s, t):
    """Learning-rate multiplier at step ``t``."""
    if not 0 <= t <= s.total:
        raise ValidationError(f"step {t} outside [0, {s.total}]")
    if s.kind == "constant":
        return 1.0
    if t < s.warmup:
        return t / s.warmup
    if s.kind == "wsd":
        if t < s.decay_start:
            return 1.0
        span = s.total - s.decay_start
        frac = (t - s.decay_start) / span if span else 1.0
        return s.min_lr if frac >= 1.0 else 1.0 - (1.0 - s.min_lr) * frac
    span = s.total - s.warmup
    frac = (t - s.warmup) / span if span else 1.0
    return s.min_lr + (1.0 - s.min_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


def sam_active(mode, schedule, t):
    """Whether the SAM gradient is used at step ``t`` ("off", "sam" or "sawd")."""
    if mode == "off":
        return False
    if mode == "sam":
        return True
    if mode == "sawd":
        if schedule.kind != "wsd":
            raise ConfigError("SAWD needs the wsd schedule")
        return t >= schedule.decay_start
    raise ConfigError(f"unknown SAM mode {mode!r}")


# ---------------------------------------------------------------------------
# single-tensor steps


def adamw_step(params, grads, state, lr, wd=0.0, betas=(0.9, 0.95), eps=1e-8):
    """One bias-corrected AdamW step over a dict of arrays.

    ``state`` holds ``step`` plus per-name ``m``/``s`` moment dicts; it is
    created on first use and updated in place. Returns the new params dict.
    """
    b1, b2 = betas
    m = state.setdefault("m", {})
    s = state.setdefault("s", {})
    k = state.get("step", 0) + 1
    state["step"] = k
    c1 = 1.0 - b1 ** k
    c2 = 1.0 - b2 ** k
    out = {}
    for name, x in params.items():
        g = grads[name]
        if g.shape != x.shape:
            raise ValidationError(f"grad shape {g.shape} != param shape {x.shape} for {name}")
        mk = m.get(name)
        sk = s.get(name)
        if mk is None:
            mk = np.zeros_like(x)
            sk = np.zeros_like(x)
        if mk.shape != x.shape:
            raise ValidationError(f"optimizer state shape mismatch for {name}")
        mk = b1 * mk + (1.0 - b1) * g
        sk = b2 * sk + (1.0 - b2) * g * g
        m[name], s[name] = mk, sk
        out[name] = (1.0 - wd * lr) * x - lr * (mk / c1) / (np.sqrt(sk / c2) + eps)
    return out


def muon_step(weight, grad, buf, lr, beta=0.95, ns_steps=5, nesterov=True):
    """One Muon step on a matrix; returns ``(new_weight, new_buffer)``.

    The buffer is an EMA of gradients; the applied direction is its
    (Nesterov-blended) polar factor from Newton-Schulz.
    """
    weight = np.asarray(weight)
    if weight.ndim != 2:
        raise RoutingError(f"Muon only handles rank-2 tensors, got shape {weight.shape}")
    if buf is None:
        buf = np.zeros_like(weight)
    buf = beta * buf + (1.0 - beta) * grad
    direction = beta * buf + (1.0 - beta) * grad if nesterov else buf
    update = newton_schulz_polar(direction, ns_steps).data
    return weight - lr * update, buf


# ---------------------------------------------------------------------------
# SAM


@dataclass
class SamResult:
    loss: float
    grads: dict
    perturbation_norm: float
    perturbed: bool


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def sam_wrap(loss_and_grad, params, rho=0.05):
    """Gradient at ``theta + rho * g/||g||`` on the same minibatch.

    ``loss_and_grad(params) -> (loss, grads)``. ``params`` is never mutated.
    A zero gradient or ``rho == 0`` falls back to the plain gradient.
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    loss, g = loss_and_grad(params)
    norm = global_norm(g)
    if rho == 0 or norm == 0.0:
        if norm == 0.0 and rho > 0:
            log.info("SAM: zero gradient, using plain gradient")
        return SamResult(loss, g, 0.0, False)
    scale = rho / norm
    shifted = {k: params[k] + scale * g[k] for k in params}
    _, g_sam = loss_and_grad(shifted)
    pnorm = math.sqrt(sum(float(np.sum((scale * g[k]) ** 2)) for k in g))
    return SamResult(loss, g_sam, pnorm, True)


def clip_by_global_norm(grads, max_norm):
    norm = global_norm(grads)
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-12)
    return {k: g * scale for k, g in grads.items()}, norm


# ---------------------------------------------------------------------------
# group routing and the combined optimizer


@dataclass
class OptimConfig:
    kind: Literal["hybrid", "adamw"] = "hybrid"
    muon_lr: float = 0.02
    muon_momentum: float = 0.95
    muon_nesterov: bool = True
    ns_steps: int = 5
    embed_lr: float = 3e-3
    embed_wd: float = 0.1
    norm_lr: float = 3e-3
    scalar_lr: float = 1.5e-2
    adamw_lr: float = 3e-3
    adamw_wd: float = 0.1
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    clip: float = 1.0

    def __post_init__(self):
        if self.kind not in ("hybrid", "adamw"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        self.betas = tuple(float(b) for b in self.betas)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# Full-scale recipe (12x768 backbone, OpenWebText); not desk-scale.
FULL_OWT = OptimConfig(muon_lr=0.004, embed_lr=6e-4, norm_lr=6e-4, scalar_lr=3e-3)
FULL_TS = OptimConfig(muon_lr=0.02, embed_lr=6e-4, norm_lr=6e-4, scalar_lr=3e-3)


@dataclass
class ParamGroup:
    name: str
    members: list
    kind: Literal["muon", "adamw"]
    lr: float
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.95)
    momentum: float = 0.95


def _role(name, shape):
    if name.startswith(("wte", "wpe", "aux.")):
        return "embed"
    if name.endswith(".gain"):
        return "norm"
    if len(shape) == 0:
        return "scalar"
    if (".attn." in name or ".mlp." in name) and len(shape) == 2:
        return "matrix"
    raise RoutingError(f"no optimizer group for parameter {name} {shape}")


def build_param_groups(params, cfg):
    """Split parameters into the four training groups."""
    roles = {"matrix": [], "embed": [], "norm": [], "scalar": []}
    for name, p in params.items():
        roles[_role(name, np.shape(p))].append(name)
    if cfg.kind == "adamw":
        lr, wd = cfg.adamw_lr, cfg.adamw_wd
        return [
            ParamGroup("matrix", roles["matrix"], "adamw", lr, wd, cfg.betas),
            ParamGroup("embed", roles["embed"], "adamw", lr, wd, cfg.betas),
            ParamGroup("norm", roles["norm"], "adamw", lr, 0.0, cfg.betas),
            ParamGroup("scalar", roles["scalar"], "adamw", lr, 0.0, cfg.betas),
        ]
    return [
        ParamGroup("matrix", roles["matrix"], "muon", cfg.muon_lr, 0.0,
                   momentum=cfg.muon_momentum),
        ParamGroup("embed", roles["embed"], "adamw", cfg.embed_lr, cfg.embed_wd, cfg.betas),
        ParamGroup("norm", roles["norm"], "adamw", cfg.norm_lr, 0.0, cfg.betas),
        ParamGroup("scalar", roles["scalar"], "adamw", cfg.scalar_lr, 0.0, cfg.betas),
    ]


@dataclass
class Optimizer:
    """Muon + AdamW over the four parameter groups, with global clipping."""

    cfg: OptimConfig
    groups: list
    state: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params, cfg):
        groups = build_param_groups(params, cfg)
        seen = [n for g in groups for n in g.members]
        if sorted(seen) != sorted(params) or len(seen) != len(set(seen)):
            raise RoutingError("every parameter must belong to exactly one group")
        return cls(cfg, groups, {g.name: {} for g in groups})

    def step(self, params, grads, lr_mult=1.0):
        grads, norm = clip_by_global_norm(grads, self.cfg.clip)
        out = dict(params)
        for g in self.groups:
            st = self.state[g.name]
            lr = g.lr * lr_mult
            if g.kind == "muon":
                bufs = st.setdefault("buf", {})
                for name in g.members:
                    out[name], bufs[name] = muon_step(
                        params[name], grads[name], bufs.get(name), lr, g.momentum,
                        self.cfg.ns_steps, self.cfg.muon_nesterov)
            else:
                sub = {n: params[n] for n in g.members}
                out.update(adamw_step(sub, {n: grads[n] for n in g.members}, st, lr,
                                      g.weight_decay, g.betas, self.cfg.eps))
        return out, norm

    def state_arrays(self):
        """Flatten optimizer state into ``name -> array`` for checkpoints."""
        flat = {}
        for gname, st in self.state.items():
            for key, val in st.items():
                if isinstance(val, dict):
                    for pname, arr in val.items():
                        flat[f"{gname}/{key}/{pname}"] = np.asarray(arr)
                else:
                    flat[f"{gname}/{key}"] = np.asarray(val, dtype=np.float64)
        return flat

    def load_state_arrays(self, flat):
        state = {g.name: {} for g in self.groups}
        for key, arr in flat.items():
            parts = key.split("/", 2)
            if len(parts) == 3:
                state[parts[0]].setdefault(parts[1], {})[parts[2]] = np.array(arr)
            else:
                state[parts[0]][parts[1]] = int(arr)
        self.state = state
