"""Numerical operators shared by every block variant.

All functions accept :class:`Tensor` or array-likes and return tensors, so
they run both inside a recorded forward pass and as plain numpy kernels.
Leading axes are treated as batch axes throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from ..errors import ConfigError, DimensionError, NumericError, ValidationError
from . import autograd as tt
from .autograd import Tensor, tensor

LN_EPS = 1e-5
ADAM_EPS = 1e-8

# Quintic Newton-Schulz coefficients: p(x) = (15x - 10x^3 + 3x^5) / 8.
# p(1) = 1 with p'(1) = p''(1) = 0, and p maps (0, 1] monotonically into
# (x, 1], so every singular value of a Frobenius-normalized input climbs
# monotonically to 1 (cubically once close).
NS_COEFFS = (15.0 / 8.0, -10.0 / 8.0, 3.0 / 8.0)

_FROB_FLOOR = 1e-30


def check_finite(x, what):
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values in {what}")


def layernorm(x, gain=None, bias=None, eps=LN_EPS):
    """Normalize the last axis to zero mean and unit RMS, then apply gain/bias."""
    x = tensor(x)
    if x.shape[-1] < 2:
        raise DimensionError(f"layernorm needs d >= 2, got d={x.shape[-1]}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    check_finite(x, "layernorm input")
    xc = x - x.mean(axis=-1, keepdims=True)
    var = (xc * xc).mean(axis=-1, keepdims=True)
    y = xc / tt.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def _causal_mask(T):
    return np.tril(np.ones((T, T), dtype=bool))


def attention_oracle(x_norm, weights, heads):
    """Causal multi-head softmax attention.

    ``weights`` holds ``wq, wk, wv, wo``, each ``d x d`` in ``x @ W`` layout.
    """
    x = tensor(x_norm)
    *batch, T, d = x.shape
    if d % heads:
        raise ConfigError(f"model dim {d} not divisible by heads {heads}")
    dh = d // heads

    def split(t):
        return t.reshape(*batch, T, heads, dh).swapaxes(-2, -3)

    q = split(x @ weights["wq"])
    k = split(x @ weights["wk"])
    v = split(x @ weights["wv"])
    scores = (q @ k.mT) * (1.0 / math.sqrt(dh))
    att = tt.softmax(scores, axis=-1, mask=_causal_mask(T))
    y = (att @ v).swapaxes(-2, -3).reshape(*batch, T, d)
    return y @ weights["wo"]


def mlp_oracle(x_norm, weights):
    """Tokenwise two-layer MLP ``silu(x W1) W2`` (hidden width from ``w1``)."""
    x = tensor(x_norm)
    w1, w2 = tensor(weights["w1"]), tensor(weights["w2"])
    if w1.shape[0] != x.shape[-1] or w2.shape != (w1.shape[1], x.shape[-1]):
        raise DimensionError(
            f"mlp weight shapes {w1.shape}, {w2.shape} do not fit d={x.shape[-1]}")
    return tt.silu(x @ w1) @ w2


def ema(prev, fresh, decay, convex=True, gain=None):
    """``decay*prev + (1-decay)*fresh`` (convex) or ``decay*prev + gain*fresh``."""
    prev, fresh = tensor(prev), tensor(fresh)
    if prev.shape != fresh.shape:
        raise DimensionError(f"ema shape mismatch {prev.shape} vs {fresh.shape}")
    if convex:
        return decay * prev + (1.0 - decay) * fresh
    if gain is None:
        raise ValueError("non-convex ema needs an explicit gain")
    return decay * prev + gain * fresh


def frobenius_norm(m):
    m = tensor(m)
    return tt.sqrt((m * m).sum(axis=(-2, -1), keepdims=True) + _FROB_FLOOR)


def newton_schulz_polar(m, steps=5, return_zero_flag=False):
    """Approximate polar factor of each trailing ``(H, D)`` matrix.

    The input is Frobenius-normalized, then ``steps`` quintic iterations
    ``Y <- Y (a I + b Y^T Y + c (Y^T Y)^2)`` are applied. All-zero matrices
    map to zero; ``return_zero_flag`` also returns a boolean array marking them.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    m = tensor(m)
    zero = np.all(m.data == 0.0, axis=(-2, -1))
    a, b, c = NS_COEFFS
    y = m / frobenius_norm(m)
    wide = y.shape[-2] <= y.shape[-1]
    if not wide:
        y = y.mT
    for _ in range(steps):
        gram = y @ y.mT
        y = a * y + (b * gram + c * (gram @ gram)) @ y
    if not wide:
        y = y.mT
    if return_zero_flag:
        return y, zero
    return y


def _check_symmetric(r, tol=1e-10):
    d = r.data
    scale = 1.0 + np.max(np.abs(d)) if d.size else 1.0
    asym = np.max(np.abs(d - np.swapaxes(d, -1, -2))) if d.size else 0.0
    if asym > tol * scale:
        raise ValidationError(f"inv_sqrt_newton input not symmetric (max asym {asym:.3e})")


def inv_sqrt_newton(r, steps=10, ridge=0.0, check_symmetric=True):
    """Inverse square root of symmetric PSD matrices by coupled Newton-Schulz.

    ``A = r + ridge*I`` is scaled by ``c = ||A||_F / 2`` so its spectrum lies
    in (0, 2]; then ``T = (3I - Z Y)/2, Y <- Y T, Z <- T Z`` drives
    ``Z -> (A/c)^(-1/2)``. Returns ``Z / sqrt(c)``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    r = tensor(r)
    D = r.shape[-1]
    if r.shape[-2] != D:
        raise DimensionError(f"inv_sqrt_newton needs square matrices, got {r.shape}")
    if check_symmetric:
        _check_symmetric(r)
    check_finite(r, "inv_sqrt_newton input")
    eye = np.eye(D)
    a = r + ridge * eye if ridge else r
    c = frobenius_norm(a) * 0.5
    y = a / c
    z = tensor(np.broadcast_to(eye, r.shape))
    for k in range(steps):
        t = 0.5 * (3.0 * eye - z @ y)
        y = y @ t
        z = t @ z
        znorm = np.sqrt(np.sum(z.data ** 2, axis=(-2, -1)))
        if not np.all(np.isfinite(znorm)) or np.max(znorm) > 1e12:
            raise NumericError(
                f"inv_sqrt_newton diverged at iteration {k + 1} "
                f"(max ||Z||_F = {np.max(znorm):.3e}); input may be indefinite")
    return z / tt.sqrt(c)


# ---------------------------------------------------------------------------
# constrained scalars

Kind = Literal["unit", "positive"]


@dataclass
class ScalarParam:
    raw: float
    kind: Kind = "unit"

    def __post_init__(self):
        if self.kind not in ("unit", "positive"):
            raise ValueError(f"unknown scalar kind {self.kind!r}")


def materialize(p):
    """Map a raw scalar to (0, 1) via the logistic or to (0, inf) via softplus."""
    if p.kind == "unit":
        return float(tt.sigmoid(np.asarray(p.raw)).data)
    return float(np.logaddexp(0.0, p.raw))


def materialize_tensor(raw, kind):
    raw = tensor(raw)
    return tt.sigmoid(raw) if kind == "unit" else tt.softplus(raw)


def raw_for(value, kind):
    """Inverse of :func:`materialize`."""
    if kind == "unit":
        if not 0.0 < value < 1.0:
            raise ValueError("unit-interval value must lie in (0, 1)")
        return math.log(value / (1.0 - value))
    if value <= 0:
        raise ValueError("positive value must be > 0")
    return value + math.log(-math.expm1(-value))
