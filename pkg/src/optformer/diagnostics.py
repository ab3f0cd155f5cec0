"""Measurement suite: block Jacobian spectra, Hessian probes, loss slices, perplexity.

Hessian-vector products are central differences of the analytic gradient,
so everything here needs only first-order tape support. Operators that act
on flat vectors take an ``hvp(v) -> Hv`` callable, which lets the same power
iteration and Hutchinson code run on explicit test matrices and on models.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .blocks import AuxStreams, block_forward, loss_and_grads, model_forward
from .core import autograd as tt
from .errors import NumericError, SizeGuardError, ValidationError
from .harness import evaluate

log = logging.getLogger(__name__)

MAX_JACOBIAN_DIM = 4096
DEFAULT_CUTOFF = 1e-6


class DegenerateSpectrumError(NumericError):
    """Every singular value of a layer Jacobian fell below the cutoff."""


# ---------------------------------------------------------------------------
# block Jacobians


def record_trajectory(cfg, params, ids):
    """``(x, aux)`` entering each layer for a single sequence ``ids`` of shape ``(T,)``."""
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise ValidationError("trajectory recording takes one sequence of shape (T,)")
    trace = []
    model_forward(cfg, params, ids, trace=trace)
    return [(x.data.copy(), aux.detached()) for x, aux in trace]


def _tile_aux(aux, n):
    out = {}
    for k in ("v", "m", "s", "r"):
        t = getattr(aux, k)
        out[k] = None if t is None else tt.Tensor(np.broadcast_to(t.data, (n,) + t.shape).copy())
    return AuxStreams(**out)


def full_block_jacobian(cfg, params, x, aux, layer, overrides=None, chunk=256, max_dim=None):
    """Dense ``(T*d, T*d)`` Jacobian of layer ``layer`` at input ``x`` of shape ``(T, d)``.

    Auxiliary streams are held at ``aux`` and treated as constants. Rows are
    built from batched VJPs: the input is replicated along a batch axis and
    each copy is seeded with one identity row.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"expected one sequence of shape (T, d), got {x.shape}")
    n = x.size
    max_dim = MAX_JACOBIAN_DIM if max_dim is None else max_dim
    if n > max_dim:
        raise SizeGuardError(
            f"block Jacobian of size {n}x{n} (T*d={n}) too large for dense diagnostic "
            f"(limit T*d <= {max_dim})")
    J = np.empty((n, n))
    for start in range(0, n, chunk):
        rows = min(chunk, n - start)
        xb = tt.Tensor(np.broadcast_to(x, (rows,) + x.shape).copy(), requires_grad=True)
        y, _ = block_forward(cfg, xb, _tile_aux(aux, rows), params, layer, overrides)
        seed = np.zeros((rows, n))
        seed[np.arange(rows), start + np.arange(rows)] = 1.0
        (gx,) = tt.grad(y, [xb], seed.reshape(y.shape))
        J[start:start + rows] = gx.reshape(rows, n)
    if not np.all(np.isfinite(J)):
        raise NumericError(f"non-finite entries in the layer {layer} Jacobian")
    return J


def layer_jacobians(cfg, params, ids, overrides=None):
    """Jacobian of every layer along the trajectory of sequence ``ids``."""
    traj = record_trajectory(cfg, params, ids)
    return [full_block_jacobian(cfg, params, x, aux, layer, overrides)
            for layer, (x, aux) in enumerate(traj)]


@dataclass
class LayerSpectrum:
    layer: int
    singular_values: list
    sigma_min: float
    log_sigma_min: float
    stable_rank: float
    spread: float


@dataclass
class SpectrumReport:
    layers: list
    persistence: float
    cutoff: float

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=1)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "sigma_min", "stable_rank", "spread"])
        for s in self.layers:
            w.writerow([s.layer, repr(s.sigma_min), repr(s.stable_rank), repr(s.spread)])
        return buf.getvalue()


def spectrum_metrics(jacobians, cutoff=DEFAULT_CUTOFF):
    """Per-layer effective spectrum, stable rank and spread; ``P`` sums log sigma_min.

    Singular values below ``cutoff * sigma_max`` are discarded before the
    minimum and the spread are taken. Stable rank uses the whole matrix.
    """
    if len(jacobians) == 0:
        raise ValidationError("need at least one layer Jacobian")
    if not cutoff >= 0:
        raise ValidationError("cutoff must be non-negative")
    layers = []
    for i, J in enumerate(jacobians):
        sv = np.linalg.svd(np.asarray(J, dtype=np.float64), compute_uv=False)
        smax = sv[0] if sv.size else 0.0
        kept = sv[sv >= cutoff * smax] if smax > 0 else sv[:0]
        if kept.size == 0:
            raise DegenerateSpectrumError(f"layer {i}: no singular value above the cutoff")
        smin = float(kept[-1])
        layers.append(LayerSpectrum(
            layer=i,
            singular_values=kept.tolist(),
            sigma_min=smin,
            log_sigma_min=math.log(smin),
            stable_rank=float(np.sum(sv ** 2) / smax ** 2),
            spread=float(smax / smin),
        ))
    return SpectrumReport(layers, float(sum(s.log_sigma_min for s in layers)), cutoff)


# ---------------------------------------------------------------------------
# Hessian probes


def flatten(params, names=None):
    names = sorted(params) if names is None else names
    return np.concatenate([np.ravel(params[k]) for k in names]), names


def unflatten(vec, like, names):
    out, i = {}, 0
    for k in names:
        shape = np.shape(like[k])
        n = int(np.prod(shape))
        out[k] = vec[i:i + n].reshape(shape)
        i += n
    return out


def model_loss_grad(cfg, params, batches, overrides=None):
    """``f(theta_flat) -> (loss, grad_flat)`` averaged over fixed ``batches``."""
    _, names = flatten(params)

    def f(theta):
        p = unflatten(theta, params, names)
        loss, g = 0.0, np.zeros_like(theta)
        for x, y in batches:
            l, gd = loss_and_grads(cfg, p, x, y, overrides)
            loss += l
            g += flatten(gd, names)[0]
        return loss / len(batches), g / len(batches)

    return f


def hvp(grad_fn, theta, v, scale=None):
    """Hessian-vector product by central differences of ``grad_fn``.

    ``grad_fn(theta) -> gradient`` (or ``(loss, gradient)``). The step along
    the unit direction is ``cbrt(eps) * max(1, ||theta||)`` unless ``scale``
    is given.
    """
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    vn = float(np.linalg.norm(v))
    if vn == 0.0:
        raise ValidationError("hvp direction must be non-zero")
    if scale is None:
        scale = max(1.0, float(np.linalg.norm(theta)))
    h = np.cbrt(np.finfo(np.float64).eps) * scale
    u = v / vn

    def g(t):
        out = grad_fn(t)
        out = out[1] if isinstance(out, tuple) else out
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite gradient inside hvp")
        return np.asarray(out, dtype=np.float64)

    return (g(theta + h * u) - g(theta - h * u)) * (vn / (2.0 * h))


def hvp_operator(grad_fn, theta, scale=None):
    return lambda v: hvp(grad_fn, theta, v, scale)


def matrix_operator(A):
    A = np.asarray(A, dtype=np.float64)
    return lambda v: A @ v


@dataclass
class PowerResult:
    lambda_max: float
    iters: int
    converged: bool
    history: list = field(default_factory=list)


def power_iteration(op, n, max_iters=100, tol=1e-6, seed=0):
    """Dominant (by magnitude) eigenvalue of a symmetric operator via Rayleigh quotients.

    Stops once the relative change of the estimate drops below ``tol``;
    otherwise returns the last estimate with ``converged=False``.
    """
    if max_iters < 1:
        raise ValidationError("max_iters must be >= 1")
    rng = np.random.default_rng([seed, 404])
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    w = op(v)
    lam = float(v @ w)
    history = [lam]
    for k in range(1, max_iters + 1):
        wn = float(np.linalg.norm(w))
        if wn == 0.0:
            return PowerResult(0.0, k - 1, True, history)
        v = w / wn
        w = op(v)
        new = float(v @ w)
        history.append(new)
        if abs(new - lam) <= tol * abs(new):
            return PowerResult(new, k, True, history)
        lam = new
    log.warning("power iteration did not converge in %d iterations", max_iters)
    return PowerResult(lam, max_iters, False, history)


@dataclass
class HutchinsonResult:
    estimate: float
    std: float
    probes: int
    trace_per_param: float


def hutchinson_trace(op, n, probes=10, seed=0, exhaustive=False):
    """Trace estimate from Rademacher probes ``v^T H v``.

    ``exhaustive=True`` averages over all ``2^n`` sign vectors (``n <= 12``),
    which recovers the trace exactly.
    """
    if exhaustive:
        if n > 12:
            raise ValidationError("exhaustive sign enumeration is limited to n <= 12")
        vecs = (np.array(s, dtype=np.float64) for s in itertools.product((1.0, -1.0), repeat=n))
    else:
        if probes < 1:
            raise ValidationError("need at least one probe")
        rng = np.random.default_rng([seed, 505])
        vecs = (rng.integers(0, 2, size=n) * 2.0 - 1.0 for _ in range(probes))
    vals = np.array([float(v @ op(v)) for v in vecs])
    est = float(vals.mean())
    std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return HutchinsonResult(est, std, int(vals.size), est / n)


@dataclass
class CurveResult:
    alphas: list
    losses: list
    loss_range: float

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "loss"])
        for a, l in zip(self.alphas, self.losses):
            w.writerow([repr(a), repr(l)])
        return buf.getvalue()


def filter_normalized_direction(params, seed=0):
    """Gaussian direction rescaled per tensor to that tensor's norm."""
    rng = np.random.default_rng([seed, 606])
    out = {}
    for name in sorted(params):
        p = np.asarray(params[name], dtype=np.float64)
        d = rng.standard_normal(p.shape)
        pn, dn = np.linalg.norm(p), np.linalg.norm(d)
        if pn == 0.0 or dn == 0.0:
            log.info("filter normalization: %s has zero norm, direction left as drawn", name)
            out[name] = d
        else:
            out[name] = d * (pn / dn)
    return out


def filter_normalized_curve(loss_fn, params, seed=0, alpha_max=1.0, grid=21):
    """``loss_fn(theta + alpha d)`` on an odd grid over ``[-alpha_max, alpha_max]``.

    ``params`` is not modified; ``alpha = 0`` is evaluated at ``params`` itself.
    """
    if grid < 1 or grid % 2 == 0:
        raise ValidationError("grid must be odd so that alpha = 0 is sampled")
    d = filter_normalized_direction(params, seed)
    alphas = np.linspace(-alpha_max, alpha_max, grid)
    alphas[grid // 2] = 0.0
    losses = []
    for a in alphas:
        if a == 0.0:
            losses.append(float(loss_fn(params)))
        else:
            losses.append(float(loss_fn({k: params[k] + a * d[k] for k in params})))
    return CurveResult(alphas.tolist(), losses, max(losses) - min(losses))


@dataclass
class SharpnessReport:
    lambda_max: float
    power_iters: int
    power_converged: bool
    trace: float
    trace_std: float
    probes: int
    trace_per_param: float
    n_params: int
    curve_alphas: list = field(default_factory=list)
    curve_losses: list = field(default_factory=list)
    curve_range: float = 0.0

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=1)


def sharpness(cfg, params, batches, power_iters=50, tol=1e-3, probes=10, seed=0,
              curve_grid=21, alpha_max=1.0):
    """Top Hessian eigenvalue, Hutchinson trace and a filter-normalized slice."""
    f = model_loss_grad(cfg, params, batches)
    theta, _ = flatten(params)
    op = hvp_operator(f, theta)
    pw = power_iteration(op, theta.size, power_iters, tol, seed)
    hu = hutchinson_trace(op, theta.size, probes, seed)
    curve = filter_normalized_curve(lambda p: evaluate(cfg, p, batches), params, seed,
                                    alpha_max, curve_grid)
    return SharpnessReport(pw.lambda_max, pw.iters, pw.converged, hu.estimate, hu.std,
                           hu.probes, hu.trace_per_param, int(theta.size),
                           curve.alphas, curve.losses, curve.loss_range)


# ---------------------------------------------------------------------------
# perplexity


def perplexity(mean_ce):
    return math.exp(mean_ce)


def perplexity_eval(cfg, params, batches):
    """``exp`` of the mean token cross-entropy over ``batches``."""
    return perplexity(evaluate(cfg, params, batches))
