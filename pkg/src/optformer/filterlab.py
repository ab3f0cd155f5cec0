"""Local quadratic sandbox for depth-as-iteration filters.

A residual stack near a fixed point behaves like an iterative solver on a
quadratic with curvatures in ``[mu_curv, L_curv]``. Each eigenmode of the
linearized momentum substep

    v' = b v - eta*lam*(e + a v),      e' = e + c v'

follows a second-order recurrence; vanilla residual updates are the special
case ``a = b = 0, c = 1``. This module evaluates the closed-form contraction
rates, simulates the recurrences, and checks two algebraic redundancy
results (diagonal preconditioning under LayerNorm, token-side
preconditioning of a linear mixer).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

DIVERGENCE_GUARD = 1e12


def _check_curv(mu, L):
    if not (mu > 0 and L >= mu and math.isfinite(L)):
        raise ValidationError(f"need 0 < mu_curv <= L_curv, got {mu}, {L}")


def vanilla_rate(mu, L):
    """Best fixed step ``2/(L+mu)`` and its contraction ``(k-1)/(k+1)``."""
    _check_curv(mu, L)
    return 2.0 / (L + mu), (L - mu) / (L + mu)


def momentum_rate(mu, L):
    """Heavy-ball step, decay and rate ``sqrt(beta) = (sqrt k - 1)/(sqrt k + 1)``."""
    _check_curv(mu, L)
    sl, sm = math.sqrt(L), math.sqrt(mu)
    rho = (sl - sm) / (sl + sm)
    return 4.0 / (L + mu + 2.0 * math.sqrt(L * mu)), rho * rho, rho


def rate_gap(kappa):
    """``rho_vanilla - rho_mom`` written in ``s = sqrt(kappa)``."""
    s = math.sqrt(kappa)
    return 2.0 * s * (s - 1.0) / ((s * s + 1.0) * (s + 1.0))


# ---------------------------------------------------------------------------
# coefficient families


def coefficients(family, **kw):
    """``(a, b, c)`` for a named update family.

    ``vanilla``: (0, 0, 1). ``hb``: (0, beta, 1). ``yurii``: (mu, beta, 1).
    ``tmm``: (mu, beta, nu).
    """
    if family == "vanilla":
        return 0.0, 0.0, 1.0
    if family == "hb":
        return 0.0, kw["beta"], 1.0
    if family == "yurii":
        return kw["mu"], kw["beta"], 1.0
    if family == "tmm":
        return kw["mu"], kw["beta"], kw.get("nu", 1.0)
    raise ValidationError(f"unknown family {family!r}")


def recurrence_coeffs(a, b, c, eta, lam):
    """``(alpha, theta)`` with ``e_{l+1} = alpha e_l - theta e_{l-1}``."""
    lam = np.asarray(lam, dtype=np.float64)
    return 1.0 + b - (a + c) * eta * lam, b - a * eta * lam


@dataclass
class FilterScenario:
    mu_curv: float
    L_curv: float
    a: float = 0.0
    b: float = 0.0
    c: float = 1.0
    eta: float | None = None
    depth: int = 50
    spectrum: list | None = None
    e0: float | list = 1.0
    v0: float | list = 0.0

    def __post_init__(self):
        _check_curv(self.mu_curv, self.L_curv)
        if self.depth < 0:
            raise ValidationError("depth must be >= 0")
        if self.eta is None:
            self.eta = vanilla_rate(self.mu_curv, self.L_curv)[0]
        if self.spectrum is None:
            self.spectrum = list(np.linspace(self.mu_curv, self.L_curv, 9))
        lam = np.asarray(self.spectrum, dtype=np.float64)
        tol = 1e-12 * self.L_curv
        if lam.size == 0 or lam.min() < self.mu_curv - tol or lam.max() > self.L_curv + tol:
            raise ValidationError("spectrum must be non-empty and inside [mu_curv, L_curv]")

    @property
    def kappa(self):
        return self.L_curv / self.mu_curv

    @classmethod
    def vanilla(cls, mu, L, depth=50, **kw):
        return cls(mu, L, 0.0, 0.0, 1.0, vanilla_rate(mu, L)[0], depth, **kw)

    @classmethod
    def heavy_ball(cls, mu, L, depth=50, **kw):
        eta, beta, _ = momentum_rate(mu, L)
        return cls(mu, L, 0.0, beta, 1.0, eta, depth, **kw)


@dataclass
class Trajectory:
    errors: np.ndarray  # (modes, depth + 1)
    velocities: np.ndarray
    stable: bool
    diverged_at: int | None = None

    def worst(self):
        return np.max(np.abs(self.errors), axis=0)


def eigenmode_recurrence(sc):
    """Simulate the ``(e, v)`` pair for every mode; divergence is flagged, not raised."""
    lam = np.asarray(sc.spectrum, dtype=np.float64)
    m = lam.size
    e = np.broadcast_to(np.asarray(sc.e0, dtype=np.float64), (m,)).copy()
    v = np.broadcast_to(np.asarray(sc.v0, dtype=np.float64), (m,)).copy()
    E = np.full((m, sc.depth + 1), np.nan)
    Vv = np.full((m, sc.depth + 1), np.nan)
    E[:, 0], Vv[:, 0] = e, v
    damp = sc.b - sc.a * sc.eta * lam
    for k in range(1, sc.depth + 1):
        v = -sc.eta * lam * e + damp * v
        e = e + sc.c * v
        if not np.all(np.isfinite(e)) or np.max(np.abs(e)) > DIVERGENCE_GUARD:
            return Trajectory(E, Vv, False, k)
        E[:, k], Vv[:, k] = e, v
    return Trajectory(E, Vv, True, None)


def fit_envelope_rate(errors):
    """Asymptotic per-step rate from a 1-D error trajectory.

    Fits a least-squares line to ``log|e|`` at the local maxima of ``|e|``
    in the last half of the trajectory (all points if it never oscillates),
    and returns ``exp(slope)``.
    """
    y = np.abs(np.asarray(errors, dtype=np.float64))
    n = y.size
    if n < 4:
        raise ValidationError("trajectory too short to fit a rate")
    idx = np.arange(n // 2, n)
    tail = y[idx]
    peaks = [i for j, i in enumerate(idx[1:-1], start=1) if tail[j] >= tail[j - 1] and tail[j] >= tail[j + 1]]
    pts = np.asarray(peaks if len(peaks) >= 2 else idx)
    vals = y[pts]
    keep = vals > 0
    if keep.sum() < 2:
        return 0.0
    slope = np.polyfit(pts[keep].astype(np.float64), np.log(vals[keep]), 1)[0]
    return float(math.exp(slope))


def char_root_moduli(mu, L, lam=None, eta=None, beta=None, rel_tol=1e-12):
    """Moduli of the roots of ``r^2 - (1 - eta lam + beta) r + beta``.

    Defaults to the heavy-ball parameters. A discriminant within
    ``rel_tol`` of zero (the band edges) is treated as a double root.
    """
    if eta is None or beta is None:
        eta, beta, _ = momentum_rate(mu, L)
    lam = np.atleast_1d(np.asarray(np.linspace(mu, L, 101) if lam is None else lam, dtype=np.float64))
    t = 1.0 - eta * lam + beta
    disc = t * t - 4.0 * beta
    scale = np.maximum(t * t, 4.0 * abs(beta))
    out = np.empty((lam.size, 2))
    for i in range(lam.size):
        if disc[i] <= rel_tol * scale[i] and beta >= 0:
            # complex pair (product beta) or a double root t/2 with t^2 = 4 beta
            out[i] = math.sqrt(beta)
        else:
            r = np.roots([1.0, -t[i], beta])
            out[i] = np.sort(np.abs(r))
    return out


# ---------------------------------------------------------------------------
# vanilla vs momentum


@dataclass
class FilterComparison:
    kappa: float
    rho_vanilla: float
    rho_mom: float
    depths: list
    worst_vanilla: list
    worst_mom: list
    observed_rate_vanilla: float
    observed_rate_mom: float
    crossover_N: int | None
    c_mom: float
    analytic_N0: int | None
    stable: bool = True
    notes: list = field(default_factory=list)


def compare_filters(mu, L, depth=50, n_modes=9, e0=1.0, v0=0.0):
    """Worst-mode error vs depth for tuned vanilla and heavy-ball filters.

    ``c_mom`` is measured as ``sup_l max|e_l| / (rho_mom^l max|e_0|)`` and
    gives ``N0 = ceil(log c_mom / log(rho_van / rho_mom))``.
    """
    _check_curv(mu, L)
    spec = list(np.linspace(mu, L, n_modes))
    _, rv = vanilla_rate(mu, L)
    _, _, rm = momentum_rate(mu, L)
    van = eigenmode_recurrence(FilterScenario.vanilla(mu, L, depth, spectrum=spec, e0=e0, v0=v0))
    mom = eigenmode_recurrence(FilterScenario.heavy_ball(mu, L, depth, spectrum=spec, e0=e0, v0=v0))
    wv, wm = van.worst(), mom.worst()
    notes = []
    if rv == 0.0:
        # kappa = 1: both filters annihilate every mode in one step.
        return FilterComparison(1.0, 0.0, 0.0, list(range(depth + 1)), wv.tolist(), wm.tolist(),
                                0.0, 0.0, 0, 1.0, 0, van.stable and mom.stable,
                                ["kappa = 1: no crossover needed"])
    cross = next((k for k in range(1, depth + 1) if wm[k] < wv[k]), None)
    ells = np.arange(depth + 1)
    ratio = wm / (rm ** ells * wm[0])
    c_mom = float(np.nanmax(ratio))
    n0 = max(0, math.ceil(math.log(c_mom) / math.log(rv / rm))) if c_mom > 0 else 0
    obs_v = fit_envelope_rate(van.errors[0]) if depth >= 4 else float("nan")
    obs_m = _worst_mode_rate(mom) if depth >= 4 else float("nan")
    if cross is None:
        notes.append("no crossover within the simulated depth")
    return FilterComparison(L / mu, rv, rm, ells.tolist(), wv.tolist(), wm.tolist(), obs_v, obs_m,
                            cross, c_mom, n0, van.stable and mom.stable, notes)


def _worst_mode_rate(traj):
    return max(fit_envelope_rate(row) for row in traj.errors)


SWEEP_COLUMNS = ("kappa", "rho_vanilla", "rho_mom", "observed_rate_vanilla",
                 "observed_rate_mom", "crossover_N")
DEFAULT_KAPPAS = (1.0, 1.5, 2.0, 4.0, 9.0, 25.0, 100.0)


def sweep(kappas=DEFAULT_KAPPAS, depth=200, n_modes=9):
    """One :class:`FilterComparison` per condition number, curvature floor ``mu = 1``."""
    if len(kappas) == 0:
        raise ValidationError("kappa grid must be non-empty")
    return [compare_filters(1.0, float(k), depth, n_modes) for k in kappas]


def sweep_csv(results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in results:
        w.writerow([repr(r.kappa), repr(r.rho_vanilla), repr(r.rho_mom),
                    repr(r.observed_rate_vanilla), repr(r.observed_rate_mom),
                    "" if r.crossover_N is None else r.crossover_N])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# redundancy results


@dataclass
class RedundancyResult:
    alpha: float
    deviation: float
    bound_tight: float
    bound: float
    sqrt_bound: float
    eps_half: float
    balanced: bool
    holds: bool

    @property
    def chain_holds(self):
        tol = 1e-15
        return (self.deviation <= self.bound_tight + tol
                and self.bound_tight <= self.bound + tol
                and self.bound <= self.sqrt_bound + tol
                and self.sqrt_bound <= self.eps_half + tol)


def diagonal_redundancy_check(s, delta=0.0, epsilon=0.1):
    """How far ``D_s = diag(1/(sqrt s + delta))`` is from a scalar matrix.

    ``alpha = 1/(rho_min + delta)``. ``deviation`` is ``||D_s/alpha - I||_2``.
    Bounds, in order: ``(1 - 1/sqrt(1+eps))/(1 + delta/rho_max)``,
    ``(sqrt(1+eps) - 1)/(1 + delta/rho_max)``, ``sqrt(1+eps) - 1``, ``eps/2``.
    ``balanced`` reports whether ``rho_max^2/rho_min^2 <= 1 + eps``.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size == 0 or np.any(s <= 0):
        raise ValidationError("s must be a non-empty strictly positive vector")
    if delta < 0 or not 0 <= epsilon <= 1:
        raise ValidationError("need delta >= 0 and epsilon in [0, 1]")
    rho = np.sqrt(s)
    rmin, rmax = float(rho.min()), float(rho.max())
    d = 1.0 / (rho + delta)
    alpha = 1.0 / (rmin + delta)
    dev = float(np.max(np.abs(d / alpha - 1.0)))
    root = math.sqrt(1.0 + epsilon)
    shrink = 1.0 + delta / rmax
    tight = (1.0 - 1.0 / root) / shrink
    bound = (root - 1.0) / shrink
    balanced = rmax * rmax <= (1.0 + epsilon) * rmin * rmin * (1.0 + 1e-12)
    return RedundancyResult(alpha, dev, tight, bound, root - 1.0, epsilon / 2.0,
                            balanced, balanced and dev <= bound + 1e-15)


def random_balanced_vector(rng, d, epsilon):
    """Positive ``s`` with ``max sqrt(s)^2 / min sqrt(s)^2 <= 1 + eps``."""
    rmin = float(np.exp(rng.uniform(-3.0, 3.0)))
    rho = rmin * (1.0 + rng.uniform(0.0, 1.0, size=d) * (math.sqrt(1.0 + epsilon) - 1.0))
    rho[0] = rmin
    return rho * rho


@dataclass
class FactorizationResult:
    residual: float
    causal: bool
    nonnegative: bool
    row_stochastic: bool


def token_side_factorization_check(A, W, P, X, tol=1e-10):
    """Residual of ``P(AXW) = (PA)XW`` and validity flags for ``PA`` as a mixer."""
    A, W, P, X = (np.asarray(m, dtype=np.float64) for m in (A, W, P, X))
    T = A.shape[0]
    if A.shape != (T, T) or P.shape != (T, T) or X.shape[0] != T or W.shape[0] != X.shape[1]:
        raise ValidationError(
            f"shapes do not conform: A{A.shape} P{P.shape} X{X.shape} W{W.shape}")
    left = P @ (A @ X @ W)
    PA = P @ A
    right = PA @ X @ W
    res = float(np.linalg.norm(left - right))
    scale = max(1.0, float(np.max(np.abs(PA))))
    return FactorizationResult(
        residual=res,
        causal=bool(np.all(np.abs(np.triu(PA, 1)) <= tol * scale)),
        nonnegative=bool(np.all(PA >= -tol * scale)),
        row_stochastic=bool(np.all(PA >= -tol * scale)
                            and np.allclose(PA.sum(axis=1), 1.0, atol=tol * T)),
    )


def spd_inv_sqrt(Lm):
    """``L^{-1/2}`` of a symmetric positive-definite matrix via eigendecomposition."""
    w, U = np.linalg.eigh(np.asarray(Lm, dtype=np.float64))
    if np.any(w <= 0):
        raise ValidationError("matrix is not positive definite")
    return (U / np.sqrt(w)) @ U.T
