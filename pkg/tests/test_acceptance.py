"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed as they happen (visible with ``-s``) and collected into
an "acceptance criteria" section at the end of the pytest run.
"""

import csv
import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ALL_VARIANTS, jittered_params, tiny_config
from optformer import cli
from optformer import filterlab as fl
from optformer.blocks import eval_loss, loss_and_grads, model_forward, param_names
from optformer.config import FilterlabConfig
from optformer.core.ops import inv_sqrt_newton, newton_schulz_polar
from optformer.diagnostics import (
    filter_normalized_direction,
    full_block_jacobian,
    hutchinson_trace,
    matrix_operator,
    power_iteration,
    record_trajectory,
    spectrum_metrics,
)
from optformer.blocks import block_forward
from optformer.core.autograd import Tensor
from optformer.harness import (
    CorpusSpec,
    FinetuneConfig,
    TrainConfig,
    finetune_forgetting,
    forgetting,
    gen_corpus,
    train,
)
from optformer.paramopt import Schedule, schedule_value

LATTICE = [
    ("tmm", {"nu": 1.0}, "yurii"),
    ("yurii", {"mu": 0.0}, "hb"),
    ("adam", {"beta1": 0.0}, "rmsprop"),
    ("adamw", {"lambda": 0.0}, "adam"),
    ("muon", {"beta": 0.0}, "ortho"),
    ("soap", {"beta1": 0.0}, "shampoo"),
]


# 1 ---------------------------------------------------------------------------


def test_criterion_1_reduction_lattice(acceptance):
    t0 = time.perf_counter()
    worst = {}
    for big, pins, small in LATTICE:
        dev = 0.0
        for trial in range(20):
            cfg_b = tiny_config(big, seed=trial)
            cfg_s = tiny_config(small, seed=trial)
            params = jittered_params(cfg_b, seed=trial)
            assert set(param_names(cfg_s)) <= set(params)
            ids = np.random.default_rng([trial, 1]).integers(0, cfg_b.vocab, (2, cfg_b.context))
            yb = model_forward(cfg_b, params, ids, overrides=pins).data
            ys = model_forward(cfg_s, params, ids).data
            dev = max(dev, float(np.abs(yb - ys).max()))
        worst[f"{big}{pins}->{small}"] = dev
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-12 and elapsed < 10
    acceptance(1, ok, f"max |diff| {max(worst.values()):.1e} over 6 pairs x 20 inputs, "
                      f"{elapsed:.1f}s")
    assert ok, worst


# 2 ---------------------------------------------------------------------------


def _directional_errors(cfg, params, ids, y, rng, h=1e-5):
    """Relative FD error along one random direction per tensor plus three global ones."""
    _, g = loss_and_grads(cfg, params, ids, y)
    dirs = []
    for k in params:
        d = {k: rng.standard_normal(np.shape(params[k]))}
        dirs.append(d)
    for _ in range(3):
        dirs.append({k: rng.standard_normal(np.shape(v)) for k, v in params.items()})
    errs = []
    for d in dirs:
        norm = math.sqrt(sum(float(np.sum(v * v)) for v in d.values()))
        plus = {k: params[k] + h * d[k] / norm if k in d else params[k] for k in params}
        minus = {k: params[k] - h * d[k] / norm if k in d else params[k] for k in params}
        fd = (eval_loss(cfg, plus, ids, y) - eval_loss(cfg, minus, ids, y)) / (2 * h)
        an = sum(float(np.sum(g[k] * d[k])) for k in d) / norm
        errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-12))
    return max(errs), len(dirs)


def test_criterion_2_gradients(acceptance):
    t0 = time.perf_counter()
    worst, n_dirs = {}, 0
    for v in ALL_VARIANTS:
        cfg = tiny_config(v, layers=2, d_model=16, context=8)
        params = jittered_params(cfg)
        rng = np.random.default_rng(0)
        ids = rng.integers(0, cfg.vocab, (2, 8))
        y = rng.integers(0, cfg.vocab, (2, 8))
        worst[v], n = _directional_errors(cfg, params, ids, y, rng)
        n_dirs += n
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-3 and elapsed < 120
    acceptance(2, ok, f"worst rel err {worst[top]:.1e} ({top}) over {n_dirs} directions, "
                      f"{elapsed:.1f}s")
    assert ok, worst


# 3 ---------------------------------------------------------------------------


def test_criterion_3_causality(acceptance):
    t0 = time.perf_counter()
    worst = 0.0
    for v in ALL_VARIANTS:
        cfg = tiny_config(v)
        params = jittered_params(cfg)
        rng = np.random.default_rng([7, ALL_VARIANTS.index(v)])
        ids = rng.integers(0, cfg.vocab, cfg.context)
        base = model_forward(cfg, params, ids).data
        for t in range(cfg.context - 1):
            alt = ids.copy()
            alt[t + 1:] = (ids[t + 1:] + rng.integers(1, cfg.vocab, cfg.context - t - 1)) % cfg.vocab
            out = model_forward(cfg, params, alt).data
            worst = max(worst, float(np.abs(out[:t + 1] - base[:t + 1]).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 30
    acceptance(3, ok, f"max prefix change {worst:.1e} over 11 variants, {elapsed:.1f}s")
    assert ok


# 4 ---------------------------------------------------------------------------


def _spd_with_condition(rng, D, cond):
    q, _ = np.linalg.qr(rng.standard_normal((D, D)))
    lam = np.exp(rng.uniform(0.0, math.log(cond), D))
    lam[0], lam[-1] = 1.0, cond
    lam *= 10.0 ** rng.uniform(-3, 3)
    a = (q * lam) @ q.T
    return 0.5 * (a + a.T)


def _inv_sqrt_residual(a):
    z = inv_sqrt_newton(a, 10).data
    return float(np.abs(z @ a @ z - np.eye(len(a))).max())


def test_criterion_4_operator_oracles(acceptance):
    rng = np.random.default_rng(44)
    monotone, ns_dev = True, 0.0
    for _ in range(200):
        m = rng.standard_normal((4, 8))
        prev = np.linalg.svd(m / np.linalg.norm(m), compute_uv=False)
        for k in range(1, 6):
            s = np.linalg.svd(newton_schulz_polar(m, k).data, compute_uv=False)
            monotone &= bool(np.all(s >= prev - 1e-12) and np.all(s <= 1 + 1e-12))
            prev = s
        ns_dev = max(ns_dev, float(np.abs(prev - 1).max()))

    res = 0.0
    for D, cond in itertools.product((2, 4, 8), (1.0, 10.0, 100.0)):
        for _ in range(50):
            res = max(res, _inv_sqrt_residual(_spd_with_condition(rng, D, cond)))
        # two-cluster spectrum: one small eigenvalue among large ones
        q, _ = np.linalg.qr(rng.standard_normal((D, D)))
        lam = np.r_[1.0, np.full(D - 1, cond)]
        res = max(res, _inv_sqrt_residual((q * lam) @ q.T))
    res16 = max(_inv_sqrt_residual(_spd_with_condition(rng, 16, 100.0)) for _ in range(20))

    ok = monotone and ns_dev <= 0.3 and res < 1e-6
    acceptance(4, ok, f"NS monotone={monotone}, max |sigma-1| at K=5 {ns_dev:.3f}; "
                      f"inv_sqrt residual {res:.1e} (D<=8), {res16:.1e} (D=16, not asserted)")
    assert ok


# 5 ---------------------------------------------------------------------------


def test_criterion_5_filterlab(acceptance):
    t0 = time.perf_counter()
    fails = []
    for r in fl.sweep((1.5, 2.0, 4.0, 9.0, 25.0, 100.0), depth=200, n_modes=9):
        if not r.rho_mom < r.rho_vanilla:
            fails.append(f"rho order at {r.kappa}")
        if abs(r.observed_rate_vanilla - r.rho_vanilla) > 1e-6:
            fails.append(f"vanilla rate at {r.kappa}")
        if r.kappa == 9.0 and abs(r.observed_rate_mom - r.rho_mom) > 0.05:
            fails.append(f"hb envelope rate {r.observed_rate_mom}")
        if r.kappa == 9.0:
            hb_rate = r.observed_rate_mom

    root_dev = 0.0
    for kappa in (1.5, 2.0, 4.0, 9.0, 25.0, 100.0):
        mu, L = 1.0, kappa
        _, beta, _ = fl.momentum_rate(mu, L)
        mods = fl.char_root_moduli(mu, L, np.linspace(mu, L, 33))
        root_dev = max(root_dev, float(np.abs(mods - math.sqrt(beta)).max()))
    if root_dev > 1e-9:
        fails.append(f"root moduli {root_dev}")

    cmp = fl.compare_filters(1.0, 9.0, depth=50)
    if not cmp.worst_mom[-1] < cmp.worst_vanilla[-1]:
        fails.append("momentum does not beat vanilla at N=50")
    elapsed = time.perf_counter() - t0
    ok = not fails and elapsed < 5
    acceptance(5, ok, f"HB rate at kappa=9 {hb_rate:.4f} (theory 0.5), root dev {root_dev:.1e}, "
                      f"{elapsed:.2f}s" + (f"; failures: {fails}" if fails else ""))
    assert ok


# 6 ---------------------------------------------------------------------------


def test_criterion_6_redundancy(acceptance):
    _, checks = cli.filterlab_checks(FilterlabConfig(kappas=[9.0]), seed=0)
    wanted = [c for c in checks if c[0].startswith(("diagonal", "token-side", "preconditioned"))]
    assert len(wanted) == 6
    ok = all(passed for _, passed, _ in wanted)
    detail = "; ".join(f"{name}{' (' + d + ')' if d else ''}" for name, _, d in wanted[-2:])
    acceptance(6, ok, f"chain holds for eps in (0.01, 0.1, 0.5, 1) x 1000 vectors; {detail}")
    assert ok, [c for c in wanted if not c[1]]


# 7 ---------------------------------------------------------------------------


def test_criterion_7_diagnostics_oracles(acceptance):
    rng = np.random.default_rng(77)
    # dense Jacobian vs central differences
    cfg = tiny_config("tmm", context=4, d_model=8)
    p = jittered_params(cfg)
    x, aux = record_trajectory(cfg, p, np.array([1, 5, 2, 7]))[1]
    J = full_block_jacobian(cfg, p, x, aux, 1)
    h = 1e-5
    fd = np.empty_like(J)
    for j in range(x.size):
        e = np.zeros(x.size)
        e[j] = h
        yp = block_forward(cfg, Tensor(x + e.reshape(x.shape)), aux, p, 1)[0].data
        ym = block_forward(cfg, Tensor(x - e.reshape(x.shape)), aux, p, 1)[0].data
        fd[:, j] = (yp - ym).ravel() / (2 * h)
    jac_err = float(np.abs(J - fd).max())

    # spectrum metrics on diagonal fixtures
    spec_err = 0.0
    for diag in ([2.0, 0.5], [3.0, 1.0, 1e-3], [1.0, 1.0, 1.0, 1.0]):
        s = np.array(diag)
        rep = spectrum_metrics([np.diag(s)]).layers[0]
        want = (s.min(), float(np.sum(s ** 2) / s.max() ** 2), s.max() / s.min())
        spec_err = max(spec_err, *(abs(a - b) for a, b in
                                   zip((rep.sigma_min, rep.stable_rank, rep.spread), want)))

    # power iteration vs eigvalsh
    pow_err = 0.0
    for _ in range(10):
        a = rng.standard_normal((10, 10))
        A = a @ a.T + 0.1 * np.eye(10)
        top = np.linalg.eigvalsh(A)[-1]
        r = power_iteration(matrix_operator(A), 10, 5000, 1e-12)
        pow_err = max(pow_err, abs(r.lambda_max - top) / top)

    # exhaustive Hutchinson
    hut_err = 0.0
    for n in (1, 4, 8, 12):
        A = rng.standard_normal((n, n))
        A = A + A.T
        hut_err = max(hut_err, abs(hutchinson_trace(matrix_operator(A), n, exhaustive=True).estimate
                                   - np.trace(A)))

    # filter-normalized direction norms
    params = jittered_params(tiny_config("soap"))
    d = filter_normalized_direction(params, seed=3)
    norm_err = max(abs(np.linalg.norm(d[k]) - np.linalg.norm(params[k])) for k in params)

    # schedule boundaries
    sched_ok = True
    for kind in ("warmup-cosine", "wsd"):
        s = Schedule(kind=kind, total=100, warmup=10, decay_start=10 if kind != "wsd" else 60,
                     min_lr=0.1)
        sched_ok &= schedule_value(s, 0) == 0.0
        sched_ok &= schedule_value(s, 10) == 1.0
        sched_ok &= schedule_value(s, 100) == 0.1
    sched_ok &= schedule_value(Schedule(kind="constant"), 0) == 1.0

    ok = (jac_err < 1e-4 and spec_err <= 1e-10 and pow_err <= 1e-3 and hut_err < 1e-8
          and norm_err <= 1e-10 and sched_ok)
    acceptance(7, ok, f"jacobian {jac_err:.1e}, spectrum {spec_err:.1e}, power {pow_err:.1e}, "
                      f"hutchinson {hut_err:.1e}, filter norms {norm_err:.1e}, "
                      f"schedules exact={sched_ok}")
    assert ok


# 8 ---------------------------------------------------------------------------

COMPARE_VARIANTS = "vanilla,hb,yurii,tmm,adam"


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(Path(root).rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_criterion_8_end_to_end_compare(acceptance, tmp_path, capsys):
    runs = []
    for rep in ("a", "b"):
        out = tmp_path / rep
        t0 = time.perf_counter()
        code = cli.main(["compare", "--variants", COMPARE_VARIANTS, "--out", str(out),
                         "--seed", "0"])
        runs.append((code, time.perf_counter() - t0, out))
    printed = capsys.readouterr().out
    rows = list(csv.DictReader((runs[0][2] / "summary.csv").open()))
    halved = {r["variant"]: float(r["best_val_loss"]) <= 0.5 * float(r["initial_val_loss"])
              for r in rows}
    same = _files(runs[0][2]) == _files(runs[1][2])
    ordering = next(line for line in printed.splitlines() if line.startswith("ordering"))
    losses = ", ".join(f"{r['variant']} {float(r['best_val_loss']):.4f}" for r in rows)
    ok = (all(c == 0 for c, _, _ in runs) and runs[0][1] < 15 * 60 and all(halved.values())
          and len(rows) == 5 and same)
    acceptance(8, ok, f"{runs[0][1]:.0f}s per run, all halved={all(halved.values())}, "
                      f"bit-identical rerun={same}; {losses}; {ordering}")
    assert ok, (halved, same, [r[:2] for r in runs])


# 9 ---------------------------------------------------------------------------


def test_criterion_9_forgetting(acceptance):
    small = dict(vocab=16, train_tokens=6000, val_tokens=2000)
    source = gen_corpus(CorpusSpec(**small))
    target = gen_corpus(CorpusSpec(name="brackets", **small))
    tc = TrainConfig(steps=4, batch_size=4, eval_every=2, eval_batches=2)
    ft = FinetuneConfig(batch_size=4, eval_every=2, eval_batches=2, lr=1e-3)
    sched = Schedule(total=4, warmup=1)

    zero, hashes = [], set()
    for v in ("vanilla", "tmm", "adam"):
        ckpt = train(tiny_config(v), source, train_cfg=tc, schedule=sched)[0]
        r0 = finetune_forgetting(ckpt, source, target, 0, ft)
        r = finetune_forgetting(ckpt, source, target, 3, ft)
        zero.append(r0.forgetting == 0.0)
        hashes.add((r0.source_hash, r0.target_hash))
        hashes.add((r.source_hash, r.target_hash))
        zero.append(r.forgetting == r.source_after - r.source_before)

    rng = np.random.default_rng(9)
    pairs = rng.uniform(0.5, 5.0, (100, 2))
    arith = all(forgetting(a, b) == b - a for a, b in pairs)
    arith &= forgetting(3.0, 3.5) == 0.5 and forgetting(2.0, 2.0) == 0.0

    ok = all(zero) and arith and len(hashes) == 1
    acceptance(9, ok, f"zero at ft_steps=0 and consistent: {all(zero)}, arithmetic: {arith}, "
                      f"distinct eval-batch hashes across variants: {len(hashes)}")
    assert ok
