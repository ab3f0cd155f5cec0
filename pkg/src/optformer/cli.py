"""Command-line entry point: ``optformer {train,compare,diagnose,filterlab}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure,
3 size guard. Output goes under ``--out``, else the config's ``out``, else
``$OPTFORMER_OUT`` (default ``runs``) plus the command name.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import diagnostics as dg
from . import filterlab as fl
from .blocks import BlockVariant
from .errors import ConfigError, NumericError, OptformerError, SizeGuardError, ValidationError
from .harness import Checkpoint, CorpusSpec, finetune_forgetting, gen_corpus, make_eval_batches, train

log = logging.getLogger("optformer")

ENV_OUT = "OPTFORMER_OUT"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_SIZE = 0, 1, 2, 3
DIAGNOSTICS = ("jacobian", "sharpness", "curve", "ppl", "forgetting")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _out_dir(args, rc, command):
    if args.out:
        return Path(args.out)
    if rc is not None and rc.out:
        return Path(rc.out)
    return Path(os.environ.get(ENV_OUT, "runs")) / command


def _load(args):
    if args.config is None:
        return cfgmod.from_dict({}, args.seed)
    return cfgmod.load(args.config, args.seed)


# ---------------------------------------------------------------------------
# train / compare


def _train_one(rc, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rc.write_resolved(out)
    corpus = gen_corpus(rc.corpus)
    ckpt, record = train(rc.model, corpus, rc.optim, rc.schedule, rc.train)
    ckpt.save(out)
    record.write_csv(out / "run_record.csv")
    return record.summary


def cmd_train(args):
    rc = _load(args)
    if args.variant:
        rc.model = dataclasses.replace(rc.model, variant=BlockVariant.parse(args.variant))
    out = _out_dir(args, rc, "train")
    summary = _train_one(rc, out)
    print(f"{rc.model.variant.value}: best val loss {summary['best_val_loss']:.4f} "
          f"at step {summary['best_step']} -> {out}")
    return EXIT_OK


def _compare_job(payload):
    doc, out = payload
    rc = cfgmod.from_dict(doc)
    try:
        return "ok", _train_one(rc, out)
    except OptformerError as exc:
        return f"failed: {type(exc).__name__}: {exc}", None


SUMMARY_COLUMNS = ("variant", "best_val_loss", "initial_val_loss", "best_step", "steps",
                   "eval_batch_hash", "status")


def cmd_compare(args):
    rc = _load(args)
    names = args.variants.split(",") if args.variants else list(rc.variants)
    variants = [BlockVariant.parse(n) for n in names if n.strip()]
    if len(variants) < 2:
        raise UsageError("compare needs at least two variants")
    out = _out_dir(args, rc, "compare")
    out.mkdir(parents=True, exist_ok=True)
    rc.variants = [v.value for v in variants]
    rc.write_resolved(out)
    jobs = []
    for v in variants:
        sub = dataclasses.replace(rc, model=dataclasses.replace(rc.model, variant=v), variants=[])
        jobs.append((sub.to_dict(), str(out / v.value)))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_compare_job, jobs))
    else:
        results = [_compare_job(j) for j in jobs]
    rows = []
    for v, (status, s) in zip(variants, results):
        if s is None:
            rows.append([v.value, "", "", "", "", "", status])
            print(f"{v.value}: {status}")
        else:
            rows.append([v.value, repr(s["best_val_loss"]), repr(s["initial_val_loss"]),
                         s["best_step"], s["steps"], s["eval_batch_hash"], status])
            print(f"{v.value}: best val loss {s['best_val_loss']:.4f} "
                  f"(initial {s['initial_val_loss']:.4f})")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    w.writerows(rows)
    (out / "summary.csv").write_text(buf.getvalue())
    ranked = sorted((r for r in rows if r[1] != ""), key=lambda r: float(r[1]))
    print("ordering (best val loss): " + " < ".join(r[0] for r in ranked))
    return EXIT_OK if all(r[-1] == "ok" for r in rows) else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# diagnose


def _parse_target(text, source):
    name, _, seed = text.partition(":")
    try:
        return CorpusSpec(name=name, vocab=source.vocab, seed=int(seed) if seed else source.seed,
                          train_tokens=source.train_tokens, val_tokens=source.val_tokens)
    except ValueError as exc:
        raise UsageError(f"bad --target-corpus {text!r}: {exc}") from exc


def cmd_diagnose(args):
    if args.which == "forgetting" and not args.target_corpus:
        raise UsageError("--which forgetting requires --target-corpus NAME[:SEED]")
    ckdir = Path(args.checkpoint)
    if not (ckdir / "checkpoint.json").is_file():
        raise ConfigError(f"no checkpoint found in {ckdir}")
    ckpt = Checkpoint.load(ckdir)
    doc = {k: ckpt.config[k] for k in ("model", "corpus", "train") if k in ckpt.config}
    if args.config:
        rc = cfgmod.load(args.config, args.seed)
        diag, ft = rc.diagnostics, rc.finetune
    else:
        rc = None
        diag, ft = cfgmod.DiagConfig(), cfgmod.FinetuneConfig()
    run = cfgmod.from_dict(doc)
    run.diagnostics, run.finetune = diag, ft
    cfg, params = run.model, ckpt.params
    out = Path(args.out) if args.out else _out_dir(args, rc, "diagnose") if rc and rc.out else ckdir / "diagnostics"
    out.mkdir(parents=True, exist_ok=True)
    run.write_resolved(out)
    corpus = gen_corpus(run.corpus)
    batches = make_eval_batches(corpus.val, diag.probe_batches, run.train.batch_size,
                                cfg.context, run.train.data_seed)

    if args.which == "jacobian":
        Js = dg.layer_jacobians(cfg, params, batches[0][0][0])
        rep = dg.spectrum_metrics(Js, diag.cutoff)
        (out / "spectrum.csv").write_text(rep.to_csv())
        (out / "spectrum.json").write_text(rep.to_json())
        print(f"P = {rep.persistence:.6f} over {len(Js)} layers -> {out / 'spectrum.csv'}")
    elif args.which == "sharpness":
        rep = dg.sharpness(cfg, params, batches, diag.power_iters, diag.power_tol, diag.probes,
                           diag.direction_seed, diag.curve_grid, diag.alpha_max)
        (out / "sharpness.json").write_text(rep.to_json())
        curve = dg.CurveResult(rep.curve_alphas, rep.curve_losses, rep.curve_range)
        (out / "curve.csv").write_text(curve.to_csv())
        print(f"lambda_max = {rep.lambda_max:.6g}, tr(H)/N = {rep.trace_per_param:.6g} "
              f"(std {rep.trace_std:.3g}) -> {out / 'sharpness.json'}")
    elif args.which == "curve":
        curve = dg.filter_normalized_curve(lambda p: dg.evaluate(cfg, p, batches), params,
                                           diag.direction_seed, diag.alpha_max, diag.curve_grid)
        (out / "curve.csv").write_text(curve.to_csv())
        print(f"loss range {curve.loss_range:.6g} -> {out / 'curve.csv'}")
    elif args.which == "ppl":
        ppl = dg.perplexity_eval(cfg, params, batches)
        (out / "ppl.json").write_text(json.dumps({"ppl": ppl, "nats": math.log(ppl)}, indent=1))
        print(f"perplexity {ppl:.4f} -> {out / 'ppl.json'}")
    else:
        target = gen_corpus(_parse_target(args.target_corpus, run.corpus))
        res = finetune_forgetting(ckpt, corpus, target, diag.ft_steps, ft)
        body = dataclasses.asdict(res)
        curves = body.pop("curves")
        (out / "forgetting.json").write_text(json.dumps(body, indent=1))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "source_loss", "target_loss"])
        w.writerows([s, repr(a), repr(b)] for s, a, b in curves)
        (out / "forgetting_curve.csv").write_text(buf.getvalue())
        print(f"forgetting {res.forgetting:.6f} -> {out / 'forgetting.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# filterlab


def filterlab_checks(fc, seed=0):
    """Theory checks as ``(name, passed, detail)`` tuples; nothing here raises."""
    checks = []
    results = fl.sweep(fc.kappas, fc.depth, fc.n_modes)
    for r in results:
        if r.kappa > 1:
            checks.append((f"rho_mom < rho_vanilla at kappa={r.kappa:g}", r.rho_mom < r.rho_vanilla,
                           f"{r.rho_mom:.6f} vs {r.rho_vanilla:.6f}"))
            checks.append((f"vanilla rate at kappa={r.kappa:g}",
                           abs(r.observed_rate_vanilla - r.rho_vanilla) <= 1e-6,
                           f"observed {r.observed_rate_vanilla:.9f}"))
            ok = r.crossover_N is not None and r.crossover_N <= r.analytic_N0
            checks.append((f"crossover within analytic N0 at kappa={r.kappa:g}", ok,
                           f"crossover {r.crossover_N}, N0 {r.analytic_N0}"))
        else:
            checks.append(("kappa=1 rates are zero", r.rho_mom == 0 and r.rho_vanilla == 0, ""))
    rng = np.random.default_rng([seed, 707])
    for eps in fc.epsilons:
        res = [fl.diagonal_redundancy_check(fl.random_balanced_vector(rng, fc.redundancy_dim, eps),
                                            float(rng.uniform(0, 0.1)), eps)
               for _ in range(fc.redundancy_vectors)]
        checks.append((f"diagonal redundancy chain at eps={eps:g}",
                       all(r.holds and r.chain_holds for r in res),
                       f"max deviation {max(r.deviation for r in res):.3e}"))
    worst, acausal = 0.0, False
    for _ in range(fc.factorization_instances):
        T, d = 6, 4
        A = np.tril(rng.random((T, T)))
        A /= A.sum(axis=1, keepdims=True)
        M = rng.standard_normal((T, T))
        P = fl.spd_inv_sqrt(M @ M.T + T * np.eye(T))
        r = fl.token_side_factorization_check(A, rng.standard_normal((d, d)), P,
                                              rng.standard_normal((T, d)))
        worst = max(worst, r.residual)
        acausal |= not r.causal
    checks.append(("token-side factorization residual < 1e-10", worst < 1e-10, f"max {worst:.3e}"))
    checks.append(("preconditioned mixer loses causality", acausal, ""))
    return results, checks


def cmd_filterlab(args):
    rc = _load(args)
    out = _out_dir(args, rc, "filterlab")
    out.mkdir(parents=True, exist_ok=True)
    rc.write_resolved(out)
    results, checks = filterlab_checks(rc.filterlab, rc.seed)
    (out / "sweep.csv").write_text(fl.sweep_csv(results))
    lines = [f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
             for name, ok, detail in checks]
    (out / "checks.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="optformer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="TOML or JSON run config, or preset:NAME")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="global seed (overrides the config)")

    t = sub.add_parser("train", help="train one variant")
    common(t)
    t.add_argument("--variant")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compare", help="train several variants on shared data")
    common(c)
    c.add_argument("--variants", help="comma-separated variant names")
    c.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    c.set_defaults(func=cmd_compare)

    d = sub.add_parser("diagnose", help="measurements on a checkpoint")
    common(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--which", required=True, choices=DIAGNOSTICS)
    d.add_argument("--target-corpus", help="NAME[:SEED] for --which forgetting")
    d.set_defaults(func=cmd_diagnose)

    f = sub.add_parser("filterlab", help="quadratic-sandbox theory checks")
    common(f)
    f.set_defaults(func=cmd_filterlab)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SizeGuardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIZE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValidationError, OptformerError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
