import csv
import json

import pytest

from optformer import cli, config
from optformer.errors import ConfigError

TOY = """
seed = 0
[model]
layers = 1
heads = 2
d_model = 8
context = 8
vocab = 16
[corpus]
vocab = 16
train_tokens = 4000
val_tokens = 1000
[train]
steps = 4
batch_size = 2
eval_every = 2
eval_batches = 2
[diagnostics]
probe_batches = 1
power_iters = 3
probes = 2
curve_grid = 3
ft_steps = 2
[finetune]
batch_size = 2
eval_batches = 1
eval_every = 1
[filterlab]
depth = 60
redundancy_vectors = 20
factorization_instances = 5
"""


@pytest.fixture
def toy(tmp_path):
    p = tmp_path / "toy.toml"
    p.write_text(TOY)
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


# --- config -----------------------------------------------------------------


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[model]\nlayerz = 2\n")
    with pytest.raises(ConfigError, match="layerz"):
        config.load(p)
    p.write_text("[modle]\n")
    with pytest.raises(ConfigError, match="modle"):
        config.load(p)


def test_seed_flows_to_model_and_data(toy):
    rc = config.load(toy, seed=7)
    assert rc.model.seed == 7 and rc.train.data_seed == 7
    assert rc.schedule.total == 4


def test_resolved_config_reloads_identically(toy, tmp_path):
    rc = config.load(toy)
    path = rc.write_resolved(tmp_path / "out")
    again = config.load(path)
    assert again.to_dict() == rc.to_dict()


# --- train ------------------------------------------------------------------


def test_train_missing_config_names_path(tmp_path, capsys):
    assert run("train", "--config", tmp_path / "nope.toml") == 1
    assert "nope.toml" in capsys.readouterr().err


def test_train_writes_artifacts_and_is_reproducible(toy, tmp_path):
    for name in ("a", "b"):
        assert run("train", "--config", toy, "--out", tmp_path / name, "--variant", "hb") == 0
    for f in ("checkpoint.json", "checkpoint.bin", "run_record.csv", "resolved_config.json"):
        assert (tmp_path / "a" / f).is_file()
    assert (tmp_path / "a/run_record.csv").read_bytes() == (tmp_path / "b/run_record.csv").read_bytes()
    resolved = json.loads((tmp_path / "a/resolved_config.json").read_text())
    assert resolved["model"]["layers"] == 1


def test_env_var_sets_default_output_root(toy, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.ENV_OUT, str(tmp_path / "root"))
    assert run("train", "--config", toy) == 0
    assert (tmp_path / "root/train/run_record.csv").is_file()


def test_usage_errors_exit_one(capsys):
    assert run("train", "--bogus") == 1
    assert run() == 1


# --- compare ----------------------------------------------------------------


def test_compare_two_variants(toy, tmp_path):
    assert run("compare", "--config", toy, "--variants", "vanilla,tmm", "--out", tmp_path / "c") == 0
    rows = list(csv.DictReader((tmp_path / "c/summary.csv").open()))
    assert [r["variant"] for r in rows] == ["vanilla", "tmm"]
    assert rows[0]["eval_batch_hash"] == rows[1]["eval_batch_hash"]
    assert (tmp_path / "c/vanilla/checkpoint.json").is_file()
    assert (tmp_path / "c/tmm/run_record.csv").is_file()


def test_compare_unknown_variant(toy, tmp_path, capsys):
    assert run("compare", "--config", toy, "--variants", "vanilla,lion", "--out", tmp_path) == 1
    assert "valid names" in capsys.readouterr().err


def test_compare_needs_two(toy, tmp_path):
    assert run("compare", "--config", toy, "--variants", "vanilla", "--out", tmp_path) == 1


# --- diagnose ---------------------------------------------------------------


@pytest.fixture
def ckpt(toy, tmp_path):
    out = tmp_path / "run"
    assert run("train", "--config", toy, "--out", out, "--variant", "adam") == 0
    return out


def test_diagnose_jacobian(ckpt, toy):
    assert run("diagnose", "--checkpoint", ckpt, "--which", "jacobian", "--config", toy,
               "--out", ckpt / "d") == 0
    lines = (ckpt / "d/spectrum.csv").read_text().splitlines()
    assert lines[0] == "layer,sigma_min,stable_rank,spread" and len(lines) == 2


def test_diagnose_sharpness(ckpt, toy):
    assert run("diagnose", "--checkpoint", ckpt, "--which", "sharpness", "--config", toy,
               "--out", ckpt / "d") == 0
    rep = json.loads((ckpt / "d/sharpness.json").read_text())
    for k in ("lambda_max", "trace", "trace_per_param", "trace_std"):
        assert k in rep


def test_diagnose_ppl_and_curve(ckpt, toy):
    for which in ("ppl", "curve"):
        assert run("diagnose", "--checkpoint", ckpt, "--which", which, "--config", toy,
                   "--out", ckpt / "d") == 0
    assert json.loads((ckpt / "d/ppl.json").read_text())["ppl"] > 1
    assert (ckpt / "d/curve.csv").read_text().count("\n") == 4


def test_diagnose_forgetting(ckpt, toy, capsys):
    assert run("diagnose", "--checkpoint", ckpt, "--which", "forgetting") == 1
    assert "--target-corpus" in capsys.readouterr().err
    assert run("diagnose", "--checkpoint", ckpt, "--which", "forgetting", "--config", toy,
               "--target-corpus", "brackets", "--out", ckpt / "d") == 0
    rep = json.loads((ckpt / "d/forgetting.json").read_text())
    assert rep["forgetting"] == rep["source_after"] - rep["source_before"]


def test_diagnose_size_guard_exit_code(ckpt, monkeypatch, capsys):
    monkeypatch.setattr(cli.dg, "MAX_JACOBIAN_DIM", 4)
    assert run("diagnose", "--checkpoint", ckpt, "--which", "jacobian", "--out", ckpt / "d") == 3
    assert "too large for dense diagnostic" in capsys.readouterr().err


def test_diagnose_missing_checkpoint(tmp_path):
    assert run("diagnose", "--checkpoint", tmp_path, "--which", "ppl") == 1


# --- filterlab --------------------------------------------------------------


def test_filterlab_default_grid(toy, tmp_path, capsys):
    assert run("filterlab", "--config", toy, "--out", tmp_path / "f") == 0
    rows = list(csv.DictReader((tmp_path / "f/sweep.csv").open()))
    assert len(rows) == 7
    assert rows[0]["rho_vanilla"] == "0.0" and rows[0]["rho_mom"] == "0.0"
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") > 10


def test_presets_load_and_match_recipes():
    assert config.presets() == ["full-owt", "full-owt-wsd", "full-tinystories", "toy"]
    toy = config.load("preset:toy")
    assert toy == config.from_dict({"variants": toy.variants})
    owt = config.load("preset:full-owt")
    assert (owt.model.layers, owt.model.heads, owt.model.d_model, owt.model.context) == (12, 12, 768, 1024)
    assert owt.optim.muon_lr == 0.004 and owt.schedule.warmup == 3000 and owt.train.batch_size == 480
    ts = config.load("preset:full-tinystories")
    assert ts.optim.muon_lr == 0.02 and ts.schedule.total == 10000
    wsd = config.load("preset:full-owt-wsd")
    assert wsd.schedule.kind == "wsd" and wsd.schedule.decay_start == 25000


def test_unknown_preset():
    with pytest.raises(ConfigError, match="available"):
        config.load("preset:nope")
