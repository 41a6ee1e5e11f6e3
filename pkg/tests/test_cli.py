import json

import numpy as np
import pytest

from snag import cli
from snag.artifacts import (CheckpointError, format_cell, load_checkpoint, read_manifest,
                            save_checkpoint)
from snag.config import ConfigError, RunConfig, load_config, parse_config

SMALL = """
# tiny instance so every command finishes in about a second
run.task = ea
synth.num_entities = 40
synth.num_triples = 200
kgc.dim = 8
kgc.epochs = 3
kgc.batch_size = 64
ea.dim = 8
ea.epochs = 6
ea.iterative_epochs = 10
ea.d_r = 16
ea.d_a = 16
ablate.seeds = 1
ablate.groups = gmnm
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


# config


def test_defaults_match_stated_hyperparameters():
    cfg = RunConfig()
    kgc, ea = cfg.kgc_config(), cfg.ea_config()
    assert (kgc.dim, kgc.batch_size, kgc.lr, kgc.heads) == (256, 1024, 1e-4, 2)
    assert (ea.dim, ea.batch_size, ea.heads, ea.betas) == (300, 3500, 1, (0.9, 0.999))
    assert (ea.epochs, ea.iterative_epochs, ea.probe_every, ea.promote_after) == (500, 500, 5, 10)
    assert ea.warmup_frac == 0.15
    assert (cfg["gmnm.rho"], cfg["gmnm.epsilon"]) == (0.2, 0.7)
    assert kgc.noise.modalities == ("v", "s")
    assert ea.noise.modalities == ("g", "r", "a", "v", "s")


def test_parse_types_and_comments():
    cfg = parse_config("kgc.dim = 32  # smaller\nea.losses = gmi, iir\nea.normalize = false\n"
                       "eval.pool = full\nfusion.heads = 4\n")
    assert cfg["kgc.dim"] == 32
    assert cfg.ea_config().losses == ("gmi", "iir")
    assert cfg.ea_config().normalize is False
    assert cfg["eval.pool"] == "full"
    assert cfg.kgc_config().heads == 4 and cfg.ea_config().heads == 4


def test_echo_round_trips():
    cfg = parse_config("kgc.lr = 0.003\ngmnm.modalities = v\nablate.dropout_rates = 0.25\n")
    again = parse_config(cfg.echo())
    assert again.values == cfg.values
    assert again.echo() == cfg.echo()


def test_unknown_key_names_key_and_line():
    with pytest.raises(ConfigError, match=r"cfg:2: unknown config key 'kgc.dimm'"):
        parse_config("kgc.dim = 8\nkgc.dimm = 3\n", "cfg")


def test_missing_required_key_is_named():
    with pytest.raises(ConfigError, match="data.dir"):
        parse_config("data.source = files\n")


@pytest.mark.parametrize("text", ["kgc.dim = eight", "kgc.dim = 7", "gmnm.rho = 1.5",
                                  "eval.split = dev", "ea.normalize = maybe", "no equals sign"])
def test_invalid_values_rejected_before_compute(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_seed_env_override(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("run.seed = 3\n")
    assert load_config(path, env={}).seed == 3
    assert load_config(path, env={"SNAG_SEED": "11"}).seed == 11
    with pytest.raises(ConfigError):
        load_config(path, env={"SNAG_SEED": "x"})


# artifacts


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.w": rng.normal(size=(3, 4)), "b": rng.normal(size=(5,)), "c": np.array(2.5)}
    save_checkpoint(tmp_path / "m.ckpt", tensors, "run.seed = 0\n", "kgc")
    task, echo, back = load_checkpoint(tmp_path / "m.ckpt")
    assert task == "kgc" and echo == "run.seed = 0\n"
    assert set(back) == set(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])


def test_checkpoint_is_little_endian_float64(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", {"x": np.array([1.0, -2.0])}, "", "ea")
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw.startswith(b"SNAGCKPT")
    assert raw.endswith(np.array([1.0, -2.0], dtype="<f8").tobytes())


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad")
    save_checkpoint(tmp_path / "m.ckpt", {"x": np.ones(4)}, "", "ea")
    (tmp_path / "cut").write_bytes((tmp_path / "m.ckpt").read_bytes()[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "cut")


def test_float_cells_round_trip():
    for x in (0.1, 1 / 3, 1e-17, 12345.678):
        assert float(format_cell(x)) == x
    assert format_cell(float("nan")) == "nan"


# commands


def test_gen_train_eval_round_trip(tmp_path, small_cfg):
    assert run("gen", "--config", small_cfg, "--out", tmp_path / "g") == 0
    data_dir = tmp_path / "g" / "data"
    for name in ("kg1/train.tsv", "kg2/v.mmft", "alignment/seed.tsv", "alignment/test.tsv"):
        assert (data_dir / name).exists()
    files_cfg = tmp_path / "files.cfg"
    files_cfg.write_text(SMALL + f"data.source = files\ndata.dir = {data_dir}\n")
    assert run("train-ea", "--config", files_cfg, "--out", tmp_path / "t") == 0
    for name in ("model.ckpt", "trace.csv", "metrics.csv", "promoted.tsv", "manifest.json"):
        assert (tmp_path / "t" / name).exists()
    assert run("eval-ea", "--checkpoint", tmp_path / "t" / "model.ckpt", "--out", tmp_path / "e") == 0
    assert (tmp_path / "e" / "metrics.csv").read_text() == (tmp_path / "t" / "metrics.csv").read_text()


def test_file_data_matches_in_memory_synthetic(tmp_path, small_cfg):
    run("gen", "--config", small_cfg, "--out", tmp_path / "g")
    cfg = load_config(small_cfg, env={})
    mem = cli.load_data(cfg)
    disk = cli.read_dataset(tmp_path / "g" / "data")
    assert disk.kg1.entities == mem.kg1.entities
    np.testing.assert_array_equal(disk.kg2.train, mem.kg2.train)
    np.testing.assert_array_equal(disk.alignment.pairs, mem.alignment.pairs)
    assert disk.alignment.num_seed == mem.alignment.num_seed
    np.testing.assert_allclose(disk.features1["v"].matrix, mem.features1["v"].matrix, atol=1e-6)
    np.testing.assert_array_equal(disk.features2["v"].present, mem.features2["v"].present)


def test_kgc_train_then_eval(tmp_path, small_cfg):
    assert run("train-kgc", "--config", small_cfg, "--out", tmp_path / "k") == 0
    header = (tmp_path / "k" / "trace.csv").read_text().splitlines()[0]
    assert header == "epoch,loss,valid_mrr"
    assert run("eval-kgc", "--checkpoint", tmp_path / "k" / "model.ckpt", "--out", tmp_path / "e") == 0
    assert (tmp_path / "e" / "metrics.csv").read_text() == (tmp_path / "k" / "metrics.csv").read_text()


def test_wrong_checkpoint_task_fails(tmp_path, small_cfg):
    run("train-kgc", "--config", small_cfg, "--out", tmp_path / "k")
    assert run("eval-ea", "--checkpoint", tmp_path / "k" / "model.ckpt", "--out", tmp_path / "e") == 1


def test_manifest_contents(tmp_path, small_cfg, monkeypatch):
    monkeypatch.setenv("SNAG_SEED", "4")
    run("train-ea", "--iterative", "--config", small_cfg, "--out", tmp_path / "t")
    manifest = read_manifest(tmp_path / "t" / "manifest.json")
    assert manifest["command"] == "train-ea"
    assert manifest["seed"] == 4 and manifest["iterative"] is True
    assert parse_config(manifest["config"]).seed == 4
    assert json.loads((tmp_path / "t" / "manifest.json").read_text())["version"]


def test_rerun_reproduces_metrics_bytes(tmp_path, small_cfg):
    run("train-ea", "--iterative", "--config", small_cfg, "--out", tmp_path / "a")
    assert run("rerun", tmp_path / "a" / "manifest.json", "--out", tmp_path / "b") == 0
    for name in ("metrics.csv", "trace.csv", "promoted.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_rerun_ignores_seed_env(tmp_path, small_cfg, monkeypatch):
    run("train-kgc", "--config", small_cfg, "--out", tmp_path / "a")
    monkeypatch.setenv("SNAG_SEED", "99")
    run("rerun", tmp_path / "a" / "manifest.json", "--out", tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_failures_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("ea.tua = 0.1\n")
    assert run("train-ea", "--config", bad, "--out", tmp_path / "o") == 2
    assert "ea.tua" in capsys.readouterr().err
    assert run("train-ea", "--config", tmp_path / "missing.cfg", "--out", tmp_path / "o") == 1
    empty = tmp_path / "empty"
    empty.mkdir()
    files = tmp_path / "files.cfg"
    files.write_text(f"data.source = files\ndata.dir = {empty}\n")
    assert run("train-kgc", "--config", files, "--out", tmp_path / "o") == 1
    with pytest.raises(SystemExit) as exc:
        run("no-such-command")
    assert exc.value.code != 0


def test_ablation_grid_rows():
    cfg = RunConfig({"run.task": "kgc"})
    rows = cli.ablation_grid(cfg)
    labels = [r.label for r in rows]
    pairs = {(r.cfg["gmnm.rho"], r.cfg["gmnm.epsilon"]) for r in rows if r.cfg["gmnm.mode"] == "gmnm"}
    assert pairs == set(cli.NOISE_GRID)
    assert {"FC", "WS", "AT", "TS", "only_g", "gmnm_off"} <= set(labels)
    assert [r.cfg["gmnm.dropout"] for r in rows if r.group == "dropout"] == [0.1, 0.2, 0.3, 0.4]
    assert all(r.cfg["gmnm.mode"] == "dropout" for r in rows if r.group == "dropout")
    assert len(labels) == len(set(labels))
    # alignment has no fusion-variant rows
    assert not [r for r in cli.ablation_grid(cfg.replace(run__task="ea")) if r.group == "fusion"]


def test_ablate_writes_comparison_table(tmp_path, small_cfg, capsys):
    assert run("ablate", "--config", small_cfg, "--out", tmp_path / "a") == 0
    lines = (tmp_path / "a" / "ablation.csv").read_text().splitlines()
    assert lines[0] == "variant,group,seeds,mrr,hits@1,hits@10"
    assert len(lines) == 1 + 1 + 1 + len(cli.NOISE_GRID) - 1
    assert "rho=0.7,eps=0.2" in capsys.readouterr().out
