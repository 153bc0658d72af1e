"""Command-line interface: config resolution, commands, artifacts, exit codes."""

from __future__ import annotations

import numpy as np
import pytest

from chansearch import cli
from chansearch.data import load_raw
from chansearch.errors import ConfigError

FIXED_CLOCK = lambda: 0.0


def _tiny_cfg(tmp_path, seed=0, **extra):
    overrides = [
        ("run.seed", str(seed)), ("run.dir", str(tmp_path / f"run{seed}")),
        ("dataset.samples", "48"), ("dataset.size", "8"),
        ("search.epochs", "1"), ("search.batch_size", "16"),
        ("search.c_init", "4"), ("search.b", "2"),
        ("eval.epochs", "2"), ("eval.batch_size", "16"), ("eval.c_init", "4"),
    ]
    overrides += [(k, v) for k, v in extra.items()]
    return cli.load_config(None, overrides)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_defaults_cover_every_section():
    cfg = cli.load_config()
    assert cfg["search"]["space"] == "S6"
    assert cfg["search"]["epochs"] == 10
    assert cfg["eval"]["epochs"] == 30
    assert cfg["eval"]["c_init"] == 16
    assert cfg["derive"]["mode"] == "aca"


def test_config_file_and_overrides(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[search]\nspace = S7\nepochs = 3\n\n[run]\nseed = 9\n")
    cfg = cli.load_config(str(ini), [("search.epochs", "5")])
    assert cfg["search"]["space"] == "S7"
    assert cfg["search"]["epochs"] == 5  # override beats the file
    assert cfg["run"]["seed"] == 9


def test_config_rejects_unknown_and_malformed(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[search]\nwarp_speed = 9\n")
    with pytest.raises(ConfigError):
        cli.load_config(str(bad))
    bad.write_text("[engine]\nx = 1\n")
    with pytest.raises(ConfigError):
        cli.load_config(str(bad))
    with pytest.raises(ConfigError):
        cli.load_config(None, [("search.epochs", "three")])
    with pytest.raises(ConfigError):
        cli.load_config(None, [("noseparator", "1")])
    with pytest.raises(ConfigError):
        cli.load_config(str(tmp_path / "missing.ini"))


def test_dump_config_roundtrips(tmp_path):
    cfg = cli.load_config(None, [("search.space", "S7"), ("run.seed", "4")])
    ini = tmp_path / "echo.ini"
    ini.write_text(cli.dump_config(cfg))
    again = cli.load_config(str(ini))
    assert again == cfg


def test_stage_seeds_deterministic_and_distinct():
    a = cli.stage_seeds(0)
    b = cli.stage_seeds(0)
    c = cli.stage_seeds(1)
    assert a == b
    assert set(a) == {"data", "search", "eval"}
    assert len({a["data"], a["search"], a["eval"]}) == 3
    assert a != c


def test_run_dir_uses_env_root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUN_ROOT_ENV, str(tmp_path / "root"))
    cfg = cli.load_config(None, [("run.seed", "7")])
    d = cli.run_dir(cfg)
    assert d == tmp_path / "root" / "run-seed7"
    assert d.is_dir()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def test_gen_data_writes_loadable_raw_files(tmp_path):
    cfg = _tiny_cfg(tmp_path, **{
        "dataset.images": str(tmp_path / "img.bin"),
        "dataset.labels": str(tmp_path / "lab.bin")})
    assert cli.cmd_gen_data(cfg) == 0
    ds = load_raw(tmp_path / "img.bin", tmp_path / "lab.bin")
    assert len(ds) == 48
    assert ds.image_shape == (1, 8, 8)


def test_pipeline_produces_all_artifacts(tmp_path):
    cfg = _tiny_cfg(tmp_path)
    assert cli.cmd_pipeline(cfg, clock=FIXED_CLOCK) == 0
    out = cli.run_dir(cfg, create=False)
    for name in ("checkpoint.bin", "search.csv", "config.ini", "genotype.txt",
                 "allocation.txt", "eval.csv", "metrics.txt",
                 "target_checkpoint.bin", "normal.dot", "reduce.dot"):
        assert (out / name).exists(), name
    metrics = dict(line.split() for line in
                   (out / "metrics.txt").read_text().splitlines())
    assert 0.0 <= float(metrics["val_accuracy"]) <= 1.0
    assert int(metrics["params"]) > 0
    assert int(metrics["macs"]) > 0
    # eval command reproduces the recorded validation metrics
    assert cli.cmd_eval(cfg) == 0


def test_same_seed_gives_byte_identical_artifacts(tmp_path):
    cfg_a = _tiny_cfg(tmp_path / "a", seed=5)
    cfg_b = _tiny_cfg(tmp_path / "b", seed=5)
    cli.cmd_pipeline(cfg_a, clock=FIXED_CLOCK)
    cli.cmd_pipeline(cfg_b, clock=FIXED_CLOCK)
    out_a = cli.run_dir(cfg_a, create=False)
    out_b = cli.run_dir(cfg_b, create=False)
    for name in ("genotype.txt", "allocation.txt", "search.csv", "eval.csv",
                 "checkpoint.bin", "target_checkpoint.bin",
                 "normal.dot", "reduce.dot"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name


def test_different_seeds_change_the_search_trace(tmp_path):
    cfg_a = _tiny_cfg(tmp_path / "a", seed=1)
    cfg_b = _tiny_cfg(tmp_path / "b", seed=2)
    cli.cmd_search(cfg_a, clock=FIXED_CLOCK)
    cli.cmd_search(cfg_b, clock=FIXED_CLOCK)
    csv_a = (cli.run_dir(cfg_a, create=False) / "search.csv").read_text()
    csv_b = (cli.run_dir(cfg_b, create=False) / "search.csv").read_text()
    assert csv_a != csv_b


def test_derive_modes_shape_allocation(tmp_path):
    cfg = _tiny_cfg(tmp_path)
    cli.cmd_search(cfg, clock=FIXED_CLOCK)
    out = cli.run_dir(cfg, create=False)

    cli.cmd_derive(cfg)
    assert "mode aca" in (out / "allocation.txt").read_text()

    cfg["derive"]["mode"] = "darts_s"
    cli.cmd_derive(cfg)
    text = (out / "allocation.txt").read_text()
    assert "mode darts_s fixed=8" in text

    cfg["derive"]["mode"] = "darts_baseline"
    cli.cmd_derive(cfg)
    text = (out / "allocation.txt").read_text()
    assert "mode darts_baseline" in text
    assert all("skip=0" in l for l in text.splitlines() if l.startswith("node="))


# ---------------------------------------------------------------------------
# exit codes through main()
# ---------------------------------------------------------------------------

def test_main_exit_2_on_config_error(tmp_path, capsys):
    rc = cli.main(["search", "--search.space", "S99",
                   "--run.dir", str(tmp_path / "r")])
    assert rc == 2
    assert "configuration error" in capsys.readouterr().err


def test_main_exit_2_on_unknown_override(tmp_path):
    rc = cli.main(["search", "--config", str(tmp_path / "nope.ini")])
    assert rc == 2


def test_main_exit_4_on_io_failure(tmp_path, capsys):
    rc = cli.main(["derive", "--run.dir", str(tmp_path / "fresh")])
    assert rc == 4  # checkpoint.bin does not exist yet
    assert "i/o error" in capsys.readouterr().err


def test_main_runs_tiny_search(tmp_path):
    rc = cli.main(["search", "--run.dir", str(tmp_path / "r"),
                   "--dataset.samples", "48", "--dataset.size", "8",
                   "--search.epochs", "1", "--search.batch_size", "16",
                   "--search.c_init", "4", "--search.b", "2"])
    assert rc == 0
    assert (tmp_path / "r" / "genotype.txt").exists()
