"""Command-line entry point and experiment orchestration.

Configuration is an INI document with sections [run], [dataset], [search],
[derive], [eval]; every key has a default, unknown keys are rejected, and the
resolved configuration is echoed into the run directory so a run can be
reproduced from that file alone. Every CLI flag mirrors a config key
(``--search.space S6``).

Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as datamod
from .errors import ConfigError, DivergenceError, LoadError, ParseError
from .genotype import (allocate_channels, darts_s_allocation, derive_genotype,
                       deserialize_allocation, deserialize_genotype, export_dot,
                       full_width_allocation, serialize_allocation,
                       serialize_genotype, ChannelAllocation)
from .search import SearchConfig, run_search
from .spaces import build_topology, get_space, network_layout
from .supernet import ArchParams, SuperNet
from .targetnet import (TrainConfig, build_target, count_params_flops,
                        held_out_metrics, train_target)

RUN_ROOT_ENV = "CHANSEARCH_RUNS"

DEFAULTS = {
    "run": {"seed": 0, "dir": ""},
    "dataset": {"kind": "synthetic", "samples": 600, "classes": 3, "size": 16,
                "channels": 1, "noise": 0.08, "images": "", "labels": ""},
    "search": {"space": "S6", "n": 1, "b": 4, "c_init": 8, "epochs": 10,
               "batch_size": 32, "w_lr": 0.05, "w_momentum": 0.9,
               "w_weight_decay": 3e-4, "alpha_lr": 3e-4,
               "alpha_weight_decay": 1e-3, "split": 0.5, "sepconv_repeats": 1},
    "derive": {"mode": "aca", "fixed_channels": 8},
    "eval": {"n": 1, "c_init": 16, "epochs": 30, "batch_size": 32, "lr": 0.05,
             "momentum": 0.9, "weight_decay": 3e-4, "split": 0.8,
             "ablation": "full"},
}


def _coerce(section, key, raw):
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {section}.{key}") from None


def load_config(path=None, overrides=()):
    """Resolve defaults <- file <- overrides; unknown keys are rejected."""
    cfg = {s: dict(kv) for s, kv in DEFAULTS.items()}
    if path:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            if section not in cfg:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in cfg[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                cfg[section][key] = _coerce(section, key, raw)
    for dotted, raw in overrides:
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must be section.key")
        section, key = dotted.split(".", 1)
        if section not in cfg or key not in cfg[section]:
            raise ConfigError(f"unknown config key {dotted}")
        cfg[section][key] = _coerce(section, key, raw)
    return cfg


def dump_config(cfg):
    lines = []
    for section in DEFAULTS:
        lines.append(f"[{section}]")
        for key in DEFAULTS[section]:
            lines.append(f"{key} = {cfg[section][key]}")
        lines.append("")
    return "\n".join(lines)


def stage_seeds(seed):
    """Split the top-level seed into per-stage integer seeds."""
    children = np.random.SeedSequence(seed).spawn(3)
    data_s, search_s, eval_s = (int(c.generate_state(1)[0]) for c in children)
    return {"data": data_s, "search": search_s, "eval": eval_s}


def run_dir(cfg, create=True):
    d = cfg["run"]["dir"]
    if not d:
        root = os.environ.get(RUN_ROOT_ENV, "runs")
        d = os.path.join(root, f"run-seed{cfg['run']['seed']}")
    path = Path(d)
    if create:
        path.mkdir(parents=True, exist_ok=True)
    return path


def build_dataset(cfg):
    ds_cfg = cfg["dataset"]
    if ds_cfg["kind"] == "synthetic":
        return datamod.generate_synthetic(
            stage_seeds(cfg["run"]["seed"])["data"], ds_cfg["samples"],
            ds_cfg["classes"], ds_cfg["size"], channels=ds_cfg["channels"],
            noise=ds_cfg["noise"])
    if ds_cfg["kind"] == "raw":
        if not ds_cfg["images"] or not ds_cfg["labels"]:
            raise ConfigError("raw dataset needs dataset.images and dataset.labels paths")
        return datamod.load_raw(ds_cfg["images"], ds_cfg["labels"])
    raise ConfigError(f"unknown dataset kind {ds_cfg['kind']!r}")


def search_config(cfg):
    s = cfg["search"]
    return SearchConfig(
        epochs=s["epochs"], batch_size=s["batch_size"], w_lr=s["w_lr"],
        w_momentum=s["w_momentum"], w_weight_decay=s["w_weight_decay"],
        alpha_lr=s["alpha_lr"], alpha_weight_decay=s["alpha_weight_decay"],
        seed=stage_seeds(cfg["run"]["seed"])["search"],
        split_fraction=s["split"], n=s["n"], num_intermediate=s["b"],
        init_channels=s["c_init"], sepconv_repeats=s["sepconv_repeats"])


def reference_allocation(geno, mode, c_init, fixed):
    """Allocation at the first-instance width of each cell type
    (normal at c_init, reduce at 2*c_init)."""
    def compute(c):
        if mode == "aca":
            return allocate_channels(geno, c)
        if mode == "darts_s":
            return darts_s_allocation(geno, c, fixed=fixed)
        if mode == "darts_baseline":
            return full_width_allocation(geno, c)
        raise ConfigError(f"unknown derive mode {mode!r}")
    normal = [a for a in compute(c_init).entries if a.cell_type == "normal"]
    reduce_ = [a for a in compute(2 * c_init).entries if a.cell_type == "reduce"]
    return ChannelAllocation(mode, fixed if mode == "darts_s" else 0,
                             tuple(normal) + tuple(reduce_))


def _derive_from_arch(arch, cfg):
    mode = cfg["derive"]["mode"]
    space = get_space(cfg["search"]["space"])
    topology = build_topology(cfg["search"]["b"])
    geno = derive_genotype(arch, space, topology,
                           exclude_skip=(mode != "darts_baseline"))
    alloc = reference_allocation(geno, mode, cfg["eval"]["c_init"],
                                 cfg["derive"]["fixed_channels"])
    return geno, alloc


def cmd_gen_data(cfg):
    ds = build_dataset(cfg)
    images = cfg["dataset"]["images"] or "images.bin"
    labels = cfg["dataset"]["labels"] or "labels.bin"
    datamod.save_raw(ds, images, labels)
    print(f"wrote {images} and {labels}: {len(ds)} samples, "
          f"{ds.class_count} classes, shape {ds.image_shape}")
    return 0


def cmd_search(cfg, clock=time.perf_counter):
    out = run_dir(cfg)
    dataset = build_dataset(cfg)
    arch, trace, net = run_search(dataset, cfg["search"]["space"],
                                  search_config(cfg), clock=clock)
    ckpt.save_checkpoint(out / "checkpoint.bin", net.named_arrays())
    (out / "search.csv").write_text(trace.to_csv())
    (out / "config.ini").write_text(dump_config(cfg))
    geno, _ = _derive_from_arch(arch, cfg)
    (out / "genotype.txt").write_text(serialize_genotype(geno))
    last = trace.records[-1]
    print(f"search done: {len(trace.records)} epochs, final val_acc "
          f"{last.val_acc:.4f}, skip_fraction {last.skip_fraction:.4f}")
    print(f"artifacts in {out}")
    return 0


def cmd_derive(cfg):
    out = run_dir(cfg)
    arrays = ckpt.load_checkpoint(out / "checkpoint.bin")
    space = get_space(cfg["search"]["space"])
    topology = build_topology(cfg["search"]["b"])
    for name in ("arch.normal", "arch.reduce"):
        if name not in arrays:
            raise ConfigError(f"checkpoint has no tensor {name!r}")
        if arrays[name].shape != (topology.num_edges, space.size):
            raise ConfigError(
                f"checkpoint arch shape {arrays[name].shape} does not match "
                f"space {space.id} with B={cfg['search']['b']}")
    arch = ArchParams(topology, space, normal=arrays["arch.normal"],
                      reduce=arrays["arch.reduce"])
    geno, alloc = _derive_from_arch(arch, cfg)
    (out / "genotype.txt").write_text(serialize_genotype(geno))
    (out / "allocation.txt").write_text(serialize_allocation(alloc, geno))
    print(f"derived genotype ({cfg['derive']['mode']}) into {out}")
    return 0


def _eval_layout(cfg, num_classes):
    return network_layout(cfg["eval"]["n"], cfg["eval"]["c_init"], num_classes)


def train_config(cfg):
    e = cfg["eval"]
    return TrainConfig(epochs=e["epochs"], batch_size=e["batch_size"], lr=e["lr"],
                       momentum=e["momentum"], weight_decay=e["weight_decay"],
                       seed=stage_seeds(cfg["run"]["seed"])["eval"],
                       split_fraction=e["split"])


def cmd_train(cfg, clock=time.perf_counter):
    out = run_dir(cfg)
    geno_path = out / "genotype.txt"
    if not geno_path.exists():
        raise ConfigError(f"no genotype.txt in {out}; run search/derive first")
    geno = deserialize_genotype(geno_path.read_text())
    alloc_path = out / "allocation.txt"
    if alloc_path.exists():
        alloc = deserialize_allocation(alloc_path.read_text())
    else:
        alloc = reference_allocation(geno, cfg["derive"]["mode"],
                                     cfg["eval"]["c_init"],
                                     cfg["derive"]["fixed_channels"])
    dataset = build_dataset(cfg)
    layout = _eval_layout(cfg, dataset.class_count)
    rng = np.random.default_rng(np.random.SeedSequence(
        stage_seeds(cfg["run"]["seed"])["eval"]))
    net = build_target(geno, alloc, layout, ablation_mode=cfg["eval"]["ablation"],
                       in_channels=dataset.image_shape[0], rng=rng,
                       sepconv_repeats=cfg["search"]["sepconv_repeats"])
    trace, _stats = train_target(net, dataset, train_config(cfg), clock=clock)
    ckpt.save_checkpoint(out / "target_checkpoint.bin", net.named_arrays())
    (out / "eval.csv").write_text(trace.to_csv())
    params, macs = count_params_flops(net, dataset.image_shape[1:])
    last = trace.records[-1]
    metrics = (f"val_accuracy {last.val_acc:.6f}\n"
               f"val_loss {last.val_loss:.6f}\n"
               f"params {params}\n"
               f"macs {macs}\n")
    (out / "metrics.txt").write_text(metrics)
    print(metrics, end="")
    return 0


def cmd_eval(cfg):
    out = run_dir(cfg, create=False)
    geno = deserialize_genotype((out / "genotype.txt").read_text())
    alloc = deserialize_allocation((out / "allocation.txt").read_text()) \
        if (out / "allocation.txt").exists() else \
        reference_allocation(geno, cfg["derive"]["mode"], cfg["eval"]["c_init"],
                             cfg["derive"]["fixed_channels"])
    dataset = build_dataset(cfg)
    layout = _eval_layout(cfg, dataset.class_count)
    net = build_target(geno, alloc, layout, ablation_mode=cfg["eval"]["ablation"],
                       in_channels=dataset.image_shape[0],
                       rng=np.random.default_rng(0),
                       sepconv_repeats=cfg["search"]["sepconv_repeats"])
    net.load_arrays(ckpt.load_checkpoint(out / "target_checkpoint.bin"))
    acc, loss = held_out_metrics(net, dataset, train_config(cfg))
    print(f"val_accuracy {acc:.6f}")
    print(f"val_loss {loss:.6f}")
    return 0


def cmd_export_dot(cfg):
    out = run_dir(cfg)
    geno = deserialize_genotype((out / "genotype.txt").read_text())
    alloc_path = out / "allocation.txt"
    if alloc_path.exists():
        alloc = deserialize_allocation(alloc_path.read_text())
    else:
        alloc = reference_allocation(geno, cfg["derive"]["mode"],
                                     cfg["eval"]["c_init"],
                                     cfg["derive"]["fixed_channels"])
    graphs = export_dot(geno, alloc)
    for cell_type, text in graphs.items():
        (out / f"{cell_type}.dot").write_text(text)
    print(f"wrote {out / 'normal.dot'} and {out / 'reduce.dot'}")
    return 0


def cmd_pipeline(cfg, clock=time.perf_counter):
    cmd_search(cfg, clock=clock)
    cmd_derive(cfg)
    cmd_train(cfg, clock=clock)
    cmd_export_dot(cfg)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "search": cmd_search,
    "derive": cmd_derive,
    "train": cmd_train,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
    "export-dot": cmd_export_dot,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="chansearch",
        description="Differentiable architecture search with adaptive channel "
                    "allocation, at desk scale.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="INI config file")
    for section, keys in DEFAULTS.items():
        for key, default in keys.items():
            parser.add_argument(f"--{section}.{key}", dest=f"{section}.{key}",
                                default=None, metavar=str(default) or "''")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = [(dotted, raw) for dotted, raw in vars(args).items()
                 if "." in dotted and raw is not None]
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ParseError, LoadError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
