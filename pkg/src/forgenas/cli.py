"""Command-line surface: search, cross-search, train, eval, export, cam,
and synth-gen subcommands.

Configuration is a flat INI file with sections [search], [registry],
[train], [data]; every key has a sensible default so a search runs with
only a data source. Any key can be overridden with an environment
variable FORGENAS_<SECTION>_<KEY>. Each run appends one manifest record
under the output directory.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import c2pn
from .cdc import DEFAULT_OP_NAMES
from .data import (DOMAINS, Dataset, SplitSpec, assign_splits,
                   generate_synthetic, load_directory)
from .estimator import Genotype
from .metrics import curves_to_csv, read_report, write_report
from .search import SearchConfig, cross_dataset_search, search

ENV_PREFIX = "FORGENAS"

DEFAULTS = {
    "search": {
        "epochs": "65", "warmup_epochs": "10", "prune_period": "20",
        "batch_size": "96", "init_channels": "16",
        "init_sample_rate": "0.125", "rate_update": "double_sampled",
        "num_groups": "2", "lam": "0.15", "weight_lr": "1e-3",
        "weight_decay": "3e-4", "arch_lr": "6e-4",
        "arch_weight_decay": "1e-3", "probe_interval": "1",
        "probe_batch": "32", "inner_lr": "0.01",
        "samples_per_domain": "2000", "seed": "0", "dtype": "float32",
    },
    "registry": {"ops": ""},
    "train": {
        "epochs": "150", "batch_size": "48", "input_size": "64",
        "lr": "0.025", "momentum": "0.9", "weight_decay": "3e-4",
        "cosine_decay": "true", "hflip": "true", "seed": "0",
        "dtype": "float32",
        "init_channels": "16", "num_groups": "4", "pyramid": "true",
    },
    "data": {
        "resize": "32", "synth_n": "2000", "synth_size": "32",
        "synth_strength": "1.0", "synth_seed": "0",
    },
}

# desk preset: shrink everything so a run finishes in minutes on a CPU
DESK_PRESET = {
    "search": {"epochs": "25", "warmup_epochs": "5", "prune_period": "10",
               "batch_size": "64", "init_channels": "8", "num_groups": "1",
               "probe_interval": "5", "probe_batch": "8",
               "samples_per_domain": "256"},
    "train": {"epochs": "20", "batch_size": "48", "input_size": "16",
              "init_channels": "8", "num_groups": "1"},
    "data": {"resize": "16", "synth_n": "600", "synth_size": "16"},
}


def load_config(path=None, preset=None) -> dict:
    cfg = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    if preset == "desk":
        for sec, vals in DESK_PRESET.items():
            cfg[sec].update(vals)
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise FileNotFoundError(f"config file not found: {path}")
        for sec in parser.sections():
            if sec not in cfg:
                raise ValueError(f"unknown config section [{sec}]")
            for key, value in parser.items(sec):
                if key not in cfg[sec]:
                    raise ValueError(f"unknown config key {key!r} in "
                                     f"section [{sec}]")
                cfg[sec][key] = value
    for sec, vals in cfg.items():
        for key in vals:
            env_key = f"{ENV_PREFIX}_{sec.upper()}_{key.upper()}"
            if env_key in os.environ:
                cfg[sec][key] = os.environ[env_key]
    return cfg


def _as_bool(s: str) -> bool:
    return s.strip().lower() in ("1", "true", "yes", "on")


def search_config_from(cfg: dict, seed=None) -> SearchConfig:
    s = cfg["search"]
    ops = [o.strip() for o in cfg["registry"]["ops"].split(",") if o.strip()]
    return SearchConfig(
        epochs=int(s["epochs"]), warmup_epochs=int(s["warmup_epochs"]),
        prune_period=int(s["prune_period"]), batch_size=int(s["batch_size"]),
        init_channels=int(s["init_channels"]),
        init_sample_rate=float(s["init_sample_rate"]),
        rate_update=s["rate_update"], num_groups=int(s["num_groups"]),
        lam=float(s["lam"]), weight_lr=float(s["weight_lr"]),
        weight_decay=float(s["weight_decay"]), arch_lr=float(s["arch_lr"]),
        arch_weight_decay=float(s["arch_weight_decay"]),
        probe_interval=int(s["probe_interval"]),
        probe_batch=int(s["probe_batch"]), inner_lr=float(s["inner_lr"]),
        samples_per_domain=int(s["samples_per_domain"]),
        registry_names=tuple(ops) if ops else None,
        seed=int(s["seed"]) if seed is None else int(seed),
        dtype=s["dtype"],
    )


def train_config_from(cfg: dict, seed=None) -> c2pn.TrainConfig:
    t = cfg["train"]
    return c2pn.TrainConfig(
        epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
        input_size=int(t["input_size"]), lr=float(t["lr"]),
        momentum=float(t["momentum"]),
        weight_decay=float(t["weight_decay"]),
        cosine_decay=_as_bool(t["cosine_decay"]), hflip=_as_bool(t["hflip"]),
        seed=int(t["seed"]) if seed is None else int(seed),
        dtype=t["dtype"],
    )


def _resolve_dataset(args, cfg: dict, size: int, split_mode: str,
                     seed: int) -> Dataset:
    d = cfg["data"]
    if getattr(args, "data", None):
        ds = load_directory(args.data, SplitSpec(mode=split_mode),
                            resize=size, seed=seed)
    elif getattr(args, "synthetic", None):
        ds = generate_synthetic(seed=int(d["synth_seed"]),
                                n=int(d["synth_n"]), domain=args.synthetic,
                                size=size, strength=float(d["synth_strength"]))
        assign_splits(ds, SplitSpec(mode=split_mode), seed)
    else:
        raise SystemExit("one of --data or --synthetic is required")
    return ds


def _write_manifest(out: Path, command: str, cfg: dict, seeds: dict,
                    fingerprints: dict, artifacts: list,
                    started: float) -> None:
    record = {
        "command": command,
        "config": cfg,
        "seeds": seeds,
        "input_fingerprints": fingerprints,
        "artifacts": [str(a) for a in artifacts],
        "wall_clock_s": round(time.time() - started, 3),
    }
    with open(out / "manifest.jsonl", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dry_run(cfg: dict) -> int:
    print(json.dumps(cfg, indent=2, sort_keys=True))
    return 0


def cmd_search(args) -> int:
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg["search"]["seed"] = str(args.seed)
    if args.dry_run:
        return _dry_run(cfg)
    started = time.time()
    out = _prepare_out(args)
    sconf = search_config_from(cfg)
    size = int(cfg["data"]["resize"])
    ds = _resolve_dataset(args, cfg, size, "even_half", sconf.seed)
    result = search(sconf, ds, event_log_path=out / "search_events.jsonl",
                    checkpoint_path=out / "search_checkpoint.pkl")
    geno_path = out / "genotype.json"
    geno_path.write_text(result.genotype.to_json())
    Genotype.from_json(geno_path.read_text())  # validate the written artifact
    _write_manifest(out, "search", cfg, {"search": sconf.seed},
                    {"dataset": ds.fingerprint()},
                    [geno_path, out / "search_events.jsonl"], started)
    print(f"genotype written to {geno_path}")
    return 0


def cmd_cross_search(args) -> int:
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg["search"]["seed"] = str(args.seed)
    domains = [d.strip() for d in args.domains.split(",") if d.strip()]
    if len(domains) < 2:
        raise SystemExit("cross-search needs at least 2 domains")
    if args.dry_run:
        return _dry_run(cfg)
    started = time.time()
    out = _prepare_out(args)
    sconf = search_config_from(cfg)
    d = cfg["data"]
    size = int(d["resize"])
    datasets = [generate_synthetic(seed=int(d["synth_seed"]),
                                   n=int(d["synth_n"]), domain=dom,
                                   size=size,
                                   strength=float(d["synth_strength"]))
                for dom in domains]
    result = cross_dataset_search(sconf, datasets,
                                  event_log_path=out / "search_events.jsonl")
    geno_path = out / "genotype.json"
    geno_path.write_text(result.genotype.to_json())
    _write_manifest(out, "cross-search", cfg, {"search": sconf.seed},
                    {f"dataset_{ds.domain}": ds.fingerprint()
                     for ds in datasets},
                    [geno_path, out / "search_events.jsonl"], started)
    print(f"genotype written to {geno_path}")
    return 0


def _load_genotype(path) -> Genotype:
    p = Path(path)
    if not p.is_file():
        raise SystemExit(f"genotype file not found: {p}")
    return Genotype.from_json(p.read_text())


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg["train"]["seed"] = str(args.seed)
    if args.dry_run:
        return _dry_run(cfg)
    started = time.time()
    out = _prepare_out(args)
    genotype = _load_genotype(args.genotype)
    tconf = train_config_from(cfg)
    ds = _resolve_dataset(args, cfg, tconf.input_size, "8:1:1", tconf.seed)
    net = c2pn.build(genotype, init_channels=int(cfg["train"]["init_channels"]),
                     num_groups=int(cfg["train"]["num_groups"]),
                     pyramid=_as_bool(cfg["train"]["pyramid"]),
                     seed=tconf.seed)
    curves = c2pn.train(net, ds, tconf)
    weights_path = out / "weights.pkl"
    c2pn.save_weights(net, weights_path)
    report = c2pn.evaluate(net, ds, split="val",
                           config_fingerprint=_cfg_fingerprint(cfg),
                           seed=tconf.seed)
    report.curves = curves
    report_path = out / "train_report.json"
    write_report(report, report_path)
    _write_manifest(out, "train", cfg, {"train": tconf.seed},
                    {"dataset": ds.fingerprint(),
                     "genotype": _sha256(Path(args.genotype))},
                    [weights_path, report_path], started)
    print(f"weights written to {weights_path}")
    return 0


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _cfg_fingerprint(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _load_trained(args, cfg) -> c2pn.DetectionNet:
    genotype = _load_genotype(args.genotype)
    weights = Path(args.weights)
    if not weights.is_file():
        raise SystemExit(f"weights file not found: {weights}")
    net = c2pn.build(genotype,
                     init_channels=int(cfg["train"]["init_channels"]),
                     num_groups=int(cfg["train"]["num_groups"]),
                     pyramid=_as_bool(cfg["train"]["pyramid"]),
                     seed=int(cfg["train"]["seed"]))
    c2pn.load_weights(net, weights)
    return net


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.preset)
    if args.dry_run:
        return _dry_run(cfg)
    started = time.time()
    out = _prepare_out(args)
    tconf = train_config_from(cfg)
    ds = _resolve_dataset(args, cfg, tconf.input_size, "8:1:1", tconf.seed)
    net = _load_trained(args, cfg)
    report = c2pn.evaluate(net, ds, split=args.split,
                           config_fingerprint=_cfg_fingerprint(cfg),
                           seed=tconf.seed)
    report_path = out / "report.json"
    write_report(report, report_path)
    _write_manifest(out, "eval", cfg, {"train": tconf.seed},
                    {"dataset": ds.fingerprint()}, [report_path], started)
    print(f"Acc {report.acc:.4f}  AUC {report.auc:.4f}")
    return 0


def cmd_cam(args) -> int:
    cfg = load_config(args.config, args.preset)
    if args.dry_run:
        return _dry_run(cfg)
    started = time.time()
    out = _prepare_out(args)
    tconf = train_config_from(cfg)
    ds = _resolve_dataset(args, cfg, tconf.input_size, "8:1:1", tconf.seed)
    net = _load_trained(args, cfg)
    test_idx = ds.splits["test"]
    fake_idx = [i for i in test_idx if ds.labels[i] == 1][:args.limit]
    paths = []
    for i in fake_idx:
        cam, _ = c2pn.activation_map(net, ds.images[i])
        path = out / f"cam_{i:05d}.pgm"
        c2pn.write_pgm(path, cam)
        paths.append(path)
    _write_manifest(out, "cam", cfg, {"train": tconf.seed},
                    {"dataset": ds.fingerprint()}, paths, started)
    print(f"wrote {len(paths)} heatmaps to {out}")
    return 0


def cmd_export(args) -> int:
    started = time.time()
    out = _prepare_out(args)
    report = read_report(args.report)
    csv_path = out / "curves.csv"
    curves_to_csv(report, csv_path)
    _write_manifest(out, "export", {}, {},
                    {"report": _sha256(Path(args.report))}, [csv_path],
                    started)
    print(f"curves written to {csv_path}")
    return 0


def cmd_synth_gen(args) -> int:
    started = time.time()
    out = _prepare_out(args)
    ds = generate_synthetic(seed=args.seed, n=args.n, domain=args.domain,
                            size=args.size)
    for sub in ("real", "fake"):
        (out / sub).mkdir(exist_ok=True)
    paths = []
    for i in range(len(ds)):
        sub = "fake" if ds.labels[i] == 1 else "real"
        path = out / sub / f"{i:06d}.ppm"
        _write_ppm(path, ds.images[i])
        paths.append(path)
    _write_manifest(out, "synth-gen", {}, {"seed": args.seed},
                    {"dataset": ds.fingerprint()}, paths[:4], started)
    print(f"wrote {len(paths)} images under {out}")
    return 0


def _write_ppm(path, image: np.ndarray) -> None:
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    c, h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.transpose(1, 2, 0).tobytes())


def _add_common(p, data_source=True):
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--preset", choices=["desk"], default=None)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1,
                   help="worker cap (single-threaded execution uses 1)")
    p.add_argument("--dry-run", action="store_true",
                   help="print the resolved config and exit")
    if data_source:
        p.add_argument("--data", default=None,
                       help="directory with real/ and fake/ subdirectories")
        p.add_argument("--synthetic", choices=DOMAINS, default=None,
                       help="use a generated synthetic dataset")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forgenas",
        description="Architecture search and training for face forgery "
                    "detection with central-difference convolutions.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="in-dataset architecture search")
    _add_common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("cross-search", help="cross-dataset search over "
                                            "synthetic domains")
    _add_common(p, data_source=False)
    p.add_argument("--domains", required=True,
                   help="comma-separated list of >= 2 synthetic domains")
    p.set_defaults(func=cmd_cross_search)

    p = sub.add_parser("train", help="train the detection network")
    _add_common(p)
    p.add_argument("--genotype", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained network")
    _add_common(p)
    p.add_argument("--genotype", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cam", help="write class-activation heatmaps")
    _add_common(p)
    p.add_argument("--genotype", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--limit", type=int, default=16)
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("export", help="export report curves as CSV")
    p.add_argument("--report", required=True)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("synth-gen", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--domain", choices=DOMAINS, required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_synth_gen)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except (ValueError, FileNotFoundError, RuntimeError,
            FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
