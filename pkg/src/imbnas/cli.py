"""Command-line entry point.

Every stage of the pipeline is its own subcommand so that single stages can be
rerun for ablations; ``run`` chains them. Stages that need hyperparameters read
them from ``--config`` (strict TOML) and fall back to the built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import __version__
from .adaptation import PROCEDURES, adapt, retrain_over_seeds
from .checkpoint import CheckpointError, append_result, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .data import (
    DatasetFileError,
    class_bins,
    load_cifar_binary,
    load_dataset,
    longtail_profile,
    make_longtail,
    save_dataset,
    subsample,
)
from .losses import LossConfig
from .pipeline import procedure_for, rebuild_report, run_pipeline, run_transfer, search_arch
from .ranking import dissect_accuracy
from .space import ArchStringError, SearchSpaceSpec, build_pool, decode_arch, encode_arch
from .supernet import init_supernet
from .training import CostMeter, train_supernet


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg.validate()


# ------------------------------------------------------------------ commands


def cmd_dataset_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.cifar:
        if not args.cifar_val:
            raise SystemExit("--cifar needs --cifar-val for the validation split")
        profile = longtail_profile(args.per_class, args.classes, args.rho)
        if profile.warning:
            warnings.warn(profile.warning)
        pool = load_cifar_binary(args.cifar, num_classes=args.classes)
        val = load_cifar_binary(args.cifar_val, num_classes=args.classes)
        val.split = "val"
        train = pool if profile.rho == 1 else subsample(pool, profile, args.seed)
        train.meta["id"] = f"cifar-{args.rho:g}x"
        val.meta["id"] = f"cifar-{args.rho:g}x-val"
    else:
        train, val, profile = make_longtail(args.domain, args.per_class, args.classes, args.rho, args.image_size,
                                            args.seed, val_per_class=args.val_per_class, noise=args.noise)
    # file stems double as dataset ids, which end up in checkpoint provenance
    train_path, val_path = out / f"{train.dataset_id}.imbd", out / f"{val.dataset_id}.imbd"
    save_dataset(train, train_path)
    save_dataset(val, val_path)
    meta = {"counts": profile.counts, "requested_rho": args.rho, "achieved_rho": profile.rho,
            "mu": profile.mu, "num_classes": args.classes, "train": train_path.name, "val": val_path.name}
    (out / "profile.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(train)} images to {train_path} and {len(val)} to {val_path} "
          f"(achieved ratio {profile.rho:g})")
    return 0


def _spec_for(cfg: ExperimentConfig, data) -> SearchSpaceSpec:
    c, h, _ = data.image_shape
    d = cfg.space_spec(data.num_classes).to_dict()
    d["input_shape"] = [c, h, h]
    return SearchSpaceSpec.from_dict(d)


def cmd_supernet_train(args) -> int:
    cfg = _config(args)
    train = load_dataset(args.train, args.classes)
    val = load_dataset(args.val, train.num_classes, "val") if args.val else None
    spec = _spec_for(cfg, train)
    pool = build_pool(spec, cfg.space.pool, cfg.space.pool_size, cfg.seed)
    s = cfg.supernet
    epochs = args.epochs if args.epochs is not None else s.epochs
    drw = {"ce": None, "rw": 0, "drw": s.milestones[0] if s.milestones else epochs // 2}[args.loss]
    net = init_supernet(spec, cfg.seed)
    with CostMeter() as meter:
        train_supernet(net, train, val, LossConfig(beta=s.beta, drw_epoch=drw), s.schedule(), epochs,
                       cfg.seed, pool, s.batch_size, meter)
    save_checkpoint(net, args.out)
    print(json.dumps({"checkpoint": str(args.out), **meter.report.as_dict()}))
    return 0


def cmd_adapt(args) -> int:
    cfg = _config(args)
    source = load_checkpoint(args.source)
    train = load_dataset(args.train, args.classes)
    pool = build_pool(source.spec, cfg.space.pool, cfg.space.pool_size, cfg.seed)
    proc = procedure_for(cfg, args.procedure)
    net, cost = adapt(source, train, proc, cfg.seed, pool)
    if args.procedure != "P0":
        save_checkpoint(net, args.out)
    if args.results:
        append_result({
            "run_id": args.run_id or f"{args.procedure}-{train.dataset_id}-seed{cfg.seed}",
            "procedure": args.procedure,
            "source": source.provenance.get("backbone", "?"),
            "target": train.dataset_id,
            "imbalance": float(args.imbalance) if args.imbalance else _ratio(train),
            "seed": cfg.seed,
            **cost.as_dict(),
            "checkpoint_path": str(args.out if args.procedure != "P0" else args.source),
        }, args.results)
    print(json.dumps({"procedure": args.procedure, **cost.as_dict()}))
    return 0


def _ratio(data) -> float:
    counts = data.class_counts()
    counts = counts[counts > 0]
    return float(counts.max() / counts.min()) if len(counts) else 1.0


def cmd_search(args) -> int:
    cfg = _config(args)
    net = load_checkpoint(args.checkpoint)
    val = load_dataset(args.val, net.spec.num_classes, "val")
    calib = load_dataset(args.calib, net.spec.num_classes) if args.calib else None
    pool = build_pool(net.spec, cfg.space.pool, cfg.space.pool_size, cfg.seed)
    result = search_arch(net, pool, val, calib, cfg, Path(args.trace) if args.trace else None, args.method)
    for arch, fit in result.ranked[: args.top]:
        print(f"{fit:.4f}  {encode_arch(arch)}")
    return 0


def cmd_subnet_train(args) -> int:
    cfg = _config(args)
    arch = decode_arch(args.arch)
    train = load_dataset(args.train, args.classes)
    val = load_dataset(args.val, train.num_classes, "val")
    d = _spec_for(cfg, train).to_dict()
    d["num_nodes"] = arch.num_nodes
    spec = SearchSpaceSpec.from_dict(d)
    seeds = args.seeds if args.seeds else cfg.seeds
    res = retrain_over_seeds(arch, train, val, cfg.subnet.train_cfg(), seeds, spec)
    bins = class_bins(train.class_counts(), tuple(cfg.report.bins))
    dis = dissect_accuracy(res.per_class_correct, res.per_class_total, bins)
    print(json.dumps({"arch": encode_arch(arch), "accuracy": res.accuracy,
                      "accuracies": list(res.accuracies), "dissection": dis}))
    return 0


def cmd_analyze_transfer(args) -> int:
    cfg = _config(args)
    grid, (csv_path, svg_path) = run_transfer(cfg, args.out, args.seeds, args.workers)
    print(f"wrote {csv_path} and {svg_path}")
    return 0


def cmd_report(args) -> int:
    for p in rebuild_report(args.dir):
        print(p)
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    report = run_pipeline(cfg)
    print(report)
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imbnas", description="Supernet adaptation for imbalanced datasets.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, seed=True):
        if config:
            sp.add_argument("--config", help="experiment TOML (defaults are used when omitted)")
        if seed:
            sp.add_argument("--seed", type=int, help="override the config's global seed")
        return sp

    ds = sub.add_parser("dataset", help="dataset utilities").add_subparsers(dest="action", required=True)
    g = ds.add_parser("gen", help="render a long-tailed synthetic dataset (or subsample CIFAR binaries)")
    g.add_argument("--domain", default="A", help="synthetic family: A (gratings) or B (shapes)")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--per-class", type=int, default=200, help="head-class count n")
    g.add_argument("--rho", type=float, default=1.0, help="imbalance ratio (1 = balanced)")
    g.add_argument("--image-size", type=int, default=16)
    g.add_argument("--val-per-class", type=int, default=50)
    g.add_argument("--noise", type=float, default=0.6)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cifar", nargs="+", help="CIFAR binary batches to use as the balanced pool")
    g.add_argument("--cifar-val", nargs="+", help="CIFAR binary batches for the validation split")
    g.add_argument("--out", required=True, help="output directory; writes <id>.imbd, <id>-val.imbd and profile.json")
    g.set_defaults(func=cmd_dataset_gen)

    sn = sub.add_parser("supernet", help="supernet training").add_subparsers(dest="action", required=True)
    t = common(sn.add_parser("train", help="train a supernet by uniform single-path sampling"))
    t.add_argument("--train", required=True, help="IMBD training file")
    t.add_argument("--val", help="IMBD validation file (logged only)")
    t.add_argument("--classes", type=int, help="number of classes (default: max label + 1)")
    t.add_argument("--epochs", type=int, help="override supernet.epochs")
    t.add_argument("--loss", choices=("ce", "rw", "drw"), default="ce",
                   help="plain CE, reweighted from the start, or deferred reweighting")
    t.add_argument("--out", required=True, help="checkpoint path (.imbn)")
    t.set_defaults(func=cmd_supernet_train)

    a = common(sub.add_parser("adapt", help="adapt a source supernet to a target dataset"))
    a.add_argument("--procedure", choices=PROCEDURES, required=True)
    a.add_argument("--source", required=True, help="source checkpoint")
    a.add_argument("--train", required=True, help="target IMBD training file")
    a.add_argument("--classes", type=int)
    a.add_argument("--out", default="adapted.imbn", help="adapted checkpoint path")
    a.add_argument("--results", help="append a JSONL result record here")
    a.add_argument("--run-id")
    a.add_argument("--imbalance", type=float, help="nominal ratio to record (default: measured)")
    a.set_defaults(func=cmd_adapt)

    s = common(sub.add_parser("search", help="search a supernet for the best subnet"))
    s.add_argument("method", choices=("evo", "exhaustive"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--val", required=True, help="IMBD file scored by the fitness")
    s.add_argument("--calib", help="IMBD file for BN recalibration (default: val)")
    s.add_argument("--trace", help="write the per-generation CSV trace here")
    s.add_argument("--top", type=int, default=10, help="how many results to print")
    s.set_defaults(func=cmd_search)

    sb = sub.add_parser("subnet", help="standalone subnet training").add_subparsers(dest="action", required=True)
    st = common(sb.add_parser("train", help="train one architecture from scratch over seeds"))
    st.add_argument("--arch", required=True, help="architecture string, e.g. '|conv3x3~0|+|skip~0|conv1x1~1|'")
    st.add_argument("--train", required=True)
    st.add_argument("--val", required=True)
    st.add_argument("--classes", type=int)
    st.add_argument("--seeds", type=int, nargs="+", help="override the config seed list")
    st.set_defaults(func=cmd_subnet_train)

    an = sub.add_parser("analyze", help="ranking analyses").add_subparsers(dest="action", required=True)
    tr = common(an.add_parser("transfer", help="Kendall-tau grid over domains x imbalance ratios"))
    tr.add_argument("--out", default="transfer", help="output stem; writes <stem>.csv and <stem>.svg")
    tr.add_argument("--seeds", type=int, nargs="+")
    tr.add_argument("--workers", type=int, help="worker processes (default: IMBNAS_THREADS or 1)")
    tr.set_defaults(func=cmd_analyze_transfer)

    r = sub.add_parser("report", help="rebuild summary tables from a report's results.jsonl")
    r.add_argument("--dir", required=True, help="report directory")
    r.set_defaults(func=cmd_report)

    rn = common(sub.add_parser("run", help="full pipeline: supernet, adaptation, search, retrain"))
    rn.add_argument("--output-dir", help="override output_dir")
    rn.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, DatasetFileError, ArchStringError, FileNotFoundError) as exc:
        print(f"imbnas: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
