"""End-to-end experiment: source supernet, adaptation, search, standalone retrain.

Layout under ``output_dir``::

    checkpoints/<name>-<hash>.imbn   supernets, keyed by the config that made them
    checkpoints/<name>-<hash>.json   cost of producing that checkpoint
    report/config.toml               resolved configuration
    report/results.jsonl             one record per (procedure, ratio)
    report/summary.csv               accuracy table, P1 flagged when it beats P0
    report/summary_cost.csv          steps and parameter updates per procedure
    report/summary_dissection.csv    Many / Medium / Few / All accuracy
    report/timing.csv                wall-clock per adaptation
    report/search/<proc>-<ratio>.csv evolution traces

Checkpoints live outside ``report/`` so that deleting the report and rerunning
recomputes only the cheap stages.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .adaptation import adapt, default_procedure, retrain_over_seeds
from .checkpoint import append_result, load_checkpoint, read_results, save_checkpoint
from .config import ExperimentConfig, save_config
from .data import MANY, class_bins, gen_synthetic, make_longtail
from .evolution import SearchResult, evolve, exhaustive, write_trace
from .losses import LossConfig
from .ranking import NA, DatasetVariant, GridResult, dissect_accuracy, emit_grid, transfer_grid
from .space import build_pool, encode_arch
from .supernet import Supernet, eval_subnet, init_supernet
from .training import CostMeter, CostReport, train_supernet

logger = logging.getLogger(__name__)

SUMMARY_FILES = ("summary.csv", "summary_cost.csv", "summary_dissection.csv", "timing.csv")


def _ratio_tag(rho: float) -> str:
    return f"{rho:g}x"


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _cached(path: Path, spec, build) -> tuple[Supernet, CostReport]:
    """Load ``path`` and its cost sidecar, or run ``build`` and store both."""
    side = path.with_suffix(".json")
    if path.exists() and side.exists():
        logger.info("reusing %s", path)
        net = load_checkpoint(path, spec)
        return net, CostReport(**json.loads(side.read_text()))
    net, cost = build()
    save_checkpoint(net, path)
    _atomic_write(side, json.dumps(cost.as_dict(), sort_keys=True) + "\n")
    return net, cost


def search_arch(net: Supernet, pool, val, calib, cfg: ExperimentConfig, trace_path: Path | None = None,
                method: str | None = None) -> SearchResult:
    """Rank ``pool`` by supernet accuracy on ``val`` (BN recalibrated on ``calib``)."""

    def fitness(arch):
        return eval_subnet(net, arch, val, calib)

    if (method or cfg.search.method) == "exhaustive":
        ranked = exhaustive(fitness, pool)
        k = cfg.search.top_k
        trace = [(0, encode_arch(a), f, i < k) for i, (a, f) in enumerate(ranked)]
        result = SearchResult(ranked[:k], trace, [ranked[0][1]], len(ranked))
    else:
        result = evolve(fitness, pool, cfg.search.evo(cfg.seed))
    if trace_path is not None:
        trace_path.parent.mkdir(parents=True, exist_ok=True)
        write_trace(result, trace_path)
    return result


def source_data(cfg: ExperimentConfig):
    d = cfg.dataset
    return gen_synthetic(
        d.source_domain, [d.source_per_class] * d.num_classes, d.image_size, cfg.seed,
        val_per_class=d.val_per_class, noise=d.noise,
    )


def target_data(cfg: ExperimentConfig, rho: float):
    d = cfg.dataset
    return make_longtail(
        d.target_domain, d.target_per_class, d.target_classes, rho, d.image_size, cfg.seed,
        val_per_class=d.val_per_class, noise=d.noise,
    )


def source_checkpoint(cfg: ExperimentConfig, ckpt_dir) -> Path:
    return Path(ckpt_dir) / f"source-{cfg.digest('seed', 'dataset', 'space', 'supernet')}.imbn"


def train_source(cfg: ExperimentConfig, pool, ckpt_dir: Path, train, val) -> tuple[Supernet, CostReport]:
    spec = cfg.space_spec()
    sched = cfg.supernet

    def build():
        net = init_supernet(spec, cfg.seed)
        with CostMeter() as meter:
            train_supernet(net, train, val, LossConfig(beta=sched.beta), sched.schedule(), sched.epochs,
                           cfg.seed, pool, sched.batch_size, meter)
        return net, meter.report

    return _cached(source_checkpoint(cfg, ckpt_dir), spec, build)


def procedure_for(cfg: ExperimentConfig, tag: str):
    s, a = cfg.supernet, cfg.adapt
    overrides = {"beta": s.beta, "batch_size": s.batch_size}
    if tag == "P0":
        return default_procedure("P0")
    adapt_sched = None
    if tag in ("P1", "P2"):
        adapt_sched = replace(s.schedule(), base_lr=s.base_lr * a.lr_scale, milestones=(a.epochs // 2,))
    if tag == "P1":
        overrides["continue_classifier"] = a.p1_continue_classifier
    if tag == "P2" and a.p2_freeze_backbone_at >= 0:
        overrides["freeze_backbone_at"] = a.p2_freeze_backbone_at
    return default_procedure(tag, s.schedule(), s.epochs, a.epochs, adapt_sched, **overrides)


def run_pipeline(cfg: ExperimentConfig) -> Path:
    """Run every configured (ratio, procedure) pair and write the report directory."""
    cfg.validate()
    out = Path(cfg.output_dir)
    ckpt_dir, report = out / "checkpoints", out / "report"
    report.mkdir(parents=True, exist_ok=True)
    save_config(cfg, report / "config.toml")
    results_path = report / "results.jsonl"

    spec = cfg.space_spec()
    pool = build_pool(spec, cfg.space.pool, cfg.space.pool_size, cfg.seed)
    logger.info("search pool: %d architectures", len(pool))
    src_train, src_val = source_data(cfg)
    source_net, _ = train_source(cfg, pool, ckpt_dir, src_train, src_val)
    src_ckpt = source_checkpoint(cfg, ckpt_dir)

    p0_search = search_arch(source_net, pool, src_val, src_train, cfg, report / "search" / "P0-source.csv")
    records = []
    for rho in cfg.dataset.ratios:
        tgt_train, tgt_val, profile = target_data(cfg, rho)
        bins = class_bins(profile.counts, tuple(cfg.report.bins))
        if MANY not in bins:
            msg = (f"no class at {_ratio_tag(rho)} has more than {cfg.report.bins[1]} examples; "
                   "the Many bin will read n/a")
            logger.warning(msg)
            warnings.warn(msg, stacklevel=2)
        for tag in cfg.adapt.procedures:
            proc = procedure_for(cfg, tag)
            if tag == "P0":
                net, cost, ckpt, search = source_net, CostReport(0, 0, 0.0), src_ckpt, p0_search
            else:
                key = cfg.digest("seed", "dataset", "space", "supernet", "adapt")
                ckpt = ckpt_dir / f"{tag}-{_ratio_tag(rho)}-{key}.imbn"
                target_spec = spec.with_classes(tgt_train.num_classes)
                net, cost = _cached(ckpt, target_spec,
                                    lambda: adapt(source_net, tgt_train, proc, cfg.seed, pool))
                search = search_arch(net, pool, tgt_val, tgt_train, cfg,
                                     report / "search" / f"{tag}-{_ratio_tag(rho)}.csv")
            best = search.best
            res = retrain_over_seeds(best, tgt_train, tgt_val, cfg.subnet.train_cfg(), cfg.seeds, spec)
            dis = dissect_accuracy(res.per_class_correct, res.per_class_total, bins)
            rec = {
                "run_id": f"{tag}-{_ratio_tag(rho)}-seed{cfg.seed}",
                "procedure": tag,
                "source": src_train.dataset_id,
                "target": tgt_train.dataset_id,
                "imbalance": float(rho),
                "achieved_imbalance": float(profile.rho),
                "seed": cfg.seed,
                "seeds": list(cfg.seeds),
                "steps": cost.steps,
                "param_updates": cost.param_updates,
                "wall_ms": round(cost.wall_ms, 3),
                "checkpoint_path": str(ckpt),
                "arch": encode_arch(best),
                "search_fitness": search.ranked[0][1],
                "accuracy": res.accuracy,
                "accuracies": list(res.accuracies),
                "dissection": dis,
            }
            append_result(rec, results_path)
            records.append(rec)
            logger.info("%s %s: %s acc %.4f", tag, _ratio_tag(rho), rec["arch"], res.accuracy)
    write_summaries(records, report)
    return report


# ------------------------------------------------------------------ transfer


def analyze_variants(cfg: ExperimentConfig) -> list[DatasetVariant]:
    """Dataset variants for the transfer grid: every domain at every ratio."""
    a = cfg.analyze
    out = []
    for dom in a.domains:
        for rho in a.ratios:
            tr, va, _ = make_longtail(dom, a.per_class, cfg.dataset.num_classes, rho, a.image_size, cfg.seed,
                                      val_per_class=cfg.dataset.val_per_class, noise=cfg.dataset.noise)
            out.append(DatasetVariant(f"{dom}-{_ratio_tag(rho)}", tr, va, rho))
    return out


def run_transfer(cfg: ExperimentConfig, out, seeds=None, workers=None) -> tuple[GridResult, tuple[Path, Path]]:
    """Train the analysis pool on every variant and write the tau grid to ``<out>.csv/.svg``."""
    spec = cfg.analyze_spec()
    pool = build_pool(spec, "iso_flop", cfg.analyze.pool_size, cfg.seed)
    grid = transfer_grid(pool, analyze_variants(cfg), cfg.analyze.train_cfg(), seeds or cfg.seeds, spec, workers)
    return grid, emit_grid(grid.tau, grid.labels, out)


# ----------------------------------------------------------------- summaries


def _latest(records: Sequence[dict]) -> list[dict]:
    """Last record per run_id, in first-seen order."""
    by_id: dict[str, dict] = {}
    for r in records:
        by_id.pop(r["run_id"], None)
        by_id[r["run_id"]] = r
    return sorted(by_id.values(), key=lambda r: (r["imbalance"], r["procedure"]))


def _f(v) -> str:
    return v if isinstance(v, str) else f"{v:.6f}"


def write_summaries(records: Sequence[dict], report_dir) -> list[Path]:
    """Accuracy, cost, dissection and timing tables from result records.

    All but ``timing.csv`` are functions of (config, seeds) alone.
    """
    report = Path(report_dir)
    rows = _latest(records)
    p0 = {r["imbalance"]: r["accuracy"] for r in rows if r["procedure"] == "P0"}
    nseeds = max((len(r["accuracies"]) for r in rows), default=0)

    acc = ["procedure,imbalance,arch,mean_acc,std_acc," + ",".join(f"acc_{i}" for i in range(nseeds))
           + ",beats_P0"]
    cost = ["procedure,imbalance,steps,param_updates"]
    dis = ["procedure,imbalance,Many,Medium,Few,All"]
    timing = ["procedure,imbalance,wall_ms"]
    for r in rows:
        accs = r["accuracies"]
        beats = r["procedure"] != "P0" and r["imbalance"] in p0 and r["accuracy"] > p0[r["imbalance"]]
        acc.append(",".join([
            r["procedure"], f"{r['imbalance']:g}", r["arch"], _f(r["accuracy"]), _f(float(np.std(accs))),
            *(_f(a) for a in accs), *([""] * (nseeds - len(accs))), "yes" if beats else "",
        ]))
        cost.append(f"{r['procedure']},{r['imbalance']:g},{r['steps']},{r['param_updates']}")
        d = r["dissection"]
        dis.append(",".join([r["procedure"], f"{r['imbalance']:g}",
                             *(_f(d.get(k, NA)) for k in ("Many", "Medium", "Few", "All"))]))
        timing.append(f"{r['procedure']},{r['imbalance']:g},{r['wall_ms']:.3f}")

    paths = []
    for name, lines in zip(SUMMARY_FILES, (acc, cost, dis, timing)):
        p = report / name
        _atomic_write(p, "\n".join(lines) + "\n")
        paths.append(p)
    return paths


def rebuild_report(report_dir) -> list[Path]:
    """Regenerate the summary tables from ``results.jsonl``."""
    report = Path(report_dir)
    return write_summaries(read_results(report / "results.jsonl"), report)
