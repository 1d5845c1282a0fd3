"""Train a small architecture pool standalone on balanced and long-tailed
variants of two domains, then print the Kendall tau grid between rankings.

    python demos/rank_transfer.py [--out runs/rank_transfer] [--seeds 0]

The full-size grid (`imbnas analyze transfer` with default settings) takes
tens of minutes. This one shrinks the pool and the epochs to finish in
about a minute.
"""

import argparse

import numpy as np

from imbnas.config import ExperimentConfig
from imbnas.pipeline import run_transfer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/rank_transfer")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = ap.parse_args()

    cfg = ExperimentConfig()
    cfg.analyze.pool_size = 12
    cfg.analyze.per_class = 40
    cfg.analyze.epochs = 6
    cfg.analyze.milestones = [4, 5]
    cfg.dataset.val_per_class = 20
    cfg.validate()

    grid, (csv_path, svg_path) = run_transfer(cfg, args.out, seeds=args.seeds)
    width = max(len(s) for s in grid.labels)
    print(" " * width, " ".join(f"{s:>8}" for s in grid.labels))
    for label, row in zip(grid.labels, grid.tau):
        print(f"{label:>{width}}", " ".join(f"{v:8.3f}" for v in row))
    off = ~np.eye(len(grid.labels), dtype=bool)
    print(f"mean off-diagonal tau {np.nanmean(grid.tau[off]):.3f}")
    print(f"wrote {csv_path} and {svg_path}")


if __name__ == "__main__":
    main()
