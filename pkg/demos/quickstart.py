"""Run the whole pipeline on the minimal config and print the summary tables.

    python demos/quickstart.py [--out runs/quickstart]

Takes about a second. The run directory holds checkpoints, search traces,
results.jsonl and the CSV summaries.
"""

import argparse
from pathlib import Path

from imbnas.config import load_config
from imbnas.pipeline import run_pipeline

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "minimal.toml"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/quickstart")
    ap.add_argument("--config", default=str(CONFIG))
    args = ap.parse_args()

    cfg = load_config(args.config)
    cfg.output_dir = args.out
    report = run_pipeline(cfg)
    for name in ("summary.csv", "summary_dissection.csv", "summary_cost.csv"):
        print(f"== {name}")
        print((report / name).read_text())
    print(f"report written to {report}")


if __name__ == "__main__":
    main()
