"""Adapt a source supernet to a long-tailed target with each procedure and
show what moved and what it cost.

    python demos/freeze_contract.py

P1 retrains the classifier only, so every backbone tensor stays bytewise
equal to the source. P2 fine-tunes everything and P3 retrains from scratch.
"""

import numpy as np

from imbnas.adaptation import adapt, default_procedure
from imbnas.core.optim import LrSchedule
from imbnas.core.params import BACKBONE
from imbnas.data import gen_synthetic, make_longtail
from imbnas.losses import LossConfig
from imbnas.space import SearchSpaceSpec, build_pool
from imbnas.supernet import init_supernet
from imbnas.training import train_supernet

SPEC = SearchSpaceSpec(stage_widths=(4, 8), cells_per_stage=1, stem_width=4, input_shape=(3, 8, 8), num_classes=4)
SOURCE_SCHEDULE = LrSchedule(0.05, (4,))
SOURCE_EPOCHS = 6


def moved(source, net):
    keys = source.params.keys_with(BACKBONE)
    return sum(not np.array_equal(source.params[k].data, net.params[k].data) for k in keys), len(keys)


def main():
    src_train, src_val = gen_synthetic("A", [48] * 4, image_size=8, seed=0, val_per_class=10)
    tgt_train, _, profile = make_longtail("B", 48, 4, 20.0, image_size=8, seed=1, val_per_class=10)
    pool = build_pool(SPEC, "iso_flop")
    print(f"pool of {len(pool)} architectures, target counts {list(profile.counts)}")

    source = init_supernet(SPEC, 0)
    train_supernet(source, src_train, src_val, LossConfig(drw_epoch=None), SOURCE_SCHEDULE, SOURCE_EPOCHS, 0, pool)

    print(f"{'proc':5} {'steps':>6} {'updates':>10} {'wall ms':>9}  backbone tensors changed")
    for tag in ("P0", "P1", "P2", "P3"):
        proc = default_procedure(tag, SOURCE_SCHEDULE, SOURCE_EPOCHS, adapt_epochs=2)
        net, cost = adapt(source, tgt_train, proc, 0, pool)
        changed, total = moved(source, net)
        print(f"{tag:5} {cost.steps:6d} {cost.param_updates:10d} {cost.wall_ms:9.1f}  {changed}/{total}")


if __name__ == "__main__":
    main()
