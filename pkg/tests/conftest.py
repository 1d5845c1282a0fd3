import sys

import pytest

from imbnas.data import gen_synthetic
from imbnas.space import OPS, CellArch, SearchSpaceSpec

# A skeleton small enough that a training epoch takes a fraction of a second.
TINY = SearchSpaceSpec(num_nodes=3, stage_widths=(4, 8), cells_per_stage=1, stem_width=4,
                       input_shape=(3, 8, 8), num_classes=4)


def arch_of(*names):
    return CellArch(tuple(OPS.index(n) for n in names))


@pytest.fixture(scope="session")
def tiny_data():
    return gen_synthetic("A", [24] * 4, image_size=8, seed=0, val_per_class=10)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
