import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from imbnas.data import (
    FEW,
    MANY,
    MEDIUM,
    DatasetFileError,
    LabeledDataset,
    class_bins,
    gen_synthetic,
    load_dataset,
    longtail_profile,
    make_longtail,
    save_dataset,
    subsample,
)


def oracle_counts(n, c, rho):
    """n * mu**c rounded half-up and clamped, with mu from the ratio."""
    mu = rho ** (-1 / (c - 1))
    return [max(1, math.floor(n * mu**k + 0.5)) for k in range(c)]


def test_balanced_profile():
    p = longtail_profile(500, 10, 1)
    assert p.counts == (500,) * 10 and p.mu == 1.0 and p.rho == 1.0


def test_rho_100_profile():
    p = longtail_profile(500, 10, 100)
    assert p.mu == pytest.approx(0.5995, abs=1e-4)
    assert p.counts[0] == 500 and p.counts[-1] == 5
    assert p.counts == (500, 300, 180, 108, 65, 39, 23, 14, 8, 5)
    assert all(a > b for a, b in zip(p.counts, p.counts[1:]))
    assert p.rho == 100.0 and p.warning is None


@given(st.integers(1, 2000), st.integers(2, 30), st.floats(1.0, 1000.0))
def test_profile_matches_oracle_and_invariants(n, c, rho):
    p = longtail_profile(n, c, rho)
    assert list(p.counts) == oracle_counts(n, c, rho)
    assert all(a >= b for a, b in zip(p.counts, p.counts[1:]))
    assert min(p.counts) >= 1
    assert p.rho == p.counts[0] / p.counts[-1]


@given(st.integers(1, 1000), st.integers(2, 20), st.floats(1.0, 200.0), st.floats(1.0, 200.0))
def test_larger_ratio_never_adds_samples(n, c, r1, r2):
    lo, hi = sorted((r1, r2))
    a, b = longtail_profile(n, c, lo), longtail_profile(n, c, hi)
    assert all(y <= x for x, y in zip(a.counts, b.counts))
    assert a.counts[0] == b.counts[0] == n


def test_clamp_sets_warning():
    p = longtail_profile(500, 10, 5000)
    assert p.counts[-1] == 1 and p.rho < 5000
    assert p.warning is not None
    # 500 / 1000 rounds up to 1 on its own, so nothing is clamped
    assert longtail_profile(500, 10, 1000).warning is None


def test_profile_rejects_bad_args():
    for args in ((0, 10, 10), (10, 1, 10), (10, 10, 0.5)):
        with pytest.raises(ValueError):
            longtail_profile(*args)


def _pool(per_class=20, c=4, seed=0):
    train, _ = gen_synthetic("A", [per_class] * c, image_size=8, seed=seed, val_per_class=2)
    return train


def test_subsample_roundtrip_histogram():
    pool = _pool(50, 10)
    p = longtail_profile(50, 10, 10)
    out = subsample(pool, p, seed=3)
    assert out.class_counts().tolist() == list(p.counts)


def test_subsample_full_take_is_permutation():
    pool = _pool(10, 3)
    p = longtail_profile(10, 3, 1)
    out = subsample(pool, p, seed=1)
    key = lambda d: sorted(map(bytes, d.images.reshape(len(d), -1)))
    assert key(out) == key(pool)


def test_subsample_rho_100_on_500_pool():
    pool, _ = gen_synthetic("B", [500] * 10, image_size=4, seed=0, val_per_class=1)
    out = subsample(pool, longtail_profile(500, 10, 100), seed=0)
    counts = out.class_counts().tolist()
    assert counts[0] == 500 and counts[-1] == 5


def test_subsample_deterministic():
    pool = _pool(30, 4)
    p = longtail_profile(30, 4, 5)
    a, b = subsample(pool, p, 9), subsample(pool, p, 9)
    assert a.images.tobytes() == b.images.tobytes()
    assert not np.array_equal(a.labels, subsample(pool, p, 10).labels) or \
        a.images.tobytes() != subsample(pool, p, 10).images.tobytes()


def test_subsample_names_deficient_class():
    pool = _pool(5, 3)
    with pytest.raises(ValueError, match="class 0"):
        subsample(pool, longtail_profile(6, 3, 2), 0)


def test_degenerate_counts():
    train, _ = gen_synthetic("A", [4, 0, 0], image_size=8, seed=0, val_per_class=1)
    assert len(train) == 4 and set(train.labels.tolist()) == {0}


def test_gen_is_seeded():
    a, _ = gen_synthetic("A", [5] * 3, image_size=8, seed=7, val_per_class=1)
    b, _ = gen_synthetic("A", [5] * 3, image_size=8, seed=7, val_per_class=1)
    c, _ = gen_synthetic("A", [5] * 3, image_size=8, seed=8, val_per_class=1)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.images.shape == c.images.shape and a.images.tobytes() != c.images.tobytes()


def test_val_split_is_balanced():
    _, val = gen_synthetic("B", [30, 3, 1], image_size=8, seed=0, val_per_class=7)
    assert val.class_counts().tolist() == [7, 7, 7]
    assert val.split == "val"


def test_default_shape():
    train, _ = gen_synthetic("A", [2, 2], seed=0, val_per_class=1)
    assert train.image_shape == (3, 16, 16) and train.images.dtype == np.float32


def test_unknown_domain_rejected():
    with pytest.raises(ValueError, match="unknown domain"):
        gen_synthetic("Z", [1, 1])


def test_linear_probe_above_chance():
    train, val = gen_synthetic("A", [300] * 10, image_size=16, seed=7)
    x = np.c_[train.images.reshape(len(train), -1), np.ones(len(train))]
    xv = np.c_[val.images.reshape(len(val), -1), np.ones(len(val))]
    w = np.linalg.solve(x.T @ x + 10 * np.eye(x.shape[1]), x.T @ np.eye(10)[train.labels])
    acc = (np.argmax(xv @ w, axis=1) == val.labels).mean()
    assert acc > 0.10


def test_domains_differ():
    a, _ = gen_synthetic("A", [3, 3], image_size=8, seed=0, val_per_class=1)
    b, _ = gen_synthetic("B", [3, 3], image_size=8, seed=0, val_per_class=1)
    assert a.images.tobytes() != b.images.tobytes()


def test_make_longtail_ids_and_counts():
    train, val, p = make_longtail("A", 40, 5, 10, image_size=8, seed=0, val_per_class=3)
    assert train.class_counts().tolist() == list(p.counts)
    assert train.dataset_id == "A-10x" and val.dataset_id == "A-10x-val"


def test_labels_validated():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 1, 2, 2)), np.array([0, 3]), 2)


@pytest.mark.parametrize(
    "counts,expected",
    [
        ([500, 50, 5], [MANY, MEDIUM, FEW]),
        ([100] * 4, [MEDIUM] * 4),
        ([101, 100, 20, 19], [MANY, MEDIUM, MEDIUM, FEW]),
    ],
)
def test_class_bins(counts, expected):
    assert class_bins(counts) == expected


def test_class_bins_bad_thresholds():
    with pytest.raises(ValueError):
        class_bins([1, 2], (100, 20))


# ---------------------------------------------------------------- IMBD files


def test_imbd_roundtrip(tmp_path):
    train, _ = gen_synthetic("B", [3, 2, 1], image_size=6, seed=0, val_per_class=1)
    path = tmp_path / "d.imbd"
    save_dataset(train, path)
    back = load_dataset(path, 3)
    assert back.images.tobytes() == train.images.tobytes()
    assert back.labels.tolist() == train.labels.tolist()
    raw = path.read_bytes()
    assert raw[:4] == b"IMBD"
    assert np.frombuffer(raw, "<u4", 5, 4).tolist() == [1, 6, 3, 6, 6]
    assert len(raw) == 24 + 4 * 6 + 4 * 6 * 3 * 36


def test_imbd_errors(tmp_path):
    train, _ = gen_synthetic("A", [2, 2], image_size=4, seed=0, val_per_class=1)
    good = tmp_path / "g.imbd"
    save_dataset(train, good)
    raw = good.read_bytes()
    (tmp_path / "magic.imbd").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.imbd").write_bytes(raw[:-3])
    (tmp_path / "ver.imbd").write_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    for name in ("magic", "short", "ver"):
        with pytest.raises(DatasetFileError):
            load_dataset(tmp_path / f"{name}.imbd")
