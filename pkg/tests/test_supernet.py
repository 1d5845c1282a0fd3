import math

import numpy as np
import pytest

from conftest import TINY, arch_of
from imbnas.core import Tensor, ops
from imbnas.core.params import BACKBONE, CLASSIFIER
from imbnas.data import gen_synthetic
from imbnas.core.tensor import backward
from imbnas.losses import cross_entropy
from imbnas.space import SearchSpaceSpec, random_arch
from imbnas.supernet import (
    cell_widths,
    evaluate,
    eval_subnet,
    forward,
    init_supernet,
    path_keys,
    recalibrate_bn,
    replace_classifier,
)

CONV_ARCH = arch_of("conv3x3", "conv1x1", "skip")


def test_same_seed_bit_identical():
    a, b = init_supernet(TINY, 3), init_supernet(TINY, 3)
    assert list(a.params) == list(b.params)
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    c = init_supernet(TINY, 4)
    assert c.params["stem.conv.weight"].data.tobytes() != a.params["stem.conv.weight"].data.tobytes()


def test_parameter_layout():
    net = init_supernet(TINY, 0)
    assert net.params.keys_with(CLASSIFIER) == ["classifier.weight", "classifier.bias"]
    assert net.params["classifier.weight"].shape == (4, 8)
    assert cell_widths(TINY) == [4, 8]
    for c in range(TINY.num_cells):
        for e in range(TINY.num_edges):
            assert f"cell{c}.e{e}.conv3x3.weight" in net.params
            assert f"cell{c}.e{e}.conv1x1.weight" in net.params


def test_path_keys():
    assert path_keys(TINY, CONV_ARCH) == [
        "cell0.e0.conv3x3", "cell0.e1.conv1x1", "cell1.e0.conv3x3", "cell1.e1.conv1x1",
    ]
    assert path_keys(TINY, arch_of("none", "skip", "avgpool3x3")) == []


def test_gradients_only_on_path():
    net = init_supernet(TINY, 0)
    x = Tensor(np.random.default_rng(0).standard_normal((4, 3, 8, 8)).astype(np.float32))
    backward(cross_entropy(forward(net, CONV_ARCH, x, training=True), [0, 1, 2, 3]))
    on_path = {f"{k}.weight" for k in path_keys(TINY, CONV_ARCH)}
    for k in net.params:
        has = net.params[k].grad is not None
        if k.startswith("cell"):
            assert has == (k in on_path), k
        else:
            assert has, k


def test_wrong_arch_size_rejected():
    net = init_supernet(TINY, 0)
    with pytest.raises(ValueError):
        forward(net, arch_of("skip"), Tensor(np.zeros((1, 3, 8, 8), np.float32)), training=False)


def test_replace_classifier_keeps_backbone():
    net = init_supernet(TINY, 0)
    new = replace_classifier(net, 7, seed=1)
    assert new.spec.num_classes == 7 and new.params["classifier.weight"].shape == (7, 8)
    for k in net.params.keys_with(BACKBONE):
        assert new.params[k].data.tobytes() == net.params[k].data.tobytes()
        assert new.params[k] is not net.params[k]


def test_untrained_accuracy_near_chance():
    spec = TINY.with_classes(10)
    _, val = gen_synthetic("A", [1] * 10, image_size=8, seed=1, val_per_class=30)
    n = len(val)
    sigma = math.sqrt(0.1 * 0.9 / n)
    for seed in range(3):
        net = init_supernet(spec, seed)
        acc = eval_subnet(net, random_arch(spec, seed), val)
        assert abs(acc - 0.1) <= 3 * sigma


def test_all_none_is_exactly_chance(tiny_data):
    train, val = tiny_data
    net = init_supernet(TINY, 0)
    res = evaluate(net, arch_of("none", "none", "none"), val, train)
    # constant logits: every prediction is the same class
    assert res.accuracy == pytest.approx(1 / 4)
    assert res.per_class_correct.sum() == res.per_class_total.max()


def test_evaluate_is_deterministic_and_pure(tiny_data):
    train, val = tiny_data
    net = init_supernet(TINY, 0)
    before = {k: (v.mean.copy(), v.var.copy()) for k, v in net.bn_state.items()}
    a = evaluate(net, CONV_ARCH, val, train)
    b = evaluate(net, CONV_ARCH, val, train)
    assert a.accuracy == b.accuracy
    assert np.array_equal(a.per_class_correct, b.per_class_correct)
    assert a.per_class_total.tolist() == [10] * 4
    for k, (m, v) in before.items():
        assert np.array_equal(net.bn_state[k].mean, m) and np.array_equal(net.bn_state[k].var, v)


def test_recalibration_deterministic_and_isolated(tiny_data):
    train, _ = tiny_data
    net = init_supernet(TINY, 0)
    off = {k: v.copy() for k, v in net.bn_state.items() if k.startswith("cell") and "conv1x1" not in k
           and "e0.conv3x3" not in k}
    s1 = recalibrate_bn(net, CONV_ARCH, train, bn_state={k: v.copy() for k, v in net.bn_state.items()})
    s2 = recalibrate_bn(net, CONV_ARCH, train, bn_state={k: v.copy() for k, v in net.bn_state.items()})
    for k in s1:
        assert s1[k].mean.tobytes() == s2[k].mean.tobytes()
        assert s1[k].var.tobytes() == s2[k].var.tobytes()
    for k, st in off.items():
        assert s1[k].mean.tobytes() == st.mean.tobytes(), k
    assert not np.array_equal(s1["stem.bn"].mean, net.bn_state["stem.bn"].mean)
    assert not np.array_equal(s1["cell0.e0.conv3x3.bn"].var, net.bn_state["cell0.e0.conv3x3.bn"].var)


def test_recalibration_uses_exact_batch_average(tiny_data):
    train, _ = tiny_data
    net = init_supernet(TINY, 0)
    state = recalibrate_bn(net, CONV_ARCH, train, batches=1, batch_size=len(train),
                           bn_state={k: v.copy() for k, v in net.bn_state.items()})
    # oracle for the stem site: batch statistics of the first conv output
    x = Tensor(train.images[np.random.default_rng(0).permutation(len(train))])
    h = ops.conv2d(x, net.params["stem.conv.weight"], pad=1).data.astype(np.float64)
    np.testing.assert_allclose(state["stem.bn"].mean, h.mean(axis=(0, 2, 3)), rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(state["stem.bn"].var, h.var(axis=(0, 2, 3), ddof=1), rtol=1e-4)


def test_empty_calibration_rejected(tiny_data):
    train, _ = tiny_data
    with pytest.raises(ValueError):
        recalibrate_bn(init_supernet(TINY, 0), CONV_ARCH, train.take(np.zeros(0, dtype=int)))


@pytest.mark.parametrize(
    "spec,fixed",
    [
        # stem conv + BN pair, one reduction (conv + BN pair), head BN pair, classifier pair
        (TINY, 3 + 3 + 2 + 2),
        # desk skeleton: two reductions
        (SearchSpaceSpec(), 3 + 2 * 3 + 2 + 2),
    ],
)
def test_parameter_key_count(spec, fixed):
    net = init_supernet(spec, 0)
    parametric = 2  # conv1x1 and conv3x3 each own one weight per edge
    assert len(list(net.params)) == spec.num_cells * spec.num_edges * parametric + fixed


def test_bn_output_mean_matches_shift_after_recalibration(tiny_data):
    train, _ = tiny_data
    net = init_supernet(TINY, 0)
    beta = np.random.default_rng(5).standard_normal(TINY.stem_width).astype(np.float32)
    net.params["stem.bn.beta"].data[...] = beta
    state = recalibrate_bn(net, CONV_ARCH, train, batches=1, batch_size=len(train),
                           bn_state={k: v.copy() for k, v in net.bn_state.items()})
    h = ops.conv2d(Tensor(train.images), net.params["stem.conv.weight"], pad=1)
    out = ops.batch_norm(h, net.params["stem.bn.gamma"], net.params["stem.bn.beta"], state["stem.bn"], False)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), beta, atol=1e-4)
