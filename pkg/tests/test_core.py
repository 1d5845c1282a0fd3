import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imbnas.core import (
    SGD,
    BNStats,
    LrSchedule,
    ParamSet,
    ShapeError,
    TapeError,
    Tensor,
    backward,
    count_macs,
    finite_diff_grad,
    forward_op,
    grad_map,
    lr_at_epoch,
    no_grad,
    sgd_momentum_step,
)
from imbnas.core import ops
from imbnas.core.gradcheck import rel_error

import gradsuite


# ------------------------------------------------------------ gradient suite


@pytest.mark.parametrize("dtype", [np.float32, np.float64], ids=["f32", "f64"])
@pytest.mark.parametrize("kind", sorted(gradsuite.CASES))
def test_gradient_matches_finite_differences(kind, dtype):
    tol = gradsuite.TOL[dtype]
    errs = [gradsuite.check_instance(kind, s, dtype) for s in range(gradsuite.INSTANCES)]
    assert max(errs) <= tol, f"{kind}: worst relative error {max(errs):.3g}"


def test_wce_gradient_4class_batch8_f64():
    rng = np.random.default_rng(7)
    from imbnas.losses import weighted_cross_entropy

    logits = Tensor(rng.standard_normal((8, 4)), requires_grad=True)
    labels = rng.integers(0, 4, 8)
    w = np.array([0.5, 1.0, 2.0, 4.0])
    g = grad_map(weighted_cross_entropy(logits, labels, w), {"z": logits})["z"]
    num = finite_diff_grad(lambda: float(weighted_cross_entropy(logits, labels, w).data), {"z": logits})["z"]
    assert rel_error(g, num) <= 1e-6


def params(**arrays) -> ParamSet:
    ps = ParamSet()
    for k, v in arrays.items():
        ps.add(k, np.asarray(v, dtype=np.float64))
    return ps.seal()


# ------------------------------------------------------------------ forward


def test_skip_is_identity():
    t = Tensor(np.arange(6.0).reshape(1, 1, 2, 3))
    assert forward_op("skip", t) is t


def test_none_returns_zeros():
    t = Tensor(np.ones((2, 4, 8, 8), dtype=np.float32))
    z = forward_op("none", t)
    assert z.shape == (2, 4, 8, 8)
    assert not z.data.any()


def test_conv3x3_all_ones_center_is_nine():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    b = Tensor(np.zeros(1))
    y = forward_op("conv3x3", x, {"weight": w, "bias": b})
    assert y.data[0, 0, 1, 1] == 9.0
    assert y.data[0, 0, 0, 0] == 4.0


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    y = ops.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 3, 3))
    for n in range(2):
        for o in range(4):
            for i in range(3):
                for j in range(3):
                    ref[n, o, i, j] = (xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum()
    np.testing.assert_allclose(y, ref, rtol=1e-12)


def test_avgpool_excludes_padding():
    x = Tensor(np.ones((1, 1, 4, 4)))
    np.testing.assert_array_equal(forward_op("avgpool3x3", x).data, np.ones((1, 1, 4, 4)))


def test_shape_error_names_op_and_shapes():
    x = Tensor(np.ones((1, 3, 4, 4)))
    w = Tensor(np.ones((2, 5, 3, 3)))
    with pytest.raises(ShapeError) as exc:
        forward_op("conv3x3", x, {"weight": w})
    msg = str(exc.value)
    assert "conv3x3" in msg and "(1, 3, 4, 4)" in msg and "(2, 5, 3, 3)" in msg


def test_unknown_op_rejected():
    with pytest.raises(ValueError):
        forward_op("conv5x5", Tensor(np.ones((1, 1, 2, 2))))


def test_batchnorm_training_normalizes():
    rng = np.random.default_rng(3)
    x = Tensor((rng.standard_normal((16, 4, 5, 5)) * 3 + 2).astype(np.float32))
    y = ops.batch_norm(x, None, None, BNStats(4), training=True).data.astype(np.float64)
    assert np.abs(y.mean(axis=(0, 2, 3))).max() <= 1e-5
    assert np.abs(y.var(axis=(0, 2, 3)) - 1).max() <= 1e-4


def test_batchnorm_running_stats_update():
    x = Tensor(np.arange(8.0).reshape(4, 2, 1, 1))
    st_ = BNStats(2, np.float64)
    ops.batch_norm(x, None, None, st_, training=True)
    batch_mean = x.data.mean(axis=(0, 2, 3))
    batch_var = x.data.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(st_.mean, 0.1 * batch_mean)
    np.testing.assert_allclose(st_.var, 0.9 + 0.1 * batch_var)


def test_batchnorm_eval_needs_stats():
    with pytest.raises(ValueError):
        ops.batch_norm(Tensor(np.ones((2, 2, 2, 2))), None, None, None, training=False)


def test_count_macs_conv_and_linear():
    x = Tensor(np.ones((1, 8, 16, 16), dtype=np.float32))
    w = Tensor(np.ones((8, 8, 3, 3), dtype=np.float32))
    with count_macs() as c:
        ops.conv2d(x, w, pad=1)
        ops.linear(Tensor(np.ones((1, 32))), Tensor(np.ones((10, 32))))
    assert c[0] == 3 * 3 * 8 * 8 * 16 * 16 + 320


@given(st.integers(1, 3), st.integers(1, 4), st.integers(3, 6), st.integers(1, 2))
@settings(max_examples=30, deadline=None)
def test_no_nan_after_forward(n, c, h, stride):
    rng = np.random.default_rng(n * 100 + c * 10 + h)
    x = Tensor(rng.standard_normal((n, c, h, h)).astype(np.float32))
    for kind in ("conv1x1", "conv3x3", "avgpool3x3", "relu", "global_avg_pool", "batchnorm"):
        p = {"weight": Tensor(rng.standard_normal((c, c, 3 if kind == "conv3x3" else 1, 1)).astype(np.float32))}
        if kind == "conv3x3":
            p["weight"] = Tensor(rng.standard_normal((c, c, 3, 3)).astype(np.float32))
        y = forward_op(kind, x, p, stats=BNStats(c), stride=stride if kind.startswith("conv") else 1)
        assert np.isfinite(y.data).all()


# ------------------------------------------------------------------ backward


def test_linear_function_gradient_is_input():
    x = Tensor(np.array([1.0, -2.0, 3.0]))
    w = Tensor(np.array([0.5, 0.5, 0.5]), requires_grad=True)
    g = grad_map(ops.sum_all(ops.mul(w, x)), {"w": w})
    np.testing.assert_array_equal(g["w"], x.data)


def test_untouched_parameter_gets_zero_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    g = grad_map(ops.sum_all(ops.square(a)), {"a": a, "b": b})
    np.testing.assert_array_equal(g["b"], np.zeros(3))
    np.testing.assert_array_equal(g["a"], 2 * np.ones(3))


def test_tape_reuse_after_mutation_rejected():
    ps = params(w=np.ones(3))
    loss = ops.sum_all(ops.square(ps["w"]))
    sgd_momentum_step(ps, {"w": np.ones(3)}, lr=0.1, momentum=0.0, weight_decay=0.0)
    with pytest.raises(TapeError):
        backward(loss)


def test_no_grad_records_nothing():
    w = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = ops.square(w)
    assert y.is_leaf and not y.requires_grad


# ---------------------------------------------------------------- oracles


def test_finite_diff_square():
    w = Tensor(np.array([3.0]))
    g = finite_diff_grad(lambda: float(w.data[0] ** 2), {"w": w})
    assert g["w"][0] == pytest.approx(6.0, abs=1e-8)


def test_finite_diff_constant():
    w = Tensor(np.random.default_rng(0).standard_normal(5))
    g = finite_diff_grad(lambda: 4.2, {"w": w})
    assert not g["w"].any()


def test_finite_diff_rejects_nonfinite():
    w = Tensor(np.array([1.0]))
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda: float("nan"), {"w": w})


def test_finite_diff_restores_values():
    data = np.random.default_rng(1).standard_normal(4)
    w = Tensor(data.copy())
    finite_diff_grad(lambda: float((w.data**3).sum()), {"w": w})
    np.testing.assert_array_equal(w.data, data)


# ------------------------------------------------------------------ optimizer


def test_plain_sgd_step():
    ps = params(p=[1.0])
    sgd_momentum_step(ps, {"p": np.array([0.5])}, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert ps["p"].data[0] == pytest.approx(0.95, abs=1e-15)


def test_momentum_two_steps():
    ps = params(p=[0.0])
    v = None
    for _ in range(2):
        v = sgd_momentum_step(ps, {"p": np.array([1.0])}, lr=0.1, momentum=0.9, weight_decay=0.0, velocity=v)
    assert ps["p"].data[0] == pytest.approx(-0.29, abs=1e-15)


def test_zero_gradient_fixed_point():
    ps = params(p=[1.5, -2.0])
    sgd_momentum_step(ps, {"p": np.zeros(2)}, lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_array_equal(ps["p"].data, [1.5, -2.0])


def test_weight_decay_term():
    ps = params(p=[2.0])
    sgd_momentum_step(ps, {"p": np.array([0.0])}, lr=0.5, momentum=0.0, weight_decay=0.1)
    assert ps["p"].data[0] == pytest.approx(2.0 - 0.5 * 0.2)


def test_sgd_skips_params_without_gradient():
    ps = params(a=np.ones(2), b=np.ones(2))
    ps["a"].grad = np.ones(2)
    ps["b"].grad = None
    moved = SGD(ps, momentum=0.0, weight_decay=0.0).step(0.1)
    assert moved == 2
    np.testing.assert_array_equal(ps["b"].data, np.ones(2))


def test_sgd_shape_mismatch():
    ps = params(p=np.ones(2))
    with pytest.raises(ValueError):
        sgd_momentum_step(ps, {"p": np.ones(3)}, lr=0.1)


@pytest.mark.parametrize("epoch,lr", [(0, 0.1), (170, 0.001), (190, 1e-5)])
def test_lr_schedule_examples(epoch, lr):
    s = LrSchedule(0.1, (160, 180), 0.01)
    assert lr_at_epoch(s, epoch) == pytest.approx(lr, rel=1e-12)


@given(
    st.lists(st.integers(0, 100), max_size=4, unique=True).map(sorted),
    st.floats(0.01, 0.99),
)
def test_lr_nonincreasing_with_len_milestones_jumps(ms, factor):
    s = LrSchedule(0.1, tuple(ms), factor)
    lrs = [lr_at_epoch(s, e) for e in range(120)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    jumps = sum(1 for a, b in zip(lrs, lrs[1:]) if b != a)
    assert jumps == len(ms) - sum(1 for m in ms if m == 0)


def test_lr_schedule_validation():
    with pytest.raises(ValueError):
        LrSchedule(0.1, (20, 10))
    with pytest.raises(ValueError):
        LrSchedule(-1.0)
    with pytest.raises(ValueError):
        lr_at_epoch(LrSchedule(), -1)


# ------------------------------------------------------------------ ParamSet


def test_paramset_keys_fixed_after_seal():
    ps = params(w=np.ones(2))
    with pytest.raises(KeyError):
        ps.add("v", np.ones(2))


def test_paramset_tags_and_trainable():
    ps = ParamSet()
    ps.add("bb", np.ones(3), "backbone")
    ps.add("cls", np.ones(2), "classifier")
    ps.seal()
    ps.set_trainable(("classifier",))
    assert ps.trainable_keys() == ["cls"]
    assert ps.numel(("backbone",)) == 3


def test_determinism_same_seed_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        ps = ParamSet()
        ps.add("w", rng.standard_normal((4, 3)).astype(np.float32))
        x = Tensor(rng.standard_normal((5, 3)).astype(np.float32))
        opt = SGD(ps)
        for _ in range(5):
            ps.zero_grad()
            backward(ops.sum_all(ops.square(ops.linear(x, ps["w"]))))
            opt.step(0.01)
        return ps["w"].data.tobytes()

    assert run() == run()
