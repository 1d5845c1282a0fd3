import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from imbnas.core import Tensor, grad_map
from imbnas.losses import (
    LossConfig,
    cross_entropy,
    effective_number_weights,
    weighted_cross_entropy,
    weights_at_epoch,
)

# (1 - b) / (1 - b**n) for b = 0.9999, evaluated with 50-digit decimal arithmetic.
ORACLE_500 = 0.0020503166684719569994
ORACLE_5 = 0.20004000400019999600
# ln(1 + e^-10), same method.
ORACLE_LN1P = 4.5398899216864646769e-05


def test_weights_closed_form_oracle():
    w = effective_number_weights([500, 5], 0.9999)
    assert w.dtype == np.float64
    assert abs(w[0] - ORACLE_500) <= 1e-12
    assert abs(w[1] - ORACLE_5) <= 1e-12
    # the approximate values quoted for this example
    assert w[0] == pytest.approx(0.002051, rel=1e-3)
    assert w[1] == pytest.approx(0.20005, rel=1e-3)
    assert w[1] / w[0] == pytest.approx(97.5, rel=1e-3)


@given(st.floats(0.0, 0.99999), st.lists(st.integers(1, 5000), min_size=1, max_size=20))
def test_weights_match_formula(beta, counts):
    w = effective_number_weights(counts, beta)
    n = np.asarray(counts, dtype=np.float64)
    np.testing.assert_allclose(w, (1 - beta) / (1 - beta**n), rtol=1e-12, atol=0)


@given(st.floats(0.0, 0.99999))
def test_single_sample_class_weight_is_one(beta):
    assert effective_number_weights([1, 1, 1], beta).tolist() == [1.0, 1.0, 1.0]


def test_beta_zero_gives_ones():
    assert effective_number_weights([500, 50, 5], 0.0).tolist() == [1.0, 1.0, 1.0]


def test_beta_one_rejected():
    with pytest.raises(ValueError):
        effective_number_weights([10, 5], 1.0)


def test_zero_count_rejected():
    with pytest.raises(ValueError):
        effective_number_weights([10, 0], 0.9)


def test_normalized_weights_sum_to_num_classes():
    w = effective_number_weights([500, 100, 20, 5], 0.9999, normalize=True)
    assert w.sum() == pytest.approx(4.0, rel=1e-14)


def test_weights_strictly_decreasing_in_count():
    counts = np.arange(1, 200)
    w = effective_number_weights(counts, 0.99)
    assert np.all(np.diff(w) < 0)


def test_beta_near_one_approaches_inverse_frequency():
    counts = np.array([1000, 700, 300, 120, 40, 9, 1])
    w = effective_number_weights(counts, 1 - 1e-6)
    inv = 1.0 / counts
    w, inv = w / w.sum(), inv / inv.sum()
    assert np.max(np.abs(w / inv - 1)) <= 0.01


@pytest.mark.parametrize(
    "epoch,weighted", [(159, False), (160, True), (200, True)]
)
def test_drw_switch_inclusive(epoch, weighted):
    cfg = LossConfig(beta=0.9999, drw_epoch=160, normalize=False)
    w = weights_at_epoch(epoch, cfg, [500, 5])
    if weighted:
        np.testing.assert_array_equal(w, effective_number_weights([500, 5], 0.9999))
    else:
        assert w.tolist() == [1.0, 1.0]


def test_drw_zero_is_reweighting_from_start():
    cfg = LossConfig(drw_epoch=0)
    for e in (0, 1, 50):
        assert not np.all(weights_at_epoch(e, cfg, [100, 10]) == 1.0)


def test_no_drw_is_always_uniform():
    assert weights_at_epoch(10**6, LossConfig(drw_epoch=None), [100, 1]).tolist() == [1.0, 1.0]


def test_loss_config_rejects_bad_beta():
    with pytest.raises(ValueError):
        LossConfig(beta=1.0)


@pytest.mark.parametrize("c", [2, 5, 10, 100])
def test_uniform_logits_give_log_c(c):
    loss = cross_entropy(Tensor(np.zeros((3, c))), [0, 1, c - 1])
    assert float(loss.data) == pytest.approx(math.log(c), rel=1e-14)


def test_confident_logit_value():
    loss = weighted_cross_entropy(Tensor(np.array([[10.0, 0.0]])), [0], [1.0, 1.0])
    assert float(loss.data) == pytest.approx(ORACLE_LN1P, rel=1e-9)


def test_single_sample_weight_cancels():
    z = Tensor(np.array([[0.3, -1.2, 2.0]]))
    a = weighted_cross_entropy(z, [2], [1.0, 1.0, 2.0])
    b = weighted_cross_entropy(z, [2], [1.0, 1.0, 1.0])
    assert float(a.data) == pytest.approx(float(b.data), rel=1e-15)


@given(st.integers(1, 16), st.integers(2, 8), st.floats(0.1, 10.0), st.integers(0, 2**31))
def test_equal_weights_bit_identical_to_ce(b, c, wval, seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((b, c)) * 3
    y = rng.integers(0, c, b)
    a = weighted_cross_entropy(Tensor(z), y, np.full(c, wval))
    u = cross_entropy(Tensor(z), y)
    assert a.data.tobytes() == u.data.tobytes()
    za, zu = Tensor(z, requires_grad=True), Tensor(z, requires_grad=True)
    ga = grad_map(weighted_cross_entropy(za, y, np.full(c, wval)), {"z": za})["z"]
    gu = grad_map(cross_entropy(zu, y), {"z": zu})["z"]
    assert ga.tobytes() == gu.tobytes()


def test_weighted_mean_denominator():
    z = np.array([[2.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    y = np.array([0, 0, 1])
    w = np.array([1.0, 3.0])
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = -logp[np.arange(3), y]
    sw = w[y]
    ref = (sw * nll).sum() / sw.sum()
    assert float(weighted_cross_entropy(Tensor(z), y, w).data) == pytest.approx(ref, rel=1e-14)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        weighted_cross_entropy(Tensor(np.zeros((0, 3))), np.zeros(0, dtype=int), None)


def test_bad_labels_rejected():
    with pytest.raises(ValueError):
        weighted_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3], None)
