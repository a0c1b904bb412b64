"""Heavy-ball SGD against a hand-unrolled recurrence, and the polynomial
learning-rate schedule at its pinned points."""

import numpy as np
import pytest

from cpslab.errors import ArgumentError, DimensionError
from cpslab.optim import SgdMomentum, poly_lr
from cpslab.tensor import Tensor


def test_zero_lr_keeps_params_but_updates_buffers(rng):
    p = Tensor(rng.normal(size=(3,)), requires_grad=True)
    before = p.data.copy()
    opt = SgdMomentum([p], momentum=0.9, weight_decay=0.0)
    g = rng.normal(size=(3,))
    opt.step([g], lr=0.0)
    assert np.array_equal(p.data, before)
    assert np.array_equal(opt.buffers[0], g)


def test_vanilla_sgd_without_momentum_or_decay(rng):
    p = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    before = p.data.copy()
    g = rng.normal(size=(2, 2))
    SgdMomentum([p], momentum=0.0, weight_decay=0.0).step([g], lr=0.1)
    assert np.allclose(p.data, before - 0.1 * g, atol=1e-15)


def test_two_steps_match_hand_unrolled_recurrence(rng):
    """buf1 = g1 + wd*p0; p1 = p0 - lr*buf1;
    buf2 = m*buf1 + g2 + wd*p1; p2 = p1 - lr*buf2."""
    m, wd, lr = 0.9, 0.0005, 0.05
    p0 = rng.normal(size=(4,))
    g1 = rng.normal(size=(4,))
    g2 = rng.normal(size=(4,))

    buf1 = g1 + wd * p0
    p1 = p0 - lr * buf1
    buf2 = m * buf1 + g2 + wd * p1
    p2 = p1 - lr * buf2

    p = Tensor(p0.copy(), requires_grad=True)
    opt = SgdMomentum([p], momentum=m, weight_decay=wd)
    opt.step([g1], lr=lr)
    assert np.array_equal(p.data, p1)
    opt.step([g2], lr=lr)
    assert np.array_equal(p.data, p2)
    assert np.array_equal(opt.buffers[0], buf2)


def test_momentum_accelerates_constant_gradient():
    # with a constant gradient the buffer converges to g/(1-m), so the
    # effective step grows past the vanilla one
    p = Tensor(np.zeros(1), requires_grad=True)
    opt = SgdMomentum([p], momentum=0.9, weight_decay=0.0)
    g = np.ones(1)
    for _ in range(50):
        opt.step([g], lr=0.01)
    assert opt.buffers[0][0] == pytest.approx(1.0 / (1.0 - 0.9), rel=1e-2)


def test_step_validation_errors(rng):
    p = Tensor(np.zeros((2, 2)), requires_grad=True)
    opt = SgdMomentum([p])
    with pytest.raises(ArgumentError):
        opt.step([np.zeros((2, 2))], lr=-1.0)
    with pytest.raises(DimensionError):
        opt.step([np.zeros((2, 2)), np.zeros(1)], lr=0.1)
    with pytest.raises(DimensionError):
        opt.step([np.zeros(3)], lr=0.1)


def test_same_seed_same_trajectory():
    def run():
        r = np.random.default_rng(7)
        p = Tensor(r.normal(size=(5,)), requires_grad=True)
        opt = SgdMomentum([p], momentum=0.9, weight_decay=0.0005)
        for i in range(10):
            opt.step([r.normal(size=(5,))], lr=poly_lr(0.1, i, 10))
        return p.data.copy()

    assert np.array_equal(run(), run())


def test_poly_lr_identity_at_iteration_zero():
    assert poly_lr(0.04, 0, 1000) == 0.04


def test_poly_lr_zero_at_final_iteration():
    assert poly_lr(0.123, 1000, 1000) == 0.0


def test_poly_lr_midpoint_value():
    assert poly_lr(0.01, 500, 1000) == pytest.approx(0.01 * 0.5 ** 0.9, rel=1e-12)


def test_poly_lr_power_exponent():
    assert poly_lr(1.0, 250, 1000, power=2.0) == pytest.approx(0.75 ** 2, rel=1e-12)


def test_poly_lr_is_monotone_decreasing():
    values = [poly_lr(0.1, i, 100) for i in range(101)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_poly_lr_rejects_out_of_range_iteration():
    with pytest.raises(ArgumentError):
        poly_lr(0.1, 1001, 1000)
    with pytest.raises(ArgumentError):
        poly_lr(0.1, -1, 1000)
    with pytest.raises(ArgumentError):
        poly_lr(0.1, 0, 0)
