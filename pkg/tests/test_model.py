"""Segmentation network: shape contract, seeded determinism, a hand-computed
parameter-count oracle, full-network gradient check, the two-network
construction, EMA updates, and checkpoint round-trips."""

import numpy as np
import pytest

import cpslab.tensor as T
from cpslab.errors import ArgumentError, ConfigError, DimensionError
from cpslab.model import (SegNetConfig, build_segnet, ema_update, init_dual,
                          load_checkpoint, save_checkpoint)
from cpslab.optim import SgdMomentum

from conftest import max_rel_err, numeric_grads


def small_config(**kw):
    base = dict(in_channels=3, num_classes=5, widths=(8, 16), depth=2, seed=0)
    base.update(kw)
    return SegNetConfig(**base)


def test_same_seed_gives_bitwise_identical_parameters():
    a = build_segnet(small_config(seed=42))
    b = build_segnet(small_config(seed=42))
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)


def test_different_seeds_give_different_parameters():
    a = build_segnet(small_config(seed=1))
    b = build_segnet(small_config(seed=2))
    assert any(not np.array_equal(a.params[k].data, b.params[k].data)
               for k in a.params)


def test_forward_shape_contract(rng):
    net = build_segnet(small_config())
    out = net.forward(rng.normal(size=(2, 3, 32, 32)))
    assert out.shape == (2, 5, 32, 32)


def test_output_resolution_equals_input_resolution(rng):
    net = build_segnet(small_config())
    for H, W in [(16, 16), (32, 48), (64, 64)]:
        out = net.forward(rng.normal(size=(1, 3, H, W)))
        assert out.shape == (1, 5, H, W)


def test_parameter_count_matches_hand_computed_total():
    """widths=(8,16), K=4, in=3: layer-by-layer size bookkeeping.

    encoder: conv3x3 3->8 (216+8), norm (8+8); conv3x3 8->16 (1152+16),
    norm (16+16). decoder mirrors back through width 8: conv3x3 16->8
    (1152+8), norm (8+8); conv3x3 8->8 (576+8), norm (8+8). head: conv1x1
    8->4 (32+4).
    """
    expected = (216 + 8) + (8 + 8) + (1152 + 16) + (16 + 16) \
        + (1152 + 8) + (8 + 8) + (576 + 8) + (8 + 8) + (32 + 4)
    net = build_segnet(small_config(num_classes=4))
    total = sum(p.data.size for p in net.parameters())
    assert total == expected


def test_parameter_count_is_pure_function_of_config():
    a = build_segnet(small_config(seed=3))
    b = build_segnet(small_config(seed=99))
    assert [p.data.shape for p in a.parameters()] \
        == [p.data.shape for p in b.parameters()]


def test_forward_is_deterministic(rng):
    net = build_segnet(small_config())
    x = rng.normal(size=(2, 3, 16, 16))
    assert np.array_equal(net.forward(x).data, net.forward(x).data)


def test_zero_input_with_zero_head_gives_zero_logits():
    net = build_segnet(small_config())
    net.params["head.weight"].data[:] = 0.0
    out = net.forward(np.zeros((1, 3, 16, 16)))
    assert np.array_equal(out.data, np.zeros((1, 5, 16, 16)))


def test_forward_rejects_indivisible_spatial_size():
    net = build_segnet(small_config())
    with pytest.raises(ArgumentError):
        net.forward(np.zeros((1, 3, 30, 32)))


def test_forward_rejects_wrong_channel_count():
    net = build_segnet(small_config())
    with pytest.raises(DimensionError):
        net.forward(np.zeros((1, 4, 32, 32)))


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        SegNetConfig(num_classes=1).validate()
    with pytest.raises(ConfigError):
        SegNetConfig(widths=()).validate()
    with pytest.raises(ConfigError):
        SegNetConfig(widths=(8, 0), depth=2).validate()
    with pytest.raises(ConfigError):
        SegNetConfig(widths=(8, 16), depth=3).validate()


def test_full_network_gradient_matches_finite_differences(rng):
    """End-to-end check through conv/norm/relu/upsample/log-softmax."""
    cfg = SegNetConfig(in_channels=2, num_classes=3, widths=(3, 4),
                       depth=2, seed=5)
    net = build_segnet(cfg)
    x = rng.normal(size=(1, 2, 8, 8))
    weights = rng.normal(size=(1, 3, 8, 8))
    names = list(net.params)

    with T.Tape() as tape:
        loss = T.sum_all(T.scale(T.log_softmax_channels(net.forward(x)),
                                 weights))
    tape.backward(loss)
    analytic = [tape.grad(net.params[n]) for n in names]

    def f(*arrays):
        probe = build_segnet(cfg)
        probe.load_values(dict(zip(names, arrays)))
        out = T.log_softmax_channels(probe.forward(x))
        return float((out.data * weights).sum())

    numeric = numeric_grads(f, [net.params[n].data.copy() for n in names],
                            eps=1e-5)
    worst = max(max_rel_err(a, n) for a, n in zip(analytic, numeric))
    assert worst < 1e-4, f"worst relative error {worst:.3e}"


# ---------------------------------------------------------------------------
# two-network construction


def test_init_dual_equal_shapes_unequal_values():
    dual = init_dual(small_config(), 7, 8)
    for k in dual.net1.params:
        p1, p2 = dual.net1.params[k], dual.net2.params[k]
        assert p1.data.shape == p2.data.shape
    assert any(not np.array_equal(dual.net1.params[k].data,
                                  dual.net2.params[k].data)
               for k in dual.net1.params)


def test_init_dual_rejects_equal_seeds():
    with pytest.raises(ArgumentError):
        init_dual(small_config(), 7, 7)


def test_init_dual_weights_differ_in_every_layer():
    """Sampled seed pairs: each conv weight layer differs somewhere."""
    rng = np.random.default_rng(0)
    for _ in range(100):
        s1, s2 = rng.integers(0, 2**31, size=2)
        if s1 == s2:
            s2 += 1
        dual = init_dual(small_config(widths=(4, 8)), int(s1), int(s2))
        for k, p1 in dual.net1.params.items():
            if k.endswith("weight"):
                diff = np.abs(p1.data - dual.net2.params[k].data).max()
                assert diff > 0, f"layer {k} identical for seeds {s1},{s2}"


def test_dual_networks_stay_distinct_after_identical_step(rng):
    dual = init_dual(small_config(widths=(4, 8)), 1, 2)
    x = rng.normal(size=(2, 3, 16, 16))
    for net in (dual.net1, dual.net2):
        opt = SgdMomentum(net.parameters())
        with T.Tape() as tape:
            loss = T.mean_all(net.forward(x))
        tape.backward(loss)
        opt.step([tape.grad(p) for p in net.parameters()], lr=0.1)
    assert any(not np.array_equal(dual.net1.params[k].data,
                                  dual.net2.params[k].data)
               for k in dual.net1.params)


# ---------------------------------------------------------------------------
# EMA


def test_ema_alpha_zero_copies_student():
    teacher = build_segnet(small_config(seed=1))
    student = build_segnet(small_config(seed=2))
    ema_update(teacher, student, 0.0)
    for k in teacher.params:
        assert np.array_equal(teacher.params[k].data, student.params[k].data)


def test_ema_identical_nets_are_a_fixed_point():
    teacher = build_segnet(small_config(seed=1))
    student = build_segnet(small_config(seed=1))
    before = {k: p.data.copy() for k, p in teacher.params.items()}
    ema_update(teacher, student, 0.99)
    for k in teacher.params:
        assert np.allclose(teacher.params[k].data, before[k], atol=1e-15)


def test_three_ema_updates_match_hand_unrolled_recurrence():
    teacher = build_segnet(small_config(seed=1))
    student = build_segnet(small_config(seed=2))
    t0 = {k: p.data.copy() for k, p in teacher.params.items()}
    s = {k: p.data.copy() for k, p in student.params.items()}
    a = 0.99
    expected = t0
    for _ in range(3):
        expected = {k: a * expected[k] + (1 - a) * s[k] for k in expected}
        ema_update(teacher, student, a)
    for k in teacher.params:
        assert np.allclose(teacher.params[k].data, expected[k], atol=1e-15)


def test_ema_rejects_alpha_one_and_shape_mismatch():
    teacher = build_segnet(small_config())
    student = build_segnet(small_config(seed=9))
    with pytest.raises(ArgumentError):
        ema_update(teacher, student, 1.0)
    other = build_segnet(small_config(widths=(4, 8)))
    with pytest.raises(DimensionError):
        ema_update(teacher, other, 0.9)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    net = build_segnet(small_config(seed=11))
    path = save_checkpoint(net, tmp_path / "net.ckpt")
    loaded = load_checkpoint(path)
    assert loaded.config == net.config
    for k in net.params:
        assert np.array_equal(loaded.params[k].data, net.params[k].data)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "bogus.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ArgumentError):
        load_checkpoint(path)
