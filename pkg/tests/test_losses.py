"""Loss functions against scalar-loop oracles, hand arithmetic at the pinned
points, and the stop-gradient contract of pseudo-label exchange."""

import numpy as np
import pytest

import cpslab.tensor as T
from cpslab.errors import ConfigError, DataError, DimensionError
from cpslab.losses import (IGNORE_INDEX, GroundTruthMap, LossBreakdown,
                           confidence_map, cpc_loss, cps_loss,
                           cps_loss_labeled, ohem_ce, pixel_ce, pseudo_label,
                           sps_loss, supervision_loss, total_loss)
from cpslab.tensor import Tensor

from conftest import max_rel_err, numeric_grads


def random_map(rng, shape=(2, 3, 4, 4), scale=2.0):
    return confidence_map(Tensor(rng.normal(size=shape) * scale))


def onehot_map(labels, K, confidence=40.0):
    """Near-one-hot confidence map built from spiked logits."""
    B, H, W = labels.shape
    logits = np.zeros((B, K, H, W))
    b, h, w = np.indices(labels.shape)
    logits[b, labels, h, w] = confidence
    return confidence_map(Tensor(logits))


# ---------------------------------------------------------------------------
# scalar-loop oracles


def softmax_pixelwise(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def pixel_ce_oracle(logp, labels, ignore=IGNORE_INDEX):
    total, count = 0.0, 0
    B, K, H, W = logp.shape
    for b in range(B):
        for h in range(H):
            for w in range(W):
                t = labels[b, h, w]
                if t == ignore:
                    continue
                total += -logp[b, t, h, w]
                count += 1
    return total / count


def cps_oracle(logits1, logits2):
    lp1 = np.log(softmax_pixelwise(logits1))
    lp2 = np.log(softmax_pixelwise(logits2))
    y1 = logits1.argmax(axis=1)
    y2 = logits2.argmax(axis=1)
    return pixel_ce_oracle(lp1, y2) + pixel_ce_oracle(lp2, y1)


def cpc_oracle(logits1, logits2):
    p1 = softmax_pixelwise(logits1)
    p2 = softmax_pixelwise(logits2)
    B, K, H, W = p1.shape
    total = 0.0
    for b in range(B):
        for h in range(H):
            for w in range(W):
                d = ((p1[b, :, h, w] - p2[b, :, h, w]) ** 2).sum()
                total += 2.0 * d  # both directions as written
    return total / (B * H * W)


def ohem_oracle(logp, labels, threshold, min_kept, ignore=IGNORE_INDEX):
    flat = []
    B, K, H, W = logp.shape
    for b in range(B):
        for h in range(H):
            for w in range(W):
                t = labels[b, h, w]
                if t == ignore:
                    continue
                flat.append((np.exp(logp[b, t, h, w]), -logp[b, t, h, w]))
    hard = [ce for p, ce in flat if p < threshold]
    if len(hard) < min_kept:
        flat.sort(key=lambda pc: pc[0])
        hard = [ce for _, ce in flat[:min(min_kept, len(flat))]]
    return sum(hard) / len(hard)


# ---------------------------------------------------------------------------
# confidence maps and pseudo labels


def test_confidence_map_is_valid_softmax(rng):
    cmap = random_map(rng, scale=10.0)
    cmap.validate()
    assert np.abs(cmap.probs.data.sum(axis=1) - 1.0).max() < 1e-9


def test_pseudo_label_matches_brute_force_argmax(rng):
    logits = rng.normal(size=(2, 4, 5, 5))
    labels = pseudo_label(confidence_map(Tensor(logits))).labels
    B, K, H, W = logits.shape
    for b in range(B):
        for h in range(H):
            for w in range(W):
                best = max(range(K), key=lambda k: logits[b, k, h, w])
                assert labels[b, h, w] == best


def test_pseudo_label_single_pixel_example():
    logits = np.log(np.array([0.1, 0.7, 0.2])).reshape(1, 3, 1, 1)
    assert pseudo_label(confidence_map(Tensor(logits))).labels[0, 0, 0] == 1


def test_pseudo_label_tie_breaks_to_lowest_class():
    uniform = confidence_map(Tensor(np.zeros((1, 4, 2, 2))))
    assert np.array_equal(pseudo_label(uniform).labels, np.zeros((1, 2, 2)))


# ---------------------------------------------------------------------------
# pixel cross-entropy


def test_pixel_ce_uniform_is_log_k():
    logp = T.log_softmax_channels(Tensor(np.zeros((1, 4, 3, 3))))
    labels = np.zeros((1, 3, 3), dtype=np.int64)
    assert pixel_ce(logp, labels).item() == pytest.approx(np.log(4.0), abs=1e-12)


def test_pixel_ce_confident_correct_is_near_zero(rng):
    labels = rng.integers(0, 4, size=(1, 3, 3))
    cmap = onehot_map(labels, K=4)
    assert pixel_ce(cmap.logp, labels).item() < 1e-8


def test_pixel_ce_matches_loop_oracle(rng):
    logp = T.log_softmax_channels(Tensor(rng.normal(size=(2, 3, 4, 4)) * 2))
    labels = rng.integers(0, 3, size=(2, 4, 4))
    labels[0, 0, 0] = IGNORE_INDEX
    got = pixel_ce(logp, labels).item()
    want = pixel_ce_oracle(logp.data, labels)
    assert got == pytest.approx(want, abs=1e-10)


def test_pixel_ce_all_ignored_warns_and_returns_zero():
    logp = T.log_softmax_channels(Tensor(np.zeros((1, 3, 2, 2))))
    labels = np.full((1, 2, 2), IGNORE_INDEX, dtype=np.int64)
    with pytest.warns(RuntimeWarning):
        assert pixel_ce(logp, labels).item() == 0.0


def test_pixel_ce_rejects_out_of_range_labels():
    logp = T.log_softmax_channels(Tensor(np.zeros((1, 3, 2, 2))))
    labels = np.full((1, 2, 2), 3, dtype=np.int64)  # K == 3
    with pytest.raises(DataError):
        pixel_ce(logp, labels)
    with pytest.raises(DimensionError):
        pixel_ce(logp, np.zeros((1, 3, 3), dtype=np.int64))


def test_ground_truth_map_validation():
    gt = GroundTruthMap(np.array([[[0, 4]]], dtype=np.int64))
    with pytest.raises(DataError):
        gt.validate(num_classes=4)
    GroundTruthMap(np.array([[[0, IGNORE_INDEX]]])).validate(num_classes=4)


# ---------------------------------------------------------------------------
# supervision loss


def test_supervision_loss_uniform_is_two_log_k():
    uniform = confidence_map(Tensor(np.zeros((1, 4, 2, 2))))
    gt = GroundTruthMap(np.zeros((1, 2, 2), dtype=np.int64))
    got = supervision_loss(uniform, uniform, gt).item()
    assert got == pytest.approx(2 * np.log(4.0), abs=1e-12)


def test_supervision_loss_is_symmetric(rng):
    p1, p2 = random_map(rng), random_map(rng)
    gt = GroundTruthMap(rng.integers(0, 3, size=(2, 4, 4)))
    a = supervision_loss(p1, p2, gt).item()
    b = supervision_loss(p2, p1, gt).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_supervision_loss_matches_loop_oracle(rng):
    z1 = rng.normal(size=(2, 3, 4, 4))
    z2 = rng.normal(size=(2, 3, 4, 4))
    labels = rng.integers(0, 3, size=(2, 4, 4))
    got = supervision_loss(confidence_map(Tensor(z1)),
                           confidence_map(Tensor(z2)),
                           GroundTruthMap(labels)).item()
    want = pixel_ce_oracle(np.log(softmax_pixelwise(z1)), labels) \
        + pixel_ce_oracle(np.log(softmax_pixelwise(z2)), labels)
    assert got == pytest.approx(want, abs=1e-10)


# ---------------------------------------------------------------------------
# cross pseudo supervision


def test_cps_loss_vanishes_at_confident_agreement(rng):
    labels = rng.integers(0, 4, size=(2, 3, 3))
    p = onehot_map(labels, K=4)
    assert cps_loss(p, p).item() < 1e-8


def test_cps_loss_uniform_vs_onehot_hand_value():
    """p1 uniform (K=4) taught by p2's class-2 map costs ln 4; p2, nearly
    one-hot on class 2 but taught the tie-broken class 0, costs the full
    confidence gap M + log1p(3 e^-M)."""
    M = 27.6  # e^-M near the documented 1e-12 floor
    p1 = confidence_map(Tensor(np.zeros((1, 4, 2, 2))))
    logits2 = np.zeros((1, 4, 2, 2))
    logits2[:, 2] = M
    p2 = confidence_map(Tensor(logits2))
    want = np.log(4.0) + (M + np.log1p(3 * np.exp(-M)))
    assert cps_loss(p1, p2).item() == pytest.approx(want, rel=1e-12)


def test_cps_loss_is_symmetric(rng):
    p1, p2 = random_map(rng), random_map(rng)
    assert cps_loss(p1, p2).item() == pytest.approx(
        cps_loss(p2, p1).item(), abs=1e-12)


def test_cps_loss_matches_loop_oracle(rng):
    z1 = rng.normal(size=(2, 3, 4, 4)) * 2
    z2 = rng.normal(size=(2, 3, 4, 4)) * 2
    got = cps_loss(confidence_map(Tensor(z1)),
                   confidence_map(Tensor(z2))).item()
    assert got == pytest.approx(cps_oracle(z1, z2), abs=1e-10)


def test_cps_loss_labeled_is_same_formula(rng):
    z1 = rng.normal(size=(2, 3, 4, 4))
    z2 = rng.normal(size=(2, 3, 4, 4))
    a = cps_loss(confidence_map(Tensor(z1)), confidence_map(Tensor(z2))).item()
    b = cps_loss_labeled(confidence_map(Tensor(z1)),
                         confidence_map(Tensor(z2))).item()
    assert a == b


def test_cps_loss_is_nonnegative(rng):
    for _ in range(10):
        p1, p2 = random_map(rng), random_map(rng)
        assert cps_loss(p1, p2).item() >= 0.0


def test_cps_gradient_stops_at_pseudo_labels(rng):
    """d(cps)/d(z1) must equal the gradient of ce(p1, const y2) alone: the
    pseudo-label path out of z1 (teaching p2) carries no gradient."""
    z1 = rng.normal(size=(1, 3, 3, 3))
    z2 = rng.normal(size=(1, 3, 3, 3))
    t1, t2 = Tensor(z1), Tensor(z2)
    with T.Tape() as tape:
        tape.watch(t1)
        tape.watch(t2)
        loss = cps_loss(confidence_map(t1), confidence_map(t2))
    tape.backward(loss)
    g1_full = tape.grad(t1)

    y2_const = softmax_pixelwise(z2).argmax(axis=1)
    t1b = Tensor(z1)
    with T.Tape() as tape2:
        tape2.watch(t1b)
        loss_const = pixel_ce(T.log_softmax_channels(t1b), y2_const)
    tape2.backward(loss_const)
    g1_const = tape2.grad(t1b)

    assert np.abs(g1_full - g1_const).max() < 1e-12

    # and the detached construction itself agrees with finite differences
    num = numeric_grads(
        lambda z: pixel_ce(T.log_softmax_channels(Tensor(z)), y2_const).item(),
        [z1])[0]
    assert max_rel_err(g1_full, num) < 1e-7


# ---------------------------------------------------------------------------
# cross probability consistency


def test_cpc_loss_zero_for_identical_maps(rng):
    p = random_map(rng)
    q = confidence_map(Tensor(p.logp.data.copy() * 0))  # rebuild uniform
    assert cpc_loss(p, p).item() == 0.0
    assert cpc_loss(q, q).item() == 0.0


def test_cpc_loss_orthogonal_onehots_corner_value():
    # per pixel p1=[1,0], p2=[0,1]: both-direction squared distance is 4
    lodds = 60.0
    z1 = np.zeros((1, 2, 1, 1))
    z1[:, 0] = lodds
    z2 = np.zeros((1, 2, 1, 1))
    z2[:, 1] = lodds
    got = cpc_loss(confidence_map(Tensor(z1)), confidence_map(Tensor(z2))).item()
    assert got == pytest.approx(4.0, rel=1e-9)


def test_cpc_loss_matches_loop_oracle(rng):
    z1 = rng.normal(size=(2, 3, 4, 4)) * 2
    z2 = rng.normal(size=(2, 3, 4, 4)) * 2
    got = cpc_loss(confidence_map(Tensor(z1)),
                   confidence_map(Tensor(z2))).item()
    assert got == pytest.approx(cpc_oracle(z1, z2), abs=1e-10)


def test_cpc_loss_is_symmetric_and_nonnegative(rng):
    p1, p2 = random_map(rng), random_map(rng)
    a, b = cpc_loss(p1, p2).item(), cpc_loss(p2, p1).item()
    assert a == pytest.approx(b, abs=1e-12) and a >= 0.0


# ---------------------------------------------------------------------------
# OHEM


def test_ohem_with_permissive_threshold_equals_pixel_ce(rng):
    logp = T.log_softmax_channels(Tensor(rng.normal(size=(1, 3, 4, 4))))
    labels = rng.integers(0, 3, size=(1, 4, 4))
    got = ohem_ce(logp, labels, threshold=1 - 1e-12, min_kept=1).item()
    assert got == pytest.approx(pixel_ce(logp, labels).item(), abs=1e-12)


def test_ohem_confident_predictions_keep_hardest_pixel(rng):
    labels = rng.integers(0, 4, size=(1, 3, 3))
    cmap = onehot_map(labels, K=4, confidence=40.0)
    # every pixel confident-correct: fall back to the single hardest one
    got = ohem_ce(cmap.logp, labels, threshold=0.7, min_kept=1).item()
    p_true = np.exp(cmap.logp.data)[
        np.indices(labels.shape)[0], labels,
        np.indices(labels.shape)[1], np.indices(labels.shape)[2]]
    want = -np.log(p_true.min())
    assert got == pytest.approx(want, rel=1e-9)


def test_ohem_matches_sort_based_oracle(rng):
    logp = T.log_softmax_channels(Tensor(rng.normal(size=(2, 3, 4, 4)) * 2))
    labels = rng.integers(0, 3, size=(2, 4, 4))
    labels[1, 2, 2] = IGNORE_INDEX
    for threshold, min_kept in [(0.7, 1), (0.5, 5), (0.05, 8), (0.9, 40)]:
        got = ohem_ce(logp, labels, threshold=threshold, min_kept=min_kept).item()
        want = ohem_oracle(logp.data, labels, threshold, min_kept)
        assert got == pytest.approx(want, abs=1e-10), (threshold, min_kept)


def test_ohem_rejects_bad_hyperparameters(rng):
    logp = T.log_softmax_channels(Tensor(np.zeros((1, 3, 2, 2))))
    labels = np.zeros((1, 2, 2), dtype=np.int64)
    from cpslab.errors import ArgumentError
    with pytest.raises(ArgumentError):
        ohem_ce(logp, labels, threshold=1.0)
    with pytest.raises(ArgumentError):
        ohem_ce(logp, labels, threshold=0.7, min_kept=0)


# ---------------------------------------------------------------------------
# single-network pseudo supervision


def test_sps_loss_near_one_hot_is_near_zero(rng):
    labels = rng.integers(0, 4, size=(1, 3, 3))
    assert sps_loss(onehot_map(labels, K=4)).item() < 1e-8


def test_sps_loss_uniform_is_log_k():
    uniform = confidence_map(Tensor(np.zeros((1, 4, 2, 2))))
    assert sps_loss(uniform).item() == pytest.approx(np.log(4.0), abs=1e-12)


def test_sps_loss_matches_loop_oracle(rng):
    z = rng.normal(size=(2, 3, 4, 4)) * 2
    got = sps_loss(confidence_map(Tensor(z))).item()
    lp = np.log(softmax_pixelwise(z))
    want = pixel_ce_oracle(lp, z.argmax(axis=1))
    assert got == pytest.approx(want, abs=1e-10)


# ---------------------------------------------------------------------------
# total loss


def test_total_loss_lambda_zero_returns_supervised_term_unchanged():
    l_s = Tensor(1.23)
    out = total_loss(l_s, lam=0.0)
    assert out is l_s  # bit-identical reduction, not merely equal


def test_total_loss_arithmetic():
    got = total_loss(Tensor(1.0), Tensor(0.5), Tensor(0.5), lam=1.5)
    assert got.item() == pytest.approx(2.5, abs=1e-15)
    got6 = total_loss(Tensor(2.0), Tensor(0.25), Tensor(0.75), lam=6.0)
    assert got6.item() == pytest.approx(2.0 + 6.0 * 1.0, abs=1e-12)


def test_total_loss_rejects_negative_lambda_and_missing_terms():
    with pytest.raises(ConfigError):
        total_loss(Tensor(1.0), lam=-0.1)
    with pytest.raises(ConfigError):
        total_loss(Tensor(1.0), None, None, lam=1.0)


def test_loss_breakdown_total_identity(rng):
    parts = LossBreakdown.build(l_s=0.9, l_cps_labeled=0.2,
                                l_cps_unlabeled=0.3, lam=1.5)
    assert parts.total == pytest.approx(0.9 + 1.5 * 0.5, abs=1e-15)
