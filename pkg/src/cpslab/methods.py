"""Training methods: supervised baseline, cross/self pseudo supervision
(with and without CutMix), cross probability consistency, mean teacher,
weak-to-strong pseudo labeling, and self-training.

Every method shares one loop skeleton: the labeled id stream defines the
iterations per epoch, the learning rate follows the polynomial schedule
over the total iteration count, and each epoch ends with a loss probe and
a validation pass. Determinism comes from derived seeds only — batch order
from (data seed, epoch), augmentation from (aug seed, epoch, iteration,
branch) — so the labeled branch's random draws are bitwise independent of
whether any unlabeled branch consumes randomness.

Per-epoch recorded losses are epoch-boundary probe evaluations (full
labeled set plus a fixed unlabeled prefix, no augmentation), which makes
every CSV row a pure function of the checkpointed parameters.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, fields
from enum import Enum
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import (apply_cutmix, mix_pseudo_maps, photometric,
                      sample_cutmix_mask, sample_scale, scale_image,
                      scale_labels, weak_augment)
from .data import (GuardedDataset, PartitionProtocol, batch_iter, derive_seed,
                   generate_toy_dataset, partition)
from .errors import ArgumentError, ConfigError
from .losses import (IGNORE_INDEX, ConfidenceMap, LossBreakdown,
                     PseudoLabelMap, confidence_map, cpc_loss, cps_loss,
                     cps_loss_labeled, ohem_ce, pixel_ce, pseudo_label,
                     sps_loss, total_loss)
from .metrics import ConfusionMatrix, accumulate, miou, overlap_ratio
from .model import (DualNetworks, SegNet, SegNetConfig, build_segnet,
                    ema_update, init_dual)
from .optim import SgdMomentum, poly_lr
from .tensor import Tape, Tensor, stop_recording

__all__ = [
    "MethodKind",
    "TrainConfig",
    "EpochRecord",
    "RunResult",
    "CSV_COLUMNS",
    "train",
    "step_cps",
    "step_cps_cutmix",
    "step_mean_teacher",
    "step_sps",
    "step_pseudoseg_style",
    "cps_forward_losses",
    "cps_cutmix_forward_losses",
    "supervised_forward_losses",
    "sps_forward_losses",
    "pseudoseg_forward_losses",
    "mean_teacher_forward_losses",
    "mt_consistency",
    "evaluate_miou",
    "evaluate_overlap",
    "write_run_dir",
    "format_metrics_csv",
]

logger = logging.getLogger("cpslab")

# stream tags for derived seeds
_TAG_VAL = 0x7A1
_TAG_EPOCH = 0xE0
_TAG_STAGE1 = 0x51

CSV_COLUMNS = ("epoch", "lr", "l_s", "l_cps_l", "l_cps_u", "l_cpc",
               "miou", "overlap")


class MethodKind(str, Enum):
    SUPERVISED = "supervised"
    CPS = "cps"
    CPS_CUTMIX = "cps_cutmix"
    CPC = "cpc"
    MEAN_TEACHER = "mean_teacher"
    SPS = "sps"
    SPS_CUTMIX = "sps_cutmix"
    PSEUDOSEG_STYLE = "pseudoseg_style"
    SELF_TRAINING = "self_training"
    CPS_SELF_TRAINING = "cps_self_training"


DUAL_METHODS = {MethodKind.CPS, MethodKind.CPS_CUTMIX, MethodKind.CPC,
                MethodKind.CPS_SELF_TRAINING}
CUTMIX_METHODS = {MethodKind.CPS_CUTMIX, MethodKind.SPS_CUTMIX}


@dataclass(frozen=True)
class TrainConfig:
    method: MethodKind = MethodKind.CPS
    lam: float = 0.45
    epochs: int = 30
    base_lr: float = 0.5
    batch_labeled: int = 4
    batch_unlabeled: int = 8
    seed_data: int = 0
    seed_net1: int = 1
    seed_net2: int = 2
    seed_aug: int = 3
    ohem: bool = False
    ohem_threshold: float = 0.7
    ema_alpha: float = 0.99
    cps_on_labeled: bool = True
    confidence_threshold: float | None = None
    multiscale_labeled: bool = False
    multiscale_unlabeled: bool = False
    photometric_batches: bool = False
    overlap_exclude_predicted_background: bool = False
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_power: float = 0.9
    # dataset + partition parameters
    n: int = 256
    H: int = 64
    W: int = 64
    num_classes: int = 5
    in_channels: int = 3
    ratio: float = 0.125
    partition_seed: int = 0
    val_n: int = 64
    widths: tuple[int, ...] = (16, 32)
    depth: int = 2

    def __post_init__(self):
        # accept the plain string value; dispatch relies on enum identity
        try:
            object.__setattr__(self, "method", MethodKind(self.method))
        except ValueError as exc:
            raise ConfigError(f"unknown method {self.method!r}") from exc
        object.__setattr__(self, "widths", tuple(self.widths))

    def validate(self) -> list[str]:
        """Raise ConfigError on contract violations; return advisory notes."""
        notes: list[str] = []
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ConfigError("batch sizes must be >= 1, got "
                              f"({self.batch_labeled}, {self.batch_unlabeled})")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.ema_alpha < 1:
            raise ConfigError(f"ema_alpha must be in [0, 1), got {self.ema_alpha}")
        if self.method in DUAL_METHODS and self.seed_net1 == self.seed_net2:
            raise ConfigError(
                f"dual method {self.method.value} requires distinct network "
                f"seeds, got {self.seed_net1} twice")
        if self.method in CUTMIX_METHODS and self.batch_unlabeled % 2:
            raise ConfigError(
                f"{self.method.value} consumes unlabeled batches as pairs; "
                f"batch_unlabeled {self.batch_unlabeled} is odd")
        if self.confidence_threshold is not None and not 0 < self.confidence_threshold < 1:
            raise ConfigError(
                f"confidence_threshold must be in (0, 1), got "
                f"{self.confidence_threshold}")
        if self.val_n < 1:
            raise ConfigError(f"val_n must be >= 1, got {self.val_n}")
        if self.method is MethodKind.SUPERVISED and self.lam > 0:
            note = "supervised method ignores lambda"
            logger.info(note)
            notes.append(note)
        return notes

    def model_config(self, seed: int) -> SegNetConfig:
        return SegNetConfig(in_channels=self.in_channels,
                            num_classes=self.num_classes,
                            widths=tuple(self.widths), depth=self.depth,
                            seed=seed)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    l_s: float
    l_cps_l: float
    l_cps_u: float
    l_cpc: float
    miou: float
    overlap: float | None  # None for single-network methods


@dataclass
class RunResult:
    method: MethodKind
    config: TrainConfig
    records: list[EpochRecord]
    net1: SegNet
    net2: SegNet | None
    guards: dict[str, int]
    notes: list[str]
    wall_time: float


# ---------------------------------------------------------------------------
# batch preparation


def _labeled_batch(dataset: GuardedDataset, ids, rng, *, multiscale: bool,
                   align: int, label_override=None, jitter: bool = False):
    """Stacked (images, labels) with per-image flips; one scale per batch;
    optional per-image photometric jitter (labels stay valid: geometry-free)."""
    scale = sample_scale(rng) if multiscale else 1.0
    imgs, labs = [], []
    for i in ids:
        img = dataset.image(i)
        if label_override is not None and int(i) in label_override:
            lab = label_override[int(i)]
        else:
            lab = dataset.labels(i)
        if scale != 1.0:
            img = scale_image(img, scale, align)
            lab = scale_labels(lab, scale, align)
        img, lab, _ = weak_augment(img, lab, rng)
        if jitter:
            img, _ = photometric(img, rng)
        imgs.append(img)
        labs.append(lab)
    return np.stack(imgs), np.stack(labs)


def _unlabeled_batch(dataset: GuardedDataset, ids, rng, *, scale: float = 1.0,
                     align: int = 1, jitter: bool = False):
    """Stacked flipped (optionally rescaled, optionally jittered) images plus
    the flip record, never touching labels. One scale factor applies to the
    whole batch so the result stacks."""
    imgs, flips = [], []
    for i in ids:
        img, _, rec = weak_augment(dataset.image(i), None, rng)
        if scale != 1.0:
            img = scale_image(img, scale, align)
        if jitter:
            img, _ = photometric(img, rng)
        imgs.append(img)
        flips.append(rec.flip)
    return np.stack(imgs), np.asarray(flips, dtype=bool)


def _unlabeled_raw(dataset: GuardedDataset, ids):
    return np.stack([dataset.image(i) for i in ids])


# ---------------------------------------------------------------------------
# loss builders (pure given prepared arrays; tape-aware through ambient tape)


def _zero() -> Tensor:
    return Tensor(0.0)


def _mean_pixels(t: Tensor, shape4) -> Tensor:
    B, _, H, W = shape4
    return T.scale(t, 1.0 / (B * H * W))


def _supervised_term(logp: Tensor, gt: np.ndarray, cfg: TrainConfig | None) -> Tensor:
    if cfg is not None and cfg.ohem:
        B, _, H, W = logp.shape
        min_kept = max(1, (B * H * W) // 16)
        return ohem_ce(logp, gt, threshold=cfg.ohem_threshold, min_kept=min_kept)
    return pixel_ce(logp, gt)


def supervised_forward_losses(net: SegNet, X_l: np.ndarray, gt_l: np.ndarray,
                              cfg: TrainConfig | None = None,
                              ) -> tuple[Tensor, LossBreakdown]:
    p = confidence_map(net.forward(X_l))
    l_s = _supervised_term(p.logp, gt_l, cfg)
    return l_s, LossBreakdown.build(l_s=l_s.item())


def cps_forward_losses(net1: SegNet, net2: SegNet, X_l: np.ndarray,
                       gt_l: np.ndarray, X_u: np.ndarray | None, lam: float,
                       *, cps_on_labeled: bool = True,
                       consistency: str = "cps",
                       gt_u: np.ndarray | None = None,
                       cfg: TrainConfig | None = None,
                       ) -> tuple[Tensor, LossBreakdown]:
    """Shared loss structure of the dual-network methods.

    ``consistency`` selects pseudo-label exchange ("cps") or squared
    probability distance ("cpc"). ``gt_u`` adds a supervised term on the
    unlabeled batch (self-training composition). Must run under an active
    tape for training; runs tape-free for probes.
    """
    p1l = confidence_map(net1.forward(X_l))
    p2l = confidence_map(net2.forward(X_l))
    l_s = T.add(_supervised_term(p1l.logp, gt_l, cfg),
                _supervised_term(p2l.logp, gt_l, cfg))
    l_cps_l = _zero()
    l_cps_u = _zero()
    l_cpc = _zero()
    have_u = X_u is not None and len(X_u) > 0
    if lam > 0:
        p1u = confidence_map(net1.forward(X_u)) if have_u else None
        p2u = confidence_map(net2.forward(X_u)) if have_u else None
        if consistency == "cps":
            if cps_on_labeled:
                l_cps_l = cps_loss_labeled(p1l, p2l)
            if have_u:
                l_cps_u = cps_loss(p1u, p2u)
            total = total_loss(l_s, l_cps_l, l_cps_u, lam)
        elif consistency == "cpc":
            terms = [cpc_loss(p1l, p2l)] if cps_on_labeled else []
            if have_u:
                terms.append(cpc_loss(p1u, p2u))
            l_cpc = terms[0] if len(terms) == 1 else T.add(*terms)
            total = total_loss(l_s, l_cpc, _zero(), lam)
        else:
            raise ArgumentError(f"unknown consistency kind {consistency!r}")
    else:
        total = total_loss(l_s, lam=0.0)
    if gt_u is not None and have_u:
        p1u_s = confidence_map(net1.forward(X_u))
        p2u_s = confidence_map(net2.forward(X_u))
        sup_u = T.add(_supervised_term(p1u_s.logp, gt_u, cfg),
                      _supervised_term(p2u_s.logp, gt_u, cfg))
        total = T.add(total, sup_u)
        l_s = T.add(l_s, sup_u)
    return total, LossBreakdown.build(
        l_s=l_s.item(), l_cps_labeled=l_cps_l.item(),
        l_cps_unlabeled=l_cps_u.item(), l_cpc=l_cpc.item(), lam=lam)


def _pseudo_maps_tape_free(net: SegNet, X: np.ndarray) -> PseudoLabelMap:
    with stop_recording():
        return pseudo_label(confidence_map(net.forward(X)))


def _cutmix_targets(net_a_maps: PseudoLabelMap, net_b_maps: PseudoLabelMap,
                    masks) -> PseudoLabelMap:
    mixed = [mix_pseudo_maps(PseudoLabelMap(net_a_maps.labels[k:k + 1]),
                             PseudoLabelMap(net_b_maps.labels[k:k + 1]),
                             masks[k]).labels
             for k in range(len(masks))]
    return PseudoLabelMap(labels=np.concatenate(mixed))


def _cutmix_images(X_a: np.ndarray, X_b: np.ndarray, masks) -> np.ndarray:
    return np.stack([apply_cutmix(X_a[k], X_b[k], masks[k])
                     for k in range(len(masks))])


def cps_cutmix_forward_losses(net1: SegNet, net2: SegNet, X_l: np.ndarray,
                              gt_l: np.ndarray, X_u: np.ndarray, masks,
                              lam: float, *, cps_on_labeled: bool = True,
                              cfg: TrainConfig | None = None,
                              ) -> tuple[Tensor, LossBreakdown]:
    """CPS with CutMixed unlabeled pairs.

    Pseudo maps come from tape-free forwards on the source images; each
    network's output on the mixed image is supervised by the other
    network's mixed pseudo map. The labeled part is exactly the plain CPS
    labeled part.
    """
    if len(X_u) % 2:
        raise ArgumentError(
            f"cutmix needs an even unlabeled batch, got {len(X_u)}")
    X_a, X_b = X_u[0::2], X_u[1::2]
    if len(masks) != len(X_a):
        raise ArgumentError(
            f"need one mask per pair: {len(masks)} masks for {len(X_a)} pairs")
    y1a = _pseudo_maps_tape_free(net1, X_a)
    y1b = _pseudo_maps_tape_free(net1, X_b)
    y2a = _pseudo_maps_tape_free(net2, X_a)
    y2b = _pseudo_maps_tape_free(net2, X_b)
    y1_mix = _cutmix_targets(y1a, y1b, masks)
    y2_mix = _cutmix_targets(y2a, y2b, masks)
    X_mix = _cutmix_images(X_a, X_b, masks)

    p1l = confidence_map(net1.forward(X_l))
    p2l = confidence_map(net2.forward(X_l))
    l_s = T.add(_supervised_term(p1l.logp, gt_l, cfg),
                _supervised_term(p2l.logp, gt_l, cfg))
    l_cps_l = cps_loss_labeled(p1l, p2l) if (lam > 0 and cps_on_labeled) else _zero()
    if lam > 0:
        p1m = confidence_map(net1.forward(X_mix))
        p2m = confidence_map(net2.forward(X_mix))
        l_cps_u = T.add(pixel_ce(p1m.logp, y2_mix), pixel_ce(p2m.logp, y1_mix))
        total = total_loss(l_s, l_cps_l, l_cps_u, lam)
    else:
        l_cps_u = _zero()
        total = total_loss(l_s, lam=0.0)
    return total, LossBreakdown.build(
        l_s=l_s.item(), l_cps_labeled=l_cps_l.item(),
        l_cps_unlabeled=l_cps_u.item(), lam=lam)


def sps_forward_losses(net: SegNet, X_l: np.ndarray, gt_l: np.ndarray,
                       X_u: np.ndarray | None, lam: float, *,
                       cutmix_masks=None, cfg: TrainConfig | None = None,
                       ) -> tuple[Tensor, LossBreakdown]:
    """Single-network pseudo supervision, optionally through CutMix.

    Plain form: the network's unlabeled output is supervised by its own
    detached argmax. CutMix form: pseudo maps from tape-free source
    forwards are mixed and supervise the network's mixed-image output —
    gradient flows only through the mixed-image branch.
    """
    p_l = confidence_map(net.forward(X_l))
    l_s = _supervised_term(p_l.logp, gt_l, cfg)
    l_u = _zero()
    have_u = X_u is not None and len(X_u) > 0
    if lam > 0 and have_u:
        if cutmix_masks is None:
            l_u = sps_loss(confidence_map(net.forward(X_u)))
        else:
            if len(X_u) % 2:
                raise ArgumentError(
                    f"cutmix needs an even unlabeled batch, got {len(X_u)}")
            X_a, X_b = X_u[0::2], X_u[1::2]
            ya = _pseudo_maps_tape_free(net, X_a)
            yb = _pseudo_maps_tape_free(net, X_b)
            y_mix = _cutmix_targets(ya, yb, cutmix_masks)
            X_mix = _cutmix_images(X_a, X_b, cutmix_masks)
            l_u = pixel_ce(confidence_map(net.forward(X_mix)).logp, y_mix)
        total = total_loss(l_s, l_u, _zero(), lam)
    else:
        total = total_loss(l_s, lam=0.0)
    return total, LossBreakdown.build(l_s=l_s.item(), l_cps_unlabeled=l_u.item(),
                                      lam=lam)


def pseudoseg_forward_losses(net: SegNet, X_l: np.ndarray, gt_l: np.ndarray,
                             X_w: np.ndarray | None, X_s: np.ndarray | None,
                             lam: float, cfg: TrainConfig | None = None,
                             ) -> tuple[Tensor, LossBreakdown]:
    """Weak-to-strong pseudo labeling on one network.

    ``X_w`` and ``X_s`` must share the same flip so the weak branch's
    argmax map supervises the strong branch pixel-to-pixel. The weak
    forward is tape-free — only the strong branch backpropagates.
    """
    p_l = confidence_map(net.forward(X_l))
    l_s = _supervised_term(p_l.logp, gt_l, cfg)
    l_u = _zero()
    if lam > 0 and X_w is not None and len(X_w) > 0:
        y_w = _pseudo_maps_tape_free(net, X_w)
        p_s = confidence_map(net.forward(X_s))
        l_u = pixel_ce(p_s.logp, y_w)
        total = total_loss(l_s, l_u, _zero(), lam)
    else:
        total = total_loss(l_s, lam=0.0)
    return total, LossBreakdown.build(l_s=l_s.item(), l_cps_unlabeled=l_u.item(),
                                      lam=lam)


def mt_consistency(p_student: ConfidenceMap, teacher_probs: np.ndarray) -> Tensor:
    """Mean squared probability distance to a constant teacher map."""
    if p_student.probs.shape != teacher_probs.shape:
        raise ArgumentError(
            f"mt_consistency: shapes differ: {p_student.probs.shape} vs "
            f"{teacher_probs.shape}")
    d = T.sub(p_student.probs, Tensor(teacher_probs))
    B, _, H, W = p_student.probs.shape
    return T.scale(T.sum_all(T.mul(d, d)), 1.0 / (B * H * W))


def mean_teacher_forward_losses(student: SegNet, teacher: SegNet,
                                X_l: np.ndarray, gt_l: np.ndarray,
                                X_u_student: np.ndarray | None,
                                teacher_probs_aligned: np.ndarray | None,
                                lam: float, cfg: TrainConfig | None = None,
                                ) -> tuple[Tensor, LossBreakdown]:
    p_l = confidence_map(student.forward(X_l))
    l_s = _supervised_term(p_l.logp, gt_l, cfg)
    l_c = _zero()
    if lam > 0 and X_u_student is not None and len(X_u_student) > 0:
        p_u = confidence_map(student.forward(X_u_student))
        l_c = mt_consistency(p_u, teacher_probs_aligned)
        total = total_loss(l_s, l_c, _zero(), lam)
    else:
        total = total_loss(l_s, lam=0.0)
    return total, LossBreakdown.build(l_s=l_s.item(), l_cpc=l_c.item(), lam=lam)


# ---------------------------------------------------------------------------
# single optimization steps


def _backward_and_step(tape: Tape, total: Tensor, nets_opts, lr: float) -> None:
    tape.backward(total)
    for net, opt in nets_opts:
        opt.step([tape.grad(p) for p in net.parameters()], lr)


def step_cps(dual: DualNetworks, opt1: SgdMomentum, opt2: SgdMomentum,
             X_l, gt_l, X_u, lam: float, lr: float, *,
             cps_on_labeled: bool = True, consistency: str = "cps",
             gt_u=None, cfg: TrainConfig | None = None) -> LossBreakdown:
    with Tape() as tape:
        total, parts = cps_forward_losses(
            dual.net1, dual.net2, X_l, gt_l, X_u, lam,
            cps_on_labeled=cps_on_labeled, consistency=consistency,
            gt_u=gt_u, cfg=cfg)
    _backward_and_step(tape, total, [(dual.net1, opt1), (dual.net2, opt2)], lr)
    return parts


def step_cps_cutmix(dual: DualNetworks, opt1: SgdMomentum, opt2: SgdMomentum,
                    X_l, gt_l, X_u, masks, lam: float, lr: float, *,
                    cps_on_labeled: bool = True,
                    cfg: TrainConfig | None = None) -> LossBreakdown:
    with Tape() as tape:
        total, parts = cps_cutmix_forward_losses(
            dual.net1, dual.net2, X_l, gt_l, X_u, masks, lam,
            cps_on_labeled=cps_on_labeled, cfg=cfg)
    _backward_and_step(tape, total, [(dual.net1, opt1), (dual.net2, opt2)], lr)
    return parts


def step_sps(net: SegNet, opt: SgdMomentum, X_l, gt_l, X_u, lam: float,
             lr: float, *, cutmix_masks=None,
             cfg: TrainConfig | None = None) -> LossBreakdown:
    with Tape() as tape:
        total, parts = sps_forward_losses(net, X_l, gt_l, X_u, lam,
                                          cutmix_masks=cutmix_masks, cfg=cfg)
    _backward_and_step(tape, total, [(net, opt)], lr)
    return parts


def step_pseudoseg_style(net: SegNet, opt: SgdMomentum, X_l, gt_l, X_w, X_s,
                         lam: float, lr: float,
                         cfg: TrainConfig | None = None) -> LossBreakdown:
    with Tape() as tape:
        total, parts = pseudoseg_forward_losses(net, X_l, gt_l, X_w, X_s, lam,
                                                cfg=cfg)
    _backward_and_step(tape, total, [(net, opt)], lr)
    return parts


def step_mean_teacher(student: SegNet, teacher: SegNet, opt: SgdMomentum,
                      X_l, gt_l, X_u_student, teacher_probs_aligned,
                      lam: float, lr: float, alpha: float,
                      cfg: TrainConfig | None = None) -> LossBreakdown:
    """Backward through the student only; EMA update after the step."""
    with Tape() as tape:
        total, parts = mean_teacher_forward_losses(
            student, teacher, X_l, gt_l, X_u_student, teacher_probs_aligned,
            lam, cfg=cfg)
    _backward_and_step(tape, total, [(student, opt)], lr)
    ema_update(teacher, student, alpha)
    return parts


# ---------------------------------------------------------------------------
# evaluation (validation metrics and epoch-boundary probes)


def _predict(net: SegNet, images: np.ndarray, batch: int) -> np.ndarray:
    with stop_recording():
        return np.concatenate([
            np.argmax(net.forward(images[s:s + batch]).data, axis=1)
            for s in range(0, len(images), batch)])


def evaluate_miou(net: SegNet, images: np.ndarray, labels: np.ndarray,
                  num_classes: int, batch: int = 16) -> float:
    conf = ConfusionMatrix(num_classes)
    accumulate(conf, _predict(net, images, batch), labels)
    return miou(conf)[1]


def evaluate_overlap(net1: SegNet, net2: SegNet, images: np.ndarray,
                     labels: np.ndarray, *, exclude_predicted_background=False,
                     batch: int = 16) -> float:
    y1 = _predict(net1, images, batch)
    y2 = _predict(net2, images, batch)
    return overlap_ratio(
        y1, y2, labels,
        exclude_predicted_background=exclude_predicted_background)


def _probe_ids(protocol: PartitionProtocol, cfg: TrainConfig):
    """Fixed probe sets: the first min(|labeled|, 4*batch) labeled ids and
    the first min(|unlabeled|, 2*batch) unlabeled ids, in sorted id order."""
    n_l = min(4 * cfg.batch_labeled, len(protocol.labeled_ids))
    n_u = min(2 * cfg.batch_unlabeled, len(protocol.unlabeled_ids))
    return list(protocol.labeled_ids[:n_l]), list(protocol.unlabeled_ids[:n_u])


def _probe_losses(method: MethodKind, net1: SegNet, second: SegNet | None,
                  dataset: GuardedDataset, protocol: PartitionProtocol,
                  cfg: TrainConfig, label_override=None) -> LossBreakdown:
    """Epoch-boundary losses on the deterministic augmentation-free probe.

    CutMix and photometric perturbations are augmentations, so the probe
    uses each method's plain consistency form; the probe for the CutMix
    variants is therefore the plain exchange on unmixed images.
    """
    with stop_recording():
        return _probe_losses_inner(method, net1, second, dataset, protocol,
                                   cfg, label_override)


def _probe_losses_inner(method, net1, second, dataset, protocol, cfg,
                        label_override) -> LossBreakdown:
    lab_ids, unlab_ids = _probe_ids(protocol, cfg)
    X_l = dataset.images(lab_ids)
    if label_override:
        gt_l = np.stack([label_override[int(i)] if int(i) in label_override
                         else dataset.labels(i) for i in lab_ids])
    else:
        gt_l = dataset.labels_batch(lab_ids)
    X_u = _unlabeled_raw(dataset, unlab_ids) if unlab_ids else None
    lam = 0.0 if method is MethodKind.SUPERVISED else cfg.lam
    if method is MethodKind.SUPERVISED:
        _, parts = supervised_forward_losses(net1, X_l, gt_l, cfg)
    elif method in (MethodKind.CPS, MethodKind.CPS_CUTMIX,
                    MethodKind.CPS_SELF_TRAINING):
        _, parts = cps_forward_losses(net1, second, X_l, gt_l, X_u, lam,
                                      cps_on_labeled=cfg.cps_on_labeled,
                                      consistency="cps", cfg=cfg)
    elif method is MethodKind.CPC:
        _, parts = cps_forward_losses(net1, second, X_l, gt_l, X_u, lam,
                                      cps_on_labeled=cfg.cps_on_labeled,
                                      consistency="cpc", cfg=cfg)
    elif method is MethodKind.MEAN_TEACHER:
        t_probs = None
        if X_u is not None:
            t_probs = np.exp(T.log_softmax_channels(second.forward(X_u)).data)
        _, parts = mean_teacher_forward_losses(net1, second, X_l, gt_l, X_u,
                                               t_probs, lam, cfg)
    elif method in (MethodKind.SPS, MethodKind.SPS_CUTMIX):
        _, parts = sps_forward_losses(net1, X_l, gt_l, X_u, lam, cfg=cfg)
    elif method is MethodKind.PSEUDOSEG_STYLE:
        _, parts = pseudoseg_forward_losses(net1, X_l, gt_l, X_u, X_u, lam, cfg)
    elif method is MethodKind.SELF_TRAINING:
        _, parts = supervised_forward_losses(net1, X_l, gt_l, cfg)
    else:
        raise ConfigError(f"no probe for method {method}")
    return parts


# ---------------------------------------------------------------------------
# the training loop


def _val_arrays(cfg: TrainConfig):
    samples = generate_toy_dataset(cfg.val_n, cfg.H, cfg.W, cfg.num_classes,
                                   derive_seed(cfg.seed_data, _TAG_VAL))
    return (np.stack([s.image for s in samples]),
            np.stack([s.labels for s in samples]))


def _epoch_rng(cfg: TrainConfig, stage_tag: int, epoch: int):
    return np.random.default_rng(
        np.random.SeedSequence([cfg.seed_data, _TAG_EPOCH, stage_tag, epoch]))


def _aug_rng(cfg: TrainConfig, stage_tag: int, epoch: int, it: int, branch: int):
    return np.random.default_rng(
        np.random.SeedSequence([cfg.seed_aug, stage_tag, epoch, it, branch]))


def _train_stage(cfg: TrainConfig, method: MethodKind,
                 dataset: GuardedDataset, protocol: PartitionProtocol,
                 val_images, val_labels, *, seed_net1: int, seed_net2: int,
                 stage_tag: int = 0, epoch_offset: int = 0,
                 label_override=None, sup_unlabeled: bool = False):
    """One full training stage; returns (records, net1, second_net, guards).

    ``second_net`` is net2 for dual methods, the teacher for mean teacher,
    None otherwise. ``label_override`` substitutes stored labels per id
    (self-training pseudo labels) without touching the dataset's guarded
    ground truth. ``sup_unlabeled`` additionally supervises the unlabeled
    batch with override labels (self-training + CPS composition).
    """
    dual = None
    teacher = None
    if method in DUAL_METHODS:
        dual = init_dual(cfg.model_config(0), seed_net1, seed_net2)
        net1, second = dual.net1, dual.net2
        nets = [net1, second]
    elif method is MethodKind.MEAN_TEACHER:
        net1 = build_segnet(cfg.model_config(seed_net1))
        teacher = net1.copy()
        second = teacher
        nets = [net1]
    else:
        net1 = build_segnet(cfg.model_config(seed_net1))
        second = None
        nets = [net1]
    opts = [SgdMomentum(n.parameters(), momentum=cfg.momentum,
                        weight_decay=cfg.weight_decay) for n in nets]
    ipe = -(-len(protocol.labeled_ids) // cfg.batch_labeled)
    total_iters = cfg.epochs * ipe
    align = 2 ** cfg.depth
    lam = 0.0 if method in (MethodKind.SUPERVISED, MethodKind.SELF_TRAINING) else cfg.lam
    records: list[EpochRecord] = []
    net2_eval_forwards = 0
    it_global = 0
    for epoch in range(1, cfg.epochs + 1):
        epoch_lr = poly_lr(cfg.base_lr, (epoch - 1) * ipe, total_iters,
                           cfg.lr_power)
        rng = _epoch_rng(cfg, stage_tag, epoch)
        for it, (lab_ids, unlab_ids) in enumerate(
                batch_iter(protocol, cfg.batch_labeled, cfg.batch_unlabeled, rng)):
            lr = poly_lr(cfg.base_lr, it_global, total_iters, cfg.lr_power)
            rng_l = _aug_rng(cfg, stage_tag, epoch, it, 0)
            X_l, gt_l = _labeled_batch(dataset, lab_ids, rng_l,
                                       multiscale=cfg.multiscale_labeled,
                                       align=align, label_override=label_override,
                                       jitter=cfg.photometric_batches)
            use_u = lam > 0 and len(unlab_ids) > 0
            gt_u = None
            if sup_unlabeled and label_override is not None and len(unlab_ids) > 0:
                use_u = len(unlab_ids) > 0
            if method is MethodKind.SUPERVISED or method is MethodKind.SELF_TRAINING:
                with Tape() as tape:
                    total, parts = supervised_forward_losses(net1, X_l, gt_l, cfg)
                _backward_and_step(tape, total, [(net1, opts[0])], lr)
            elif method in (MethodKind.CPS, MethodKind.CPC,
                            MethodKind.CPS_SELF_TRAINING):
                X_u = None
                if use_u:
                    rng_u = _aug_rng(cfg, stage_tag, epoch, it, 1)
                    u_scale = (sample_scale(rng_u)
                               if cfg.multiscale_unlabeled else 1.0)
                    X_u, u_flips = _unlabeled_batch(dataset, unlab_ids, rng_u,
                                                    scale=u_scale, align=align,
                                                    jitter=cfg.photometric_batches)
                    if gt_u is None and sup_unlabeled and label_override is not None:
                        gt_u = np.stack([label_override[int(i)] for i in unlab_ids])
                        gt_u = [g[:, ::-1] if f else g
                                for g, f in zip(gt_u, u_flips)]
                        if u_scale != 1.0:
                            gt_u = [scale_labels(g, u_scale, align) for g in gt_u]
                        gt_u = np.stack(gt_u)
                kind = "cpc" if method is MethodKind.CPC else "cps"
                parts = step_cps(dual, opts[0], opts[1], X_l, gt_l, X_u,
                                 lam, lr, cps_on_labeled=cfg.cps_on_labeled,
                                 consistency=kind, gt_u=gt_u, cfg=cfg)
            elif method is MethodKind.CPS_CUTMIX:
                if use_u:
                    rng_u = _aug_rng(cfg, stage_tag, epoch, it, 1)
                    X_u, _ = _unlabeled_batch(dataset, unlab_ids, rng_u,
                                              jitter=cfg.photometric_batches)
                    masks = [sample_cutmix_mask(X_u.shape[2], X_u.shape[3], rng_u)
                             for _ in range(len(X_u) // 2)]
                    parts = step_cps_cutmix(dual, opts[0], opts[1], X_l, gt_l,
                                            X_u, masks, lam, lr,
                                            cps_on_labeled=cfg.cps_on_labeled,
                                            cfg=cfg)
                else:
                    parts = step_cps(dual, opts[0], opts[1], X_l, gt_l, None,
                                     lam, lr, cps_on_labeled=cfg.cps_on_labeled,
                                     cfg=cfg)
            elif method in (MethodKind.SPS, MethodKind.SPS_CUTMIX):
                X_u, masks = None, None
                if use_u:
                    rng_u = _aug_rng(cfg, stage_tag, epoch, it, 1)
                    if method is MethodKind.SPS_CUTMIX:
                        # masks are sampled at native size; CutMix branches
                        # never rescale
                        X_u, _ = _unlabeled_batch(dataset, unlab_ids, rng_u,
                                                  jitter=cfg.photometric_batches)
                        masks = [sample_cutmix_mask(X_u.shape[2], X_u.shape[3],
                                                    rng_u)
                                 for _ in range(len(X_u) // 2)]
                    else:
                        u_scale = (sample_scale(rng_u)
                                   if cfg.multiscale_unlabeled else 1.0)
                        X_u, _ = _unlabeled_batch(dataset, unlab_ids, rng_u,
                                                  scale=u_scale, align=align,
                                                  jitter=cfg.photometric_batches)
                parts = step_sps(net1, opts[0], X_l, gt_l, X_u, lam, lr,
                                 cutmix_masks=masks, cfg=cfg)
            elif method is MethodKind.PSEUDOSEG_STYLE:
                X_w = X_s = None
                if use_u:
                    rng_u = _aug_rng(cfg, stage_tag, epoch, it, 1)
                    u_scale = (sample_scale(rng_u)
                               if cfg.multiscale_unlabeled else 1.0)
                    X_w, _ = _unlabeled_batch(dataset, unlab_ids, rng_u,
                                              scale=u_scale, align=align)
                    X_s = np.stack([photometric(x, rng_u)[0] for x in X_w])
                parts = step_pseudoseg_style(net1, opts[0], X_l, gt_l, X_w,
                                             X_s, lam, lr, cfg)
            elif method is MethodKind.MEAN_TEACHER:
                X_u_s, t_probs = None, None
                if use_u:
                    rng_u = _aug_rng(cfg, stage_tag, epoch, it, 1)
                    # one scale for both views: the consistency distance
                    # needs matching spatial shapes
                    u_scale = (sample_scale(rng_u)
                               if cfg.multiscale_unlabeled else 1.0)
                    X_u_s, s_flips = _unlabeled_batch(dataset, unlab_ids, rng_u,
                                                      scale=u_scale, align=align,
                                                      jitter=cfg.photometric_batches)
                    X_u_t, t_flips = _unlabeled_batch(dataset, unlab_ids, rng_u,
                                                      scale=u_scale, align=align,
                                                      jitter=cfg.photometric_batches)
                    with stop_recording():
                        t_logits = teacher.forward(X_u_t)
                        t_probs = np.exp(T.log_softmax_channels(t_logits).data)
                    # align the constant teacher map to the student's view
                    flip_back = s_flips != t_flips
                    t_probs[flip_back] = t_probs[flip_back][..., ::-1]
                parts = step_mean_teacher(net1, teacher, opts[0], X_l, gt_l,
                                          X_u_s, t_probs, lam, lr,
                                          cfg.ema_alpha, cfg)
            else:
                raise ConfigError(f"no trainer for method {method}")
            it_global += 1
        probe = _probe_losses(method, net1, second, dataset, protocol, cfg,
                              label_override)
        before = second.forward_count if second is not None else 0
        y1_val = _predict(net1, val_images, 16)
        conf = ConfusionMatrix(cfg.num_classes)
        accumulate(conf, y1_val, val_labels)
        miou_val = miou(conf)[1]
        after = second.forward_count if second is not None else 0
        net2_eval_forwards += after - before
        overlap = None
        if dual is not None:
            y2_val = _predict(second, val_images, 16)
            overlap = overlap_ratio(
                y1_val, y2_val, val_labels,
                exclude_predicted_background=cfg.overlap_exclude_predicted_background)
        records.append(EpochRecord(
            epoch=epoch_offset + epoch, lr=epoch_lr, l_s=probe.l_s,
            l_cps_l=probe.l_cps_labeled, l_cps_u=probe.l_cps_unlabeled,
            l_cpc=probe.l_cpc, miou=miou_val, overlap=overlap))
    guards = {"net2_eval_forwards": net2_eval_forwards}
    return records, net1, second, guards


def _pseudo_label_ids(net: SegNet, dataset: GuardedDataset, ids,
                      confidence_threshold: float | None,
                      batch: int = 16) -> dict[int, np.ndarray]:
    """Stage-2 pseudo labels: argmax of the stage-1 net on each image,
    optionally masking low-confidence pixels to IGNORE."""
    override: dict[int, np.ndarray] = {}
    ids = list(ids)
    with stop_recording():
        for s in range(0, len(ids), batch):
            chunk = ids[s:s + batch]
            X = np.stack([dataset.image(i) for i in chunk])
            logp = T.log_softmax_channels(net.forward(X)).data
            pred = np.argmax(logp, axis=1)
            if confidence_threshold is not None:
                maxp = np.exp(np.max(logp, axis=1))
                pred = np.where(maxp >= confidence_threshold, pred, IGNORE_INDEX)
            for j, i in enumerate(chunk):
                override[int(i)] = pred[j]
    return override


def _self_train(cfg: TrainConfig, dataset: GuardedDataset,
                protocol: PartitionProtocol, val_images, val_labels,
                notes: list[str]):
    """Supervised stage, pseudo-label stage, retrain stage.

    The retrain starts from a fresh initialization (the configured network
    seeds); stage 1 uses a seed derived from seed_net1 so the two stages
    never share weights. Records cover both trained stages (2 x epochs).
    """
    stage1_seed = derive_seed(cfg.seed_net1, _TAG_STAGE1)
    records1, net_s1, _, guards1 = _train_stage(
        cfg, MethodKind.SELF_TRAINING, dataset, protocol, val_images,
        val_labels, seed_net1=stage1_seed, seed_net2=0, stage_tag=1)
    override = _pseudo_label_ids(net_s1, dataset, protocol.unlabeled_ids,
                                 cfg.confidence_threshold)
    if cfg.method is MethodKind.CPS_SELF_TRAINING:
        records3, net1, net2, guards3 = _train_stage(
            cfg, MethodKind.CPS_SELF_TRAINING, dataset, protocol, val_images,
            val_labels, seed_net1=cfg.seed_net1, seed_net2=cfg.seed_net2,
            stage_tag=3, epoch_offset=cfg.epochs, label_override=override,
            sup_unlabeled=True)
    else:
        pool = PartitionProtocol(
            ratio=1.0, seed=protocol.seed,
            labeled_ids=tuple(sorted(protocol.labeled_ids
                                     + protocol.unlabeled_ids)),
            unlabeled_ids=())
        records3, net1, net2, guards3 = _train_stage(
            cfg, MethodKind.SELF_TRAINING, dataset, pool, val_images,
            val_labels, seed_net1=cfg.seed_net1, seed_net2=0, stage_tag=3,
            epoch_offset=cfg.epochs, label_override=override)
    notes.append("self-training: records cover stage 1 and stage 3 "
                 f"({cfg.epochs} epochs each)")
    guards = {"net2_eval_forwards": guards1["net2_eval_forwards"]
              + guards3["net2_eval_forwards"]}
    return records1 + records3, net1, net2, guards


def train(cfg: TrainConfig, dataset: GuardedDataset | None = None,
          protocol: PartitionProtocol | None = None,
          val_data: tuple[np.ndarray, np.ndarray] | None = None) -> RunResult:
    """Run the configured method end to end and return per-epoch records.

    ``dataset``/``protocol``/``val_data`` default to the configuration's
    generated toy dataset, its seeded partition, and a held-out validation
    set derived from the data seed.
    """
    notes = cfg.validate()
    t0 = time.perf_counter()
    if dataset is None:
        dataset = GuardedDataset(generate_toy_dataset(
            cfg.n, cfg.H, cfg.W, cfg.num_classes, cfg.seed_data))
    if protocol is None:
        protocol = partition(len(dataset), cfg.ratio, cfg.partition_seed)
    if val_data is None:
        val_images, val_labels = _val_arrays(cfg)
    else:
        val_images, val_labels = val_data
    baseline_reads = dataset.reads_within(protocol.unlabeled_ids)
    if cfg.method in (MethodKind.SELF_TRAINING, MethodKind.CPS_SELF_TRAINING):
        records, net1, net2, guards = _self_train(
            cfg, dataset, protocol, val_images, val_labels, notes)
    else:
        records, net1, net2, guards = _train_stage(
            cfg, cfg.method, dataset, protocol, val_images, val_labels,
            seed_net1=cfg.seed_net1, seed_net2=cfg.seed_net2)
    guards["unlabeled_gt_reads"] = (dataset.reads_within(protocol.unlabeled_ids)
                                    - baseline_reads)
    return RunResult(method=cfg.method, config=cfg, records=records,
                     net1=net1, net2=net2, guards=guards, notes=notes,
                     wall_time=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# run directory: config snapshot, metrics CSV, checkpoints


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def format_metrics_csv(records: list[EpochRecord]) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for r in records:
        lines.append(",".join(_fmt(getattr(r, c)) for c in CSV_COLUMNS))
    return "\n".join(lines) + "\n"


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in sorted(fields(cfg), key=lambda f: f.name):
        v = getattr(cfg, f.name)
        if isinstance(v, MethodKind):
            v = v.value
        elif isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def write_run_dir(result: RunResult, out_dir: str | Path) -> Path:
    from .model import save_checkpoint
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(format_config(result.config))
    (out_dir / "metrics.csv").write_text(format_metrics_csv(result.records))
    save_checkpoint(result.net1, out_dir / "net1.ckpt")
    if result.net2 is not None:
        save_checkpoint(result.net2, out_dir / "net2.ckpt")
    return out_dir
