"""Supervision and consistency objectives for dual-network training.

Everything here reduces the same way: mean over images and pixels, sum over
the two network directions where a loss has two. Cross-entropy always goes
through log-softmax (never log of a stored probability), so there is no
log(0) path; where a test needs an explicit probability floor, 1e-12 is the
documented value.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ArgumentError, ConfigError, DataError, DimensionError
from .tensor import Tensor

__all__ = [
    "IGNORE_INDEX",
    "ConfidenceMap",
    "PseudoLabelMap",
    "GroundTruthMap",
    "LossBreakdown",
    "confidence_map",
    "pseudo_label",
    "pixel_ce",
    "supervision_loss",
    "cps_loss",
    "cps_loss_labeled",
    "cpc_loss",
    "ohem_ce",
    "sps_loss",
    "total_loss",
]

IGNORE_INDEX = 255


@dataclass
class ConfidenceMap:
    """Per-pixel class probabilities [B,K,H,W] with their backing log-probs.

    ``probs`` is exp(``logp``); losses differentiate through ``logp`` so no
    log is ever taken of a stored probability.
    """

    probs: Tensor
    logp: Tensor

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    def validate(self, tol: float = 1e-9) -> None:
        p = self.probs.data
        sums = p.sum(axis=1)
        if np.abs(sums - 1.0).max() > tol:
            raise DataError(
                f"confidence map channel sums deviate from 1 by up to "
                f"{np.abs(sums - 1.0).max():.3e}")
        if p.min() <= 0.0 or p.max() >= 1.0 + tol:
            raise DataError("confidence map entries must lie in (0, 1)")


@dataclass
class PseudoLabelMap:
    """Argmax one-hot map stored compactly: int labels [B,H,W] in [0,K).

    A plain integer array — never tape-linked, so it is a stop-gradient
    boundary by construction.
    """

    labels: np.ndarray


@dataclass
class GroundTruthMap:
    """Integer labels [B,H,W] in [0,K) or the IGNORE sentinel (255)."""

    labels: np.ndarray

    def validate(self, num_classes: int) -> None:
        bad = (self.labels != IGNORE_INDEX) & (
            (self.labels < 0) | (self.labels >= num_classes))
        if bad.any():
            raise DataError(
                f"ground truth contains {int(bad.sum())} labels outside "
                f"[0, {num_classes}) that are not the IGNORE sentinel")


@dataclass(frozen=True)
class LossBreakdown:
    """Recorded scalar loss terms for one step.

    ``total`` is l_s + lam * (l_cps_labeled + l_cps_unlabeled + l_cpc); at
    most one consistency family is nonzero per method, so with pseudo-label
    exchange active this is exactly l_s + lam * (l_cps_labeled +
    l_cps_unlabeled).
    """

    l_s: float
    l_cps_labeled: float
    l_cps_unlabeled: float
    l_cpc: float
    lam: float
    total: float

    @classmethod
    def build(cls, l_s: float, l_cps_labeled: float = 0.0,
              l_cps_unlabeled: float = 0.0, l_cpc: float = 0.0,
              lam: float = 0.0) -> "LossBreakdown":
        total = l_s + lam * (l_cps_labeled + l_cps_unlabeled + l_cpc)
        return cls(l_s=float(l_s), l_cps_labeled=float(l_cps_labeled),
                   l_cps_unlabeled=float(l_cps_unlabeled), l_cpc=float(l_cpc),
                   lam=float(lam), total=float(total))


def confidence_map(logits: Tensor) -> ConfidenceMap:
    """Softmax over the channel axis, keeping log-probs for the losses."""
    logp = T.log_softmax_channels(logits)
    return ConfidenceMap(probs=T.exp(logp), logp=logp)


def pseudo_label(cmap: ConfidenceMap) -> PseudoLabelMap:
    """Per-pixel argmax, ties broken by lowest class index; gradient-free."""
    return PseudoLabelMap(labels=np.argmax(cmap.probs.data, axis=1))


def _target_labels(target) -> np.ndarray:
    if isinstance(target, (PseudoLabelMap, GroundTruthMap)):
        return target.labels
    return np.asarray(target)


def pixel_ce(logp: Tensor, target, ignore: int = IGNORE_INDEX) -> Tensor:
    """Mean over non-ignored pixels of -logp at the target class.

    Returns a zero scalar (with a RuntimeWarning) when every pixel is
    ignored.
    """
    labels = _target_labels(target)
    if logp.data.ndim != 4:
        raise DimensionError(f"pixel_ce: log-probs must be [B,K,H,W], got {logp.shape}")
    B, K, H, W = logp.shape
    if labels.shape != (B, H, W):
        raise DimensionError(
            f"pixel_ce: target shape {labels.shape} does not match "
            f"log-prob spatial shape {(B, H, W)}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"pixel_ce: target dtype must be integer, got {labels.dtype}")
    bad = (labels != ignore) & ((labels < 0) | (labels >= K))
    if bad.any():
        raise DataError(
            f"pixel_ce: {int(bad.sum())} target values outside [0, {K}) and "
            f"not the ignore sentinel {ignore}")
    valid = labels != ignore
    n_valid = int(valid.sum())
    if n_valid == 0:
        warnings.warn("pixel_ce: every pixel ignored; loss is 0", RuntimeWarning,
                      stacklevel=2)
        return Tensor(0.0)
    onehot = np.zeros(logp.data.shape)
    b, h, w = np.nonzero(valid)
    onehot[b, labels[valid], h, w] = 1.0
    return T.scale(T.sum_all(T.scale(logp, onehot)), -1.0 / n_valid)


def supervision_loss(p1: ConfidenceMap, p2: ConfidenceMap,
                     gt: GroundTruthMap) -> Tensor:
    """Pixel cross-entropy against ground truth, summed over both networks."""
    return T.add(pixel_ce(p1.logp, gt), pixel_ce(p2.logp, gt))


def cps_loss(p1: ConfidenceMap, p2: ConfidenceMap) -> Tensor:
    """Each network supervised by the other's detached argmax map.

    y2 teaches p1 and y1 teaches p2; because the label maps are plain
    integer arrays, gradient reaches net1 only through p1 and net2 only
    through p2.
    """
    y1 = pseudo_label(p1)
    y2 = pseudo_label(p2)
    return T.add(pixel_ce(p1.logp, y2), pixel_ce(p2.logp, y1))


def cps_loss_labeled(p1: ConfidenceMap, p2: ConfidenceMap) -> Tensor:
    """Same formula as cps_loss, applied to labeled-batch outputs.

    Ground truth is deliberately not consulted here; the labeled batch
    contributes a second supervision signal purely through the exchanged
    pseudo maps.
    """
    return cps_loss(p1, p2)


def cpc_loss(p1: ConfidenceMap, p2: ConfidenceMap) -> Tensor:
    """Mean over pixels of the squared prob-map distance, both directions.

    Counting each direction once, as the bidirectional sum is written,
    gives exactly twice the one-way squared distance; gradient reaches both
    networks.
    """
    d = T.sub(p1.probs, p2.probs)
    B, _, H, W = p1.probs.shape
    return T.scale(T.sum_all(T.mul(d, d)), 2.0 / (B * H * W))


def ohem_ce(logp: Tensor, target, threshold: float = 0.7,
            min_kept: int = 1, ignore: int = IGNORE_INDEX) -> Tensor:
    """Cross-entropy over hard pixels only.

    A pixel is hard when its predicted probability of the true class is
    below ``threshold``; if fewer than ``min_kept`` qualify, the
    ``min_kept`` lowest-probability pixels are kept instead (all valid
    pixels when fewer exist).
    """
    if not 0.0 < threshold < 1.0:
        raise ArgumentError(f"ohem_ce: threshold must be in (0, 1), got {threshold}")
    if min_kept < 1:
        raise ArgumentError(f"ohem_ce: min_kept must be >= 1, got {min_kept}")
    labels = _target_labels(target)
    if logp.data.ndim != 4:
        raise DimensionError(f"ohem_ce: log-probs must be [B,K,H,W], got {logp.shape}")
    B, K, H, W = logp.shape
    if labels.shape != (B, H, W):
        raise DimensionError(
            f"ohem_ce: target shape {labels.shape} does not match {(B, H, W)}")
    bad = (labels != ignore) & ((labels < 0) | (labels >= K))
    if bad.any():
        raise DataError(
            f"ohem_ce: {int(bad.sum())} target values outside [0, {K}) and "
            f"not the ignore sentinel {ignore}")
    valid = labels != ignore
    if not valid.any():
        warnings.warn("ohem_ce: every pixel ignored; loss is 0", RuntimeWarning,
                      stacklevel=2)
        return Tensor(0.0)
    safe = np.where(valid, labels, 0)
    bi, hi, wi = np.indices(labels.shape)
    p_true = np.exp(logp.data[bi, safe, hi, wi])  # selection only; no gradient
    p_true = np.where(valid, p_true, np.inf)  # ignored pixels sort last
    hard = valid & (p_true < threshold)
    n_hard = int(hard.sum())
    if n_hard < min_kept:
        order = np.argsort(p_true, axis=None, kind="stable")
        keep_n = min(min_kept, int(valid.sum()))
        kept = np.zeros(labels.size, dtype=bool)
        kept[order[:keep_n]] = True
        kept = kept.reshape(labels.shape)
    else:
        kept = hard
    masked = np.where(kept, labels, ignore)
    return pixel_ce(logp, masked, ignore=ignore)


def sps_loss(p: ConfidenceMap) -> Tensor:
    """A network supervised by its own detached argmax map (one direction)."""
    return pixel_ce(p.logp, pseudo_label(p))


def total_loss(l_s: Tensor, l_cps_labeled: Tensor | None = None,
               l_cps_unlabeled: Tensor | None = None, lam: float = 0.0) -> Tensor:
    """l_s + lam * (l_cps_labeled + l_cps_unlabeled).

    With lam == 0 the supervised term is returned as-is — no extra ops, so
    supervised-only training is bit-identical to the reduction.
    """
    if lam < 0:
        raise ConfigError(f"total_loss: lambda must be >= 0, got {lam}")
    if lam == 0.0:
        return l_s
    if l_cps_labeled is None or l_cps_unlabeled is None:
        raise ConfigError("total_loss: lambda > 0 requires both cps terms")
    return T.add(l_s, T.scale(T.add(l_cps_labeled, l_cps_unlabeled), lam))
