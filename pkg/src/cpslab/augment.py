"""CutMix masks, weak/strong photometric augmentation, and replayable records.

Geometry is limited to a horizontal flip so that pseudo label maps always
transfer pixel-to-pixel; the strong augmentation adds only photometric
perturbation on top. Every transform is a deterministic function of (input,
rng state) and produces a record that replays exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DimensionError
from .losses import PseudoLabelMap
from .tensor import Tensor

__all__ = [
    "MULTISCALE_FACTORS",
    "CutMixMask",
    "AugRecord",
    "sample_cutmix_mask",
    "apply_cutmix",
    "mix_pseudo_maps",
    "weak_augment",
    "photometric",
    "strong_augment",
    "replay_weak",
    "flip_image",
    "flip_labels",
    "sample_scale",
    "scale_image",
    "scale_labels",
]

MULTISCALE_FACTORS = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)

AREA_RATIO_RANGE = (0.25, 0.5)
ASPECT_RANGE = (0.5, 2.0)
NOISE_SIGMA = 0.1
BRIGHTNESS_RANGE = (0.7, 1.3)


@dataclass(frozen=True)
class CutMixMask:
    """Binary rectangle mask: 1 inside ``rect`` = (top, left, height, width)."""

    H: int
    W: int
    rect: tuple[int, int, int, int]

    def __post_init__(self):
        t, l, h, w = self.rect
        if h <= 0 or w <= 0 or t < 0 or l < 0 or t + h > self.H or l + w > self.W:
            raise ArgumentError(
                f"cutmix rect {self.rect} does not lie inside {self.H}x{self.W}")
        if h * w >= self.H * self.W:
            raise ArgumentError("cutmix rect must cover strictly less than the frame")

    def dense(self) -> np.ndarray:
        m = np.zeros((self.H, self.W))
        t, l, h, w = self.rect
        m[t:t + h, l:l + w] = 1.0
        return m

    @property
    def area_ratio(self) -> float:
        t, l, h, w = self.rect
        return (h * w) / (self.H * self.W)


@dataclass(frozen=True)
class AugRecord:
    """Everything needed to replay one augmentation draw."""

    flip: bool
    scale: float = 1.0
    crop_origin: tuple[int, int] = (0, 0)
    noise_seed: int = 0
    brightness: tuple[float, ...] = ()
    sigma: float = 0.0


def sample_cutmix_mask(H: int, W: int, rng: np.random.Generator) -> CutMixMask:
    """Rectangle with area ratio uniform in [0.25, 0.5] of the frame and
    aspect (h/w) uniform in [0.5, 2], clamped inside the frame.

    Side lengths are rounded and then clamped so the realized integer area
    still lands inside the ratio bounds (for W >= 4 the clamped interval is
    never empty).
    """
    if H < 4 or W < 4:
        raise ArgumentError(f"cutmix frame must be at least 4x4, got {H}x{W}")
    ratio = rng.uniform(*AREA_RATIO_RANGE)
    aspect = rng.uniform(*ASPECT_RANGE)
    area = ratio * H * W
    area_lo = int(np.ceil(AREA_RATIO_RANGE[0] * H * W))
    area_hi = int(AREA_RATIO_RANGE[1] * H * W)
    h = int(np.clip(round(np.sqrt(area * aspect)),
                    max(1, -(-area_lo // W)), min(H, area_hi)))
    w = int(np.clip(round(area / h), -(-area_lo // h), min(W, area_hi // h)))
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    return CutMixMask(H=H, W=W, rect=(top, left, h, w))


def _mask_for(shape_hw: tuple[int, int], m: CutMixMask) -> np.ndarray:
    if shape_hw != (m.H, m.W):
        raise DimensionError(
            f"cutmix mask is {m.H}x{m.W} but data is {shape_hw[0]}x{shape_hw[1]}")
    return m.dense()


def apply_cutmix(a: Tensor | np.ndarray, b: Tensor | np.ndarray,
                 m: CutMixMask) -> np.ndarray:
    """Per pixel: mask ? a : b, broadcast over leading (batch, channel) axes."""
    ad = a.data if isinstance(a, Tensor) else np.asarray(a)
    bd = b.data if isinstance(b, Tensor) else np.asarray(b)
    if ad.shape != bd.shape:
        raise DimensionError(
            f"apply_cutmix: image shapes differ: {ad.shape} vs {bd.shape}")
    dense = _mask_for(ad.shape[-2:], m)
    return np.where(dense.astype(bool), ad, bd)


def mix_pseudo_maps(ya: PseudoLabelMap, yb: PseudoLabelMap,
                    m: CutMixMask) -> PseudoLabelMap:
    """Per pixel: mask ? ya : yb. Same mask semantics as apply_cutmix, so the
    mixed map at a pixel always comes from the same source as the mixed
    image at that pixel."""
    if ya.labels.shape != yb.labels.shape:
        raise DimensionError(
            f"mix_pseudo_maps: label shapes differ: {ya.labels.shape} vs "
            f"{yb.labels.shape}")
    dense = _mask_for(ya.labels.shape[-2:], m)
    return PseudoLabelMap(labels=np.where(dense.astype(bool), ya.labels, yb.labels))


def flip_image(img: np.ndarray) -> np.ndarray:
    """Horizontal mirror (last axis)."""
    return img[..., ::-1].copy()


def flip_labels(labels: np.ndarray) -> np.ndarray:
    return labels[..., ::-1].copy()


def weak_augment(img: np.ndarray, labels: np.ndarray | None,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None, AugRecord]:
    """Horizontal flip with probability 0.5; labels flipped consistently."""
    flip = bool(rng.random() < 0.5)
    out = flip_image(img) if flip else img.copy()
    out_labels = None
    if labels is not None:
        out_labels = flip_labels(labels) if flip else labels.copy()
    return out, out_labels, AugRecord(flip=flip)


def photometric(img: np.ndarray, rng: np.random.Generator,
                sigma: float = NOISE_SIGMA,
                brightness_range: tuple[float, float] = BRIGHTNESS_RANGE,
                ) -> tuple[np.ndarray, AugRecord]:
    """Per-channel brightness scale plus additive Gaussian pixel noise.

    Purely photometric: pixel geometry is untouched, so a label map for
    ``img`` remains valid for the output.
    """
    brightness = rng.uniform(*brightness_range, size=img.shape[0])
    noise_seed = int(rng.integers(0, 2 ** 63))
    out = img * brightness[:, None, None]
    if sigma > 0:
        noise_rng = np.random.default_rng(noise_seed)
        out = out + noise_rng.normal(0.0, sigma, size=out.shape)
    return out, AugRecord(flip=False, noise_seed=noise_seed,
                          brightness=tuple(brightness), sigma=sigma)


def strong_augment(img: np.ndarray, rng: np.random.Generator,
                   sigma: float = NOISE_SIGMA,
                   brightness_range: tuple[float, float] = BRIGHTNESS_RANGE,
                   ) -> tuple[np.ndarray, AugRecord]:
    """weak_augment plus the photometric perturbation.

    With sigma 0 and a unit brightness range this reduces exactly to
    weak_augment. Geometry beyond the flip is untouched, so pseudo labels
    remain spatially valid for the strong view.
    """
    out, _, rec = weak_augment(img, None, rng)
    out, photo = photometric(out, rng, sigma=sigma, brightness_range=brightness_range)
    return out, AugRecord(flip=rec.flip, noise_seed=photo.noise_seed,
                          brightness=photo.brightness, sigma=photo.sigma)


def replay_weak(img: np.ndarray, labels: np.ndarray | None,
                rec: AugRecord) -> tuple[np.ndarray, np.ndarray | None]:
    """Re-apply a recorded flip; flipping twice with one record is identity."""
    out = flip_image(img) if rec.flip else img.copy()
    out_labels = None
    if labels is not None:
        out_labels = flip_labels(labels) if rec.flip else labels.copy()
    return out, out_labels


# ---------------------------------------------------------------------------
# multi-scale training support (labeled supervised branch; off by default)


def sample_scale(rng: np.random.Generator) -> float:
    return float(MULTISCALE_FACTORS[rng.integers(0, len(MULTISCALE_FACTORS))])


def _nearest_index(n_out: int, n_in: int) -> np.ndarray:
    return np.clip((np.arange(n_out) + 0.5) * n_in / n_out, 0, n_in - 1).astype(int)


def scale_image(img: np.ndarray, scale: float, align: int = 1) -> np.ndarray:
    """Nearest-neighbour rescale of [C,H,W]; output size rounded to ``align``."""
    if scale <= 0:
        raise ArgumentError(f"scale must be positive, got {scale}")
    _, H, W = img.shape
    H2 = max(align, int(round(H * scale / align)) * align)
    W2 = max(align, int(round(W * scale / align)) * align)
    return img[:, _nearest_index(H2, H)[:, None], _nearest_index(W2, W)[None, :]].copy()


def scale_labels(labels: np.ndarray, scale: float, align: int = 1) -> np.ndarray:
    if scale <= 0:
        raise ArgumentError(f"scale must be positive, got {scale}")
    H, W = labels.shape
    H2 = max(align, int(round(H * scale / align)) * align)
    W2 = max(align, int(round(W * scale / align)) * align)
    return labels[_nearest_index(H2, H)[:, None], _nearest_index(W2, W)[None, :]].copy()
