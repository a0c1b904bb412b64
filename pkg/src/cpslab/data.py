"""Deterministic synthetic shapes dataset and the labeled/unlabeled split.

Each sample is a [3,H,W] image in [0,1] with an integer label map: a
textured background (class 0) under 2-5 colored shapes. A class is a
(shape kind, color family) pair — rectangle/ellipse/triangle/diamond, one
kind per class, with evenly spaced hues — so both silhouette and color
carry class identity while per-shape jitter and per-pixel noise keep the
mapping imperfect. Everything is a pure function of the seed: per-sample
generators are derived by seed-sequence splitting, so generation order (or
parallel generation) cannot change the result.

Typical pixel budget with the defaults (64x64, K=5): background holds
roughly 45-90% of each image (about 72% of all pixels over hundreds of
samples), and each shape class claims a 15-40% share of the non-background
pixels.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DataError

__all__ = [
    "ToySample",
    "PartitionProtocol",
    "GuardedDataset",
    "generate_toy_dataset",
    "partition",
    "batch_iter",
    "derive_seed",
    "save_dataset",
    "load_dataset",
    "write_ppm",
    "write_pgm",
]

DATASET_MAGIC = b"CPSDATA1"
DATASET_VERSION = 1

PIXEL_NOISE = 0.15        # per-pixel Gaussian sigma, units of dynamic range
COLOR_JITTER = 0.20       # per-shape per-channel multiplicative perturbation
BRIGHTNESS_JITTER = (0.5, 1.5)  # per-shape scalar brightness range
TEXTURE_AMPLITUDE = 0.12  # smooth background texture sigma
_BORDER = 2               # frame border kept background in every sample


@dataclass(frozen=True)
class ToySample:
    image: np.ndarray   # [3,H,W] float64 in [0,1]
    labels: np.ndarray  # [H,W] int64 in [0,K)
    id: int


@dataclass(frozen=True)
class PartitionProtocol:
    """Disjoint labeled/unlabeled id split covering [0, n)."""

    ratio: float
    seed: int
    labeled_ids: tuple[int, ...]
    unlabeled_ids: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.labeled_ids) + len(self.unlabeled_ids)


def derive_seed(root: int, *parts: int) -> int:
    """Stable unsigned-64 seed derived from a root seed and integer tags."""
    ss = np.random.SeedSequence([int(root), *[int(p) for p in parts]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _palette(num_classes: int) -> np.ndarray:
    """One RGB color family per non-background class, evenly spaced hues."""
    colors = []
    for i in range(num_classes - 1):
        hue = (0.02 + i / (num_classes - 1)) % 1.0
        colors.append(colorsys.hsv_to_rgb(hue, 0.55, 0.75))
    return np.asarray(colors)


def _smooth_noise(H: int, W: int, rng: np.random.Generator,
                  grid: int = 9) -> np.ndarray:
    """Low-frequency texture: coarse Gaussian grid, bilinearly interpolated."""
    coarse = rng.normal(0.0, 1.0, size=(grid, grid))
    yy = np.linspace(0.0, grid - 1.0, H)
    xx = np.linspace(0.0, grid - 1.0, W)
    y0 = np.floor(yy).astype(int)
    x0 = np.floor(xx).astype(int)
    y1 = np.minimum(y0 + 1, grid - 1)
    x1 = np.minimum(x0 + 1, grid - 1)
    fy = (yy - y0)[:, None]
    fx = (xx - x0)[None, :]
    return (coarse[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
            + coarse[np.ix_(y1, x0)] * fy * (1 - fx)
            + coarse[np.ix_(y0, x1)] * (1 - fy) * fx
            + coarse[np.ix_(y1, x1)] * fy * fx)


def _shape_mask(kind: int, H: int, W: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask for one rectangle (0), ellipse (1), triangle (2), or
    diamond (3).

    Extents are clamped inside a small border so background pixels survive
    in every sample.
    """
    yy, xx = np.mgrid[0:H, 0:W]
    lo = _BORDER
    cy = rng.uniform(H * 0.30, H * 0.70)
    cx = rng.uniform(W * 0.30, W * 0.70)
    ry = rng.uniform(H * 0.12, H * 0.30)
    rx = rng.uniform(W * 0.12, W * 0.30)
    if kind == 0:
        t = np.clip(cy - ry, lo, H - lo)
        b = np.clip(cy + ry, lo, H - lo)
        l = np.clip(cx - rx, lo, W - lo)
        r = np.clip(cx + rx, lo, W - lo)
        return (yy >= t) & (yy < b) & (xx >= l) & (xx < r)
    if kind == 1:
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    elif kind == 3:
        mask = (np.abs(yy - cy) / ry + np.abs(xx - cx) / rx) <= 1.0
    else:
        theta = rng.uniform(0.0, 2.0 * np.pi)
        radius = (ry + rx) / 2.0 * 1.2
        angles = theta + np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0])
        vy = cy + radius * np.sin(angles)
        vx = cx + radius * np.cos(angles)
        mask = np.ones((H, W), dtype=bool)
        for i in range(3):
            j = (i + 1) % 3
            cross = ((vx[j] - vx[i]) * (yy - vy[i])
                     - (vy[j] - vy[i]) * (xx - vx[i]))
            # vertices wind consistently because angles increase; accept the
            # side containing the centroid
            centroid_cross = ((vx[j] - vx[i]) * (cy - vy[i])
                              - (vy[j] - vy[i]) * (cx - vx[i]))
            mask &= (cross * np.sign(centroid_cross)) >= 0
    border = np.zeros((H, W), dtype=bool)
    border[lo:H - lo, lo:W - lo] = True
    return mask & border


def _generate_sample(sample_id: int, H: int, W: int, K: int,
                     rng: np.random.Generator) -> ToySample:
    palette = _palette(K)
    tint = rng.uniform(0.25, 0.7, size=3)
    texture = _smooth_noise(H, W, rng) * TEXTURE_AMPLITUDE
    image = tint[:, None, None] + texture[None, :, :]
    labels = np.zeros((H, W), dtype=np.int64)
    n_shapes = int(rng.integers(2, 6))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, K))
        mask = _shape_mask((cls - 1) % 4, H, W, rng)
        if not mask.any():
            continue
        brightness = rng.uniform(*BRIGHTNESS_JITTER)
        jitter = rng.uniform(1.0 - COLOR_JITTER, 1.0 + COLOR_JITTER, size=3)
        color = np.clip(palette[cls - 1] * brightness * jitter, 0.05, 0.95)
        shading = _smooth_noise(H, W, rng) * 0.10
        image = np.where(mask[None, :, :],
                         color[:, None, None] + shading[None, :, :], image)
        labels = np.where(mask, cls, labels)
    image = image + rng.normal(0.0, PIXEL_NOISE, size=image.shape)
    return ToySample(image=np.clip(image, 0.0, 1.0), labels=labels, id=sample_id)


def generate_toy_dataset(n: int, H: int, W: int, K: int, seed: int) -> list[ToySample]:
    """n deterministic samples; sample i uses a generator derived from
    (seed, i), so any generation order gives bitwise-identical results."""
    if K < 2:
        raise ArgumentError(f"generate_toy_dataset: K must be >= 2, got {K}")
    if H < 16 or W < 16:
        raise ArgumentError(
            f"generate_toy_dataset: H, W must be >= 16, got {H}x{W}")
    if n < 1:
        raise ArgumentError(f"generate_toy_dataset: n must be >= 1, got {n}")
    samples = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        samples.append(_generate_sample(i, H, W, K, rng))
    return samples


class GuardedDataset:
    """Sample store that counts every ground-truth label read per id.

    Semi-supervised methods must never read labels of unlabeled training
    ids; the counters make that auditable after a run.
    """

    def __init__(self, samples: list[ToySample]):
        self._samples = {s.id: s for s in samples}
        self.label_reads: dict[int, int] = {s.id: 0 for s in samples}

    def __len__(self) -> int:
        return len(self._samples)

    @property
    def ids(self) -> list[int]:
        return sorted(self._samples)

    def image(self, sample_id: int) -> np.ndarray:
        return self._samples[sample_id].image

    def labels(self, sample_id: int) -> np.ndarray:
        self.label_reads[sample_id] += 1
        return self._samples[sample_id].labels

    def images(self, ids) -> np.ndarray:
        return np.stack([self.image(i) for i in ids])

    def labels_batch(self, ids) -> np.ndarray:
        return np.stack([self.labels(i) for i in ids])

    def reads_within(self, ids) -> int:
        return sum(self.label_reads[i] for i in ids)


def partition(n: int, ratio: float, seed: int) -> PartitionProtocol:
    """Seeded shuffle of [0, n); the first round(ratio*n) ids (round half
    up, at least 1) become the labeled set."""
    if not 0.0 < ratio <= 1.0:
        raise ArgumentError(f"partition: ratio must be in (0, 1], got {ratio}")
    if n < 1:
        raise ArgumentError(f"partition: n must be >= 1, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    perm = rng.permutation(n)
    m = max(1, int(np.floor(ratio * n + 0.5)))
    return PartitionProtocol(
        ratio=float(ratio), seed=int(seed),
        labeled_ids=tuple(sorted(int(i) for i in perm[:m])),
        unlabeled_ids=tuple(sorted(int(i) for i in perm[m:])))


class _CycledStream:
    """Fresh permutation per epoch, wrapped into the next permutation so
    every batch is full; each id appears once before any repeats."""

    def __init__(self, ids: tuple[int, ...], rng: np.random.Generator):
        self._ids = np.asarray(ids, dtype=np.int64)
        self._rng = rng
        self._queue = np.empty(0, dtype=np.int64)

    def draw(self, k: int) -> np.ndarray:
        if self._ids.size == 0:
            return np.empty(0, dtype=np.int64)
        while self._queue.size < k:
            perm = self._rng.permutation(self._ids)
            self._queue = np.concatenate([self._queue, perm])
        out, self._queue = self._queue[:k], self._queue[k:]
        return out


def batch_iter(protocol: PartitionProtocol, batch_labeled: int,
               batch_unlabeled: int, rng: np.random.Generator):
    """One epoch of (labeled ids, unlabeled ids) batches.

    The labeled stream defines the epoch: ceil(|labeled| / batch_labeled)
    iterations. Both streams draw fresh independent permutations and cycle
    so every batch is full. The two streams come from spawned child
    generators, so consuming (or never consuming) unlabeled batches cannot
    change the labeled sequence.
    """
    if batch_labeled < 1 or batch_unlabeled < 1:
        raise ArgumentError(
            f"batch_iter: batch sizes must be >= 1, got "
            f"({batch_labeled}, {batch_unlabeled})")
    rng_labeled, rng_unlabeled = rng.spawn(2)
    labeled = _CycledStream(protocol.labeled_ids, rng_labeled)
    unlabeled = _CycledStream(protocol.unlabeled_ids, rng_unlabeled)
    iters = -(-len(protocol.labeled_ids) // batch_labeled)
    for _ in range(iters):
        yield labeled.draw(batch_labeled), unlabeled.draw(batch_unlabeled)


# ---------------------------------------------------------------------------
# dataset cache: little-endian binary.
#   magic(8) | version u32 | n u32 | H u32 | W u32 | K u32 | seed u64
#   | per sample: image float64 [3,H,W], labels uint16 [H,W]


def save_dataset(path: str | Path, samples: list[ToySample], K: int,
                 seed: int) -> Path:
    path = Path(path)
    H, W = samples[0].labels.shape
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IIIII", DATASET_VERSION, len(samples), H, W, K))
        f.write(struct.pack("<Q", seed))
        for s in samples:
            if s.image.shape != (3, H, W) or s.labels.shape != (H, W):
                raise DataError(f"sample {s.id}: inconsistent shapes")
            f.write(s.image.astype("<f8").tobytes())
            f.write(s.labels.astype("<u2").tobytes())
    return path


def load_dataset(path: str | Path) -> tuple[list[ToySample], int, int]:
    """Returns (samples, K, seed)."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != DATASET_MAGIC:
            raise DataError(f"{path}: not a cpslab dataset (magic {magic!r})")
        version, n, H, W, K = struct.unpack("<IIIII", f.read(20))
        if version != DATASET_VERSION:
            raise DataError(f"{path}: unsupported dataset version {version}")
        (seed,) = struct.unpack("<Q", f.read(8))
        samples = []
        img_bytes = 3 * H * W * 8
        lab_bytes = H * W * 2
        for i in range(n):
            image = np.frombuffer(f.read(img_bytes), dtype="<f8").reshape(3, H, W)
            labels = np.frombuffer(f.read(lab_bytes), dtype="<u2").reshape(H, W)
            samples.append(ToySample(image=image.copy(),
                                     labels=labels.astype(np.int64), id=i))
    return samples, K, seed


def write_ppm(path: str | Path, image: np.ndarray) -> Path:
    """Binary P6 image from a [3,H,W] float array in [0,1]."""
    path = Path(path)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"write_ppm: need [3,H,W], got {image.shape}")
    _, H, W = image.shape
    px = (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{W} {H}\n255\n".encode())
        f.write(px.transpose(1, 2, 0).tobytes())
    return path


def write_pgm(path: str | Path, labels: np.ndarray, num_classes: int) -> Path:
    """Binary P5 label visualization: classes spread over the gray range."""
    path = Path(path)
    if labels.ndim != 2:
        raise DataError(f"write_pgm: need [H,W], got {labels.shape}")
    H, W = labels.shape
    step = 255 // max(1, num_classes - 1)
    px = (np.clip(labels, 0, num_classes - 1) * step).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n255\n".encode())
        f.write(px.tobytes())
    return path
