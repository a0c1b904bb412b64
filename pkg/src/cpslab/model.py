"""Tiny encoder-decoder segmentation network and the two-network construction.

The network maps [B, Cin, H, W] images to [B, K, H, W] class logits at the
input resolution: ``depth`` encoder stages of stride-2 conv3x3 -> channel
norm -> relu, the mirrored decoder of x2 bilinear upsample -> conv3x3 ->
norm -> relu, and a 1x1 projection head. Initialization is Kaiming fan-in
(normal with variance 2/fan_in) from a seeded generator, so a config plus a
seed pins every parameter bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ArgumentError, ConfigError, DimensionError
from .tensor import Tape, Tensor

__all__ = [
    "SegNetConfig",
    "SegNet",
    "DualNetworks",
    "build_segnet",
    "init_dual",
    "ema_update",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"CPSCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SegNetConfig:
    in_channels: int = 3
    num_classes: int = 5
    widths: tuple[int, ...] = (16, 32)
    depth: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ConfigError(f"widths must be non-empty and positive, got {self.widths}")
        if self.depth != len(self.widths):
            raise ConfigError(
                f"depth ({self.depth}) must equal len(widths) ({len(self.widths)})")
        if self.in_channels <= 0:
            raise ConfigError(f"in_channels must be positive, got {self.in_channels}")


def _layer_plan(config: SegNetConfig) -> list[tuple[str, str, int, int, int]]:
    """(name, kind, c_in, c_out, kernel) for every layer, in forward order."""
    plan = []
    c = config.in_channels
    for i, w in enumerate(config.widths, start=1):
        plan.append((f"enc{i}.conv", "conv", c, w, 3))
        plan.append((f"enc{i}.norm", "norm", w, w, 0))
        c = w
    rev = list(config.widths[:-1][::-1]) + [config.widths[0]]
    for i, w in enumerate(rev, start=1):
        plan.append((f"dec{i}.conv", "conv", c, w, 3))
        plan.append((f"dec{i}.norm", "norm", w, w, 0))
        c = w
    plan.append(("head", "conv", c, config.num_classes, 1))
    return plan


class SegNet:
    """One segmentation network: an ordered name->Tensor parameter map."""

    def __init__(self, config: SegNetConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.forward_count = 0

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, images: Tensor | np.ndarray, tape: Tape | None = None) -> Tensor:
        """Logits [B,K,H,W]; recorded on ``tape`` when one is given."""
        if tape is not None:
            with tape:
                return self.forward(images)
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.data.ndim != 4:
            raise DimensionError(f"forward: images must be [B,Cin,H,W], got {x.shape}")
        B, C, H, W = x.shape
        if C != self.config.in_channels:
            raise DimensionError(
                f"forward: image channels {C} != configured {self.config.in_channels}")
        stride = 2 ** self.config.depth
        if H % stride or W % stride:
            raise ArgumentError(
                f"forward: spatial size {H}x{W} not divisible by 2^depth = {stride}")
        self.forward_count += 1
        p = self.params
        for i in range(1, self.config.depth + 1):
            x = T.conv2d(x, p[f"enc{i}.conv.weight"], p[f"enc{i}.conv.bias"],
                         stride=2, padding=1)
            x = T.channel_norm(x, p[f"enc{i}.norm.gain"], p[f"enc{i}.norm.shift"])
            x = T.relu(x)
        for i in range(1, self.config.depth + 1):
            x = T.bilinear_upsample(x, 2)
            x = T.conv2d(x, p[f"dec{i}.conv.weight"], p[f"dec{i}.conv.bias"],
                         stride=1, padding=1)
            x = T.channel_norm(x, p[f"dec{i}.norm.gain"], p[f"dec{i}.norm.shift"])
            x = T.relu(x)
        return T.conv2d(x, p["head.weight"], p["head.bias"], stride=1, padding=0)

    def copy(self) -> "SegNet":
        clone = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=v.name)
                 for k, v in self.params.items()}
        return SegNet(self.config, clone)

    def load_values(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            a = arrays[k]
            if a.shape != p.data.shape:
                raise DimensionError(
                    f"load: array {k} has shape {a.shape}, expected {p.data.shape}")
            p.data = np.ascontiguousarray(a, dtype=np.float64)


def build_segnet(config: SegNetConfig) -> SegNet:
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    params: dict[str, Tensor] = {}
    for name, kind, c_in, c_out, k in _layer_plan(config):
        if kind == "conv":
            fan_in = c_in * k * k
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))
            params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
            params[f"{name}.bias"] = Tensor(np.zeros(c_out), requires_grad=True,
                                            name=f"{name}.bias")
        else:
            params[f"{name}.gain"] = Tensor(np.ones(c_out), requires_grad=True,
                                            name=f"{name}.gain")
            params[f"{name}.shift"] = Tensor(np.zeros(c_out), requires_grad=True,
                                             name=f"{name}.shift")
    return SegNet(config, params)


@dataclass
class DualNetworks:
    """Two identically shaped networks with different initial weights."""

    net1: SegNet
    net2: SegNet


def init_dual(config: SegNetConfig, seed1: int, seed2: int) -> DualNetworks:
    if seed1 == seed2:
        raise ArgumentError(
            f"init_dual: seeds must differ (both {seed1}); equal seeds collapse "
            "the two networks into one")
    net1 = build_segnet(replace(config, seed=seed1))
    net2 = build_segnet(replace(config, seed=seed2))
    return DualNetworks(net1, net2)


def ema_update(teacher: SegNet, student: SegNet, alpha: float) -> None:
    """teacher <- alpha * teacher + (1 - alpha) * student, parameter-wise."""
    if not 0 <= alpha < 1:
        raise ArgumentError(f"ema_update: alpha must be in [0, 1), got {alpha}")
    for name, tp in teacher.params.items():
        sp = student.params[name]
        if tp.data.shape != sp.data.shape:
            raise DimensionError(
                f"ema_update: {name} shapes differ: {tp.data.shape} vs {sp.data.shape}")
        tp.data = alpha * tp.data + (1.0 - alpha) * sp.data


# ---------------------------------------------------------------------------
# checkpoint format: little-endian throughout.
#   magic(8) | version u32 | config_json_len u32 | config_json utf8
#   | n_arrays u32 | repeat: name_len u32, name utf8, ndim u32,
#                            dims u32 x ndim, float64 data


def save_checkpoint(net: SegNet, path: str | Path) -> Path:
    path = Path(path)
    cfg = {
        "in_channels": net.config.in_channels,
        "num_classes": net.config.num_classes,
        "widths": list(net.config.widths),
        "depth": net.config.depth,
        "seed": net.config.seed,
    }
    blob = json.dumps(cfg, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(net.params)))
        for name, p in net.params.items():
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            f.write(p.data.astype("<f8").tobytes())
    return path


def load_checkpoint(path: str | Path) -> SegNet:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ArgumentError(f"{path}: not a cpslab checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ArgumentError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", f.read(4))
        cfg = json.loads(f.read(blob_len).decode())
        config = SegNetConfig(in_channels=cfg["in_channels"],
                              num_classes=cfg["num_classes"],
                              widths=tuple(cfg["widths"]),
                              depth=cfg["depth"],
                              seed=cfg["seed"])
        (n_arrays,) = struct.unpack("<I", f.read(4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode()
            (ndim,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(dims)
            arrays[name] = data
    net = build_segnet(config)
    net.load_values(arrays)
    return net
