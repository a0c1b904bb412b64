"""Command-line interface.

Subcommands: gen-data, train, eval, sweep, export-samples. Options can come
from a flat ``key = value`` config file (``--config``); explicit flags
override file values. Exit codes: 0 success, 1 runtime failure, 2 usage
error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (derive_seed, generate_toy_dataset, load_dataset,
                   save_dataset, write_pgm, write_ppm)
from .errors import ConfigError, CpsLabError
from .experiments import ExperimentSpec, run_experiments
from .methods import (MethodKind, TrainConfig, train, write_run_dir)
from .metrics import ConfusionMatrix, accumulate, miou
from .model import load_checkpoint

__all__ = ["cli", "main"]


def _parse_ratio(text: str) -> float:
    """Accept '1/8' fractions or plain floats; must land in (0, 1]."""
    try:
        if "/" in text:
            num, den = text.split("/", 1)
            value = float(num) / float(den)
        else:
            value = float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"invalid ratio {text!r}") from exc
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(
            f"ratio must be in (0, 1], got {text!r}")
    return value


def _parse_bool(text: str) -> bool:
    lower = text.strip().lower()
    if lower in ("1", "true", "yes", "on"):
        return True
    if lower in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


_CONFIG_CASTS = {
    "method": lambda s: MethodKind(s),
    "lam": float,
    "epochs": int,
    "base_lr": float,
    "batch_labeled": int,
    "batch_unlabeled": int,
    "seed_data": int,
    "seed_net1": int,
    "seed_net2": int,
    "seed_aug": int,
    "partition_seed": int,
    "ohem": _parse_bool,
    "ohem_threshold": float,
    "ema_alpha": float,
    "cps_on_labeled": _parse_bool,
    "confidence_threshold": lambda s: None if s.lower() == "none" else float(s),
    "multiscale_labeled": _parse_bool,
    "multiscale_unlabeled": _parse_bool,
    "photometric_batches": _parse_bool,
    "overlap_exclude_predicted_background": _parse_bool,
    "momentum": float,
    "weight_decay": float,
    "lr_power": float,
    "n": int,
    "H": int,
    "W": int,
    "num_classes": int,
    "in_channels": int,
    "ratio": _parse_ratio,
    "val_n": int,
    "widths": _parse_int_list,
    "depth": int,
}
_CONFIG_ALIASES = {"lambda": "lam", "height": "H", "width": "W",
                   "classes": "num_classes"}
_SWEEP_KEYS = {"methods", "ratios", "seeds", "out"}


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment; blanks ignored."""
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', "
                              f"got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        entries[_CONFIG_ALIASES.get(key, key)] = value
    return entries


def build_train_config(file_entries: dict[str, str],
                       overrides: dict[str, object]) -> TrainConfig:
    """File entries first, explicit CLI overrides last."""
    kwargs: dict[str, object] = {}
    for key, raw in file_entries.items():
        if key in _SWEEP_KEYS:
            continue
        if key not in _CONFIG_CASTS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            kwargs[key] = _CONFIG_CASTS[key](raw)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**kwargs)


def _apply_seed(kwargs: dict, seed: int | None) -> None:
    """One --seed drives partition, both network inits, and augmentation,
    using the same derivation as the sweep runner."""
    if seed is None:
        return
    net1 = derive_seed(seed, 2)
    net2 = derive_seed(seed, 3)
    if net1 == net2:
        net2 ^= 1
    kwargs.update(partition_seed=derive_seed(seed, 1), seed_net1=net1,
                  seed_net2=net2, seed_aug=derive_seed(seed, 4))


def _apply_cutmix(kwargs: dict, file_entries: dict, cutmix: bool,
                  parser: argparse.ArgumentParser) -> None:
    if not cutmix:
        return
    method = kwargs.get("method")
    if method is None and "method" in file_entries:
        method = MethodKind(file_entries["method"])
    upgrades = {MethodKind.CPS: MethodKind.CPS_CUTMIX,
                MethodKind.CPS_CUTMIX: MethodKind.CPS_CUTMIX,
                MethodKind.SPS: MethodKind.SPS_CUTMIX,
                MethodKind.SPS_CUTMIX: MethodKind.SPS_CUTMIX}
    if method not in upgrades:
        parser.error(f"--cutmix applies to cps or sps, not "
                     f"{method.value if method else 'unset method'}")
    kwargs["method"] = upgrades[method]


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    samples = generate_toy_dataset(args.n, args.height, args.width,
                                   args.classes, args.seed)
    path = save_dataset(args.out, samples, args.classes, args.seed)
    print(f"wrote {len(samples)} samples ({args.classes} classes, "
          f"{args.height}x{args.width}) to {path}")
    return 0


def _cmd_train(args, parser) -> int:
    file_entries = read_config_file(args.config) if args.config else {}
    overrides = {"method": MethodKind(args.method) if args.method else None,
                 "ratio": args.ratio, "lam": args.lam, "epochs": args.epochs,
                 "base_lr": args.base_lr,
                 "ohem": True if args.ohem else None}
    kwargs = {k: v for k, v in overrides.items() if v is not None}
    _apply_seed(kwargs, args.seed)
    _apply_cutmix(kwargs, file_entries, args.cutmix, parser)
    cfg = build_train_config(file_entries, kwargs)
    result = train(cfg)
    out = Path(args.out)
    write_run_dir(result, out)
    final = result.records[-1]
    print(f"method={cfg.method.value} ratio={cfg.ratio:g} "
          f"epochs={cfg.epochs}")
    print(f"final mIoU {100 * final.miou:.2f}% "
          f"(records and checkpoints in {out})")
    for note in result.notes:
        print(f"note: {note}")
    return 0


def _cmd_eval(args) -> int:
    net = load_checkpoint(args.checkpoint)
    if args.data:
        samples, num_classes, _ = load_dataset(args.data)
    else:
        num_classes = net.config.num_classes
        samples = generate_toy_dataset(
            args.n, args.height, args.width, num_classes,
            derive_seed(args.seed, 0x7A1))
    if num_classes != net.config.num_classes:
        raise ConfigError(
            f"checkpoint has {net.config.num_classes} classes but dataset "
            f"has {num_classes}")
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.labels for s in samples])
    conf = ConfusionMatrix(num_classes)
    with T.stop_recording():
        for s in range(0, len(images), 16):
            pred = np.argmax(net.forward(images[s:s + 16]).data, axis=1)
            accumulate(conf, pred, labels[s:s + 16])
    per_class, mean = miou(conf)
    for k, iou in enumerate(per_class):
        label = "background" if k == 0 else f"class {k}"
        text = "absent" if np.isnan(iou) else f"{100 * iou:.2f}%"
        print(f"IoU {label}: {text}")
    print(f"mIoU: {100 * mean:.2f}% over {len(samples)} images")
    return 0


def _cmd_sweep(args) -> int:
    file_entries = read_config_file(args.config) if args.config else {}
    methods = (tuple(MethodKind(m) for m in args.methods.split(","))
               if args.methods else
               tuple(MethodKind(m.strip()) for m in
                     file_entries.get("methods", "").split(",") if m.strip()))
    ratios = (tuple(_parse_ratio(r) for r in args.ratios.split(","))
              if args.ratios else
              tuple(_parse_ratio(r.strip()) for r in
                    file_entries.get("ratios", "").split(",") if r.strip()))
    seeds = (_parse_int_list(args.seeds) if args.seeds
             else _parse_int_list(file_entries.get("seeds", "")))
    out = Path(args.out if args.out else file_entries.get("out", "sweep_out"))
    base_overrides = {"epochs": args.epochs, "lam": args.lam,
                      "base_lr": args.base_lr}
    base = build_train_config(
        file_entries, {k: v for k, v in base_overrides.items() if v is not None})
    spec = ExperimentSpec(methods=methods, ratios=ratios, seeds=seeds,
                          out_dir=out, base=base)
    outcome = run_experiments(spec)
    print(f"completed {len(outcome.results)} runs, "
          f"{len(outcome.failures)} failed")
    print(f"table: {outcome.table_path}")
    print(f"summary: {outcome.summary_csv_path}")
    for p in outcome.plot_paths:
        print(f"plot: {p}")
    if outcome.failures:
        for name, err in sorted(outcome.failures.items()):
            print(f"failed: {name}: {err}", file=sys.stderr)
        return 1
    return 0


def _cmd_export_samples(args) -> int:
    if args.data:
        samples, num_classes, _ = load_dataset(args.data)
    else:
        num_classes = args.classes
        samples = generate_toy_dataset(args.n, args.height, args.width,
                                       args.classes, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = min(args.count, len(samples))
    for s in samples[:count]:
        write_ppm(out / f"sample_{s.id:04d}_image.ppm", s.image)
        write_pgm(out / f"sample_{s.id:04d}_labels.pgm", s.labels, num_classes)
    print(f"exported {count} image/label pairs to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cpslab",
        description="Dual-network pseudo supervision lab: synthetic "
                    "segmentation data, training methods, and sweeps.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-data", help="generate and cache a toy dataset")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output cache file")
    p.set_defaults(func=lambda a, pr: _cmd_gen_data(a))

    methods = [m.value for m in MethodKind]
    p = sub.add_parser("train", help="train one method, write a run directory")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--method", choices=methods)
    p.add_argument("--ratio", type=_parse_ratio,
                   help="labeled fraction, e.g. 1/8 or 0.125")
    p.add_argument("--lambda", dest="lam", type=float,
                   help="consistency trade-off weight")
    p.add_argument("--seed", type=int,
                   help="drives partition, network inits, and augmentation")
    p.add_argument("--epochs", type=int)
    p.add_argument("--base-lr", dest="base_lr", type=float)
    p.add_argument("--ohem", action="store_true", default=False,
                   help="hard-pixel mining for the supervised term")
    p.add_argument("--cutmix", action="store_true", default=False,
                   help="upgrade cps/sps to their CutMix variants")
    p.add_argument("--out", default="run_out", help="run directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (mIoU)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset cache file; omit to generate")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--seed", type=int, default=0,
                   help="data seed for the generated eval set")
    p.set_defaults(func=lambda a, pr: _cmd_eval(a))

    p = sub.add_parser("sweep", help="run a (method x ratio x seed) grid")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--methods", help="comma-separated method names")
    p.add_argument("--ratios", help="comma-separated ratios (1/8,1/4,...)")
    p.add_argument("--seeds", help="comma-separated integer seeds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--base-lr", dest="base_lr", type=float)
    p.add_argument("--out", help="sweep output directory")
    p.set_defaults(func=lambda a, pr: _cmd_sweep(a))

    p = sub.add_parser("export-samples",
                       help="write PPM images and PGM label maps")
    p.add_argument("--data", help="dataset cache file; omit to generate")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=lambda a, pr: _cmd_export_samples(a))

    return parser


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args, parser)
    except SystemExit as exc:  # parser.error inside a subcommand
        return int(exc.code or 0)
    except CpsLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())
