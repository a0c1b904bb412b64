"""Experiment sweeps: run a (method x ratio x seed) grid and emit the
comparison artifacts — per-run CSV curves, a markdown summary table
(mean +/- stdev mIoU over seeds), and self-contained SVG line plots.

Every emitted byte is a pure function of the sweep specification: plots are
written by a small built-in SVG writer with fixed formatting, and no file
contains timestamps or host details, so reruns are byte-identical.

The environment variable CPSLAB_THREADS (default 1) caps how many runs
execute concurrently; each run owns its dataset wrapper and tape stack, so
results do not depend on the worker count.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import GuardedDataset, derive_seed, generate_toy_dataset, partition
from .errors import ConfigError, CpsLabError
from .methods import (MethodKind, RunResult, TrainConfig, train,
                      write_run_dir)

__all__ = [
    "ExperimentSpec",
    "SweepOutcome",
    "run_experiments",
    "write_svg_lines",
]

logger = logging.getLogger("cpslab")

# per-sweep-seed derivation tags
_TAG_PARTITION = 1
_TAG_NET1 = 2
_TAG_NET2 = 3
_TAG_AUG = 4

_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
               "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f")


@dataclass(frozen=True)
class ExperimentSpec:
    """A sweep grid: every method runs at every ratio with every seed."""

    methods: tuple[MethodKind, ...]
    ratios: tuple[float, ...]
    seeds: tuple[int, ...]
    out_dir: Path
    base: TrainConfig

    def validate(self) -> None:
        if not self.methods or not self.ratios or not self.seeds:
            raise ConfigError("experiment spec needs at least one method, "
                              "ratio, and seed")
        for r in self.ratios:
            if not 0.0 < r <= 1.0:
                raise ConfigError(f"ratio must be in (0, 1], got {r}")


@dataclass
class RunKey:
    method: MethodKind
    ratio: float
    seed: int

    @property
    def name(self) -> str:
        return f"{self.method.value}_r{self.ratio:g}_s{self.seed}"


@dataclass
class SweepOutcome:
    spec: ExperimentSpec
    results: dict[str, RunResult]
    failures: dict[str, str]
    table_path: Path
    summary_csv_path: Path
    plot_paths: list[Path]


def _run_config(spec: ExperimentSpec, key: RunKey) -> TrainConfig:
    seed_net1 = derive_seed(key.seed, _TAG_NET1)
    seed_net2 = derive_seed(key.seed, _TAG_NET2)
    if seed_net1 == seed_net2:
        seed_net2 ^= 1
    return replace(spec.base, method=key.method, ratio=key.ratio,
                   partition_seed=derive_seed(key.seed, _TAG_PARTITION),
                   seed_net1=seed_net1, seed_net2=seed_net2,
                   seed_aug=derive_seed(key.seed, _TAG_AUG))


def _worker_count() -> int:
    raw = os.environ.get("CPSLAB_THREADS", "1")
    try:
        workers = int(raw)
    except ValueError as exc:
        raise ConfigError(f"CPSLAB_THREADS must be an integer, got {raw!r}") from exc
    return max(1, workers)


def run_experiments(spec: ExperimentSpec) -> SweepOutcome:
    """Execute the grid, write all artifacts under spec.out_dir.

    Individual run failures are recorded and the remaining runs continue;
    the failures land in the markdown report, and callers should treat a
    non-empty failure set as a nonzero exit.
    """
    spec.validate()
    out_dir = Path(spec.out_dir)
    (out_dir / "runs").mkdir(parents=True, exist_ok=True)
    base = spec.base
    samples = generate_toy_dataset(base.n, base.H, base.W, base.num_classes,
                                   base.seed_data)
    val_samples = generate_toy_dataset(
        base.val_n, base.H, base.W, base.num_classes,
        derive_seed(base.seed_data, 0x7A1))
    val_data = (np.stack([s.image for s in val_samples]),
                np.stack([s.labels for s in val_samples]))
    keys = [RunKey(m, r, s) for m in spec.methods for r in spec.ratios
            for s in spec.seeds]

    def one_run(key: RunKey):
        cfg = _run_config(spec, key)
        dataset = GuardedDataset(samples)
        protocol = partition(len(samples), cfg.ratio, cfg.partition_seed)
        result = train(cfg, dataset, protocol, val_data)
        write_run_dir(result, out_dir / "runs" / key.name)
        return result

    results: dict[str, RunResult] = {}
    failures: dict[str, str] = {}
    workers = _worker_count()
    if workers == 1:
        outcomes = []
        for key in keys:
            try:
                outcomes.append((key, one_run(key), None))
            except CpsLabError as exc:
                outcomes.append((key, None, f"{type(exc).__name__}: {exc}"))
    else:
        def guarded(key):
            try:
                return key, one_run(key), None
            except CpsLabError as exc:
                return key, None, f"{type(exc).__name__}: {exc}"
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(guarded, keys))
    for key, result, err in outcomes:
        if err is None:
            results[key.name] = result
        else:
            logger.error("run %s failed: %s", key.name, err)
            failures[key.name] = err

    table_path = _write_table(spec, results, failures, out_dir)
    summary_csv = _write_summary_csv(spec, results, out_dir)
    plots = [
        _plot_miou_vs_ratio(spec, results, out_dir),
        _plot_overlap_vs_epoch(spec, results, out_dir),
    ]
    return SweepOutcome(spec=spec, results=results, failures=failures,
                        table_path=table_path, summary_csv_path=summary_csv,
                        plot_paths=[p for p in plots if p is not None])


def _final_mious(spec, results, method, ratio) -> list[float]:
    vals = []
    for seed in spec.seeds:
        key = RunKey(method, ratio, seed).name
        if key in results:
            vals.append(results[key].records[-1].miou)
    return vals


def _ratio_label(r: float) -> str:
    inv = 1.0 / r
    if abs(inv - round(inv)) < 1e-9 and round(inv) > 1:
        return f"1/{int(round(inv))}"
    return f"{r:g}"


def _write_table(spec, results, failures, out_dir: Path) -> Path:
    """Markdown table: rows = methods, cols = ratios, cells = mean +/- stdev
    of final-epoch mIoU (percent) over seeds."""
    lines = ["# Sweep summary", "",
             f"Final-epoch validation mIoU (%), mean ± stdev over "
             f"{len(spec.seeds)} seeds.", ""]
    header = "| method | " + " | ".join(_ratio_label(r) for r in spec.ratios) + " |"
    sep = "|---" * (1 + len(spec.ratios)) + "|"
    lines += [header, sep]
    for m in spec.methods:
        cells = []
        for r in spec.ratios:
            vals = _final_mious(spec, results, m, r)
            if not vals:
                cells.append("failed")
            else:
                arr = 100.0 * np.asarray(vals)
                cells.append(f"{arr.mean():.2f} ± {arr.std():.2f}")
        lines.append(f"| {m.value} | " + " | ".join(cells) + " |")
    if failures:
        lines += ["", "## Failed runs", ""]
        for name in sorted(failures):
            lines.append(f"- `{name}`: {failures[name]}")
    path = out_dir / "table.md"
    path.write_text("\n".join(lines) + "\n")
    return path


def _write_summary_csv(spec, results, out_dir: Path) -> Path:
    lines = ["method,ratio,seed,final_miou,final_overlap"]
    for m in spec.methods:
        for r in spec.ratios:
            for s in spec.seeds:
                key = RunKey(m, r, s).name
                if key not in results:
                    continue
                rec = results[key].records[-1]
                ov = "" if rec.overlap is None else f"{rec.overlap:.10g}"
                lines.append(f"{m.value},{r:g},{s},{rec.miou:.10g},{ov}")
    path = out_dir / "summary.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# self-contained SVG line plots (fixed formatting => byte-identical reruns)


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def write_svg_lines(path: str | Path, series, x_label: str, y_label: str,
                    title: str) -> Path:
    """Minimal line plot: ``series`` is a list of (label, xs, ys)."""
    width, height = 640, 440
    ml, mr, mt, mb = 70, 160, 40, 50
    pw, ph = width - ml - mr, height - mt - mb
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    x_lo, x_hi = (min(xs_all), max(xs_all)) if xs_all else (0.0, 1.0)
    y_lo, y_hi = (min(ys_all), max(ys_all)) if ys_all else (0.0, 1.0)
    if x_hi <= x_lo:
        x_hi = x_lo + 1.0
    if y_hi <= y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(x):
        return ml + pw * (x - x_lo) / (x_hi - x_lo)

    def sy(y):
        return mt + ph * (1.0 - (y - y_lo) / (y_hi - y_lo))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
           f'height="{height}" viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{ml + pw / 2:.1f}" y="24" text-anchor="middle" '
           f'font-family="sans-serif" font-size="15">{title}</text>']
    # axes
    out.append(f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" '
               'stroke="black" stroke-width="1"/>')
    out.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" '
               'stroke="black" stroke-width="1"/>')
    for tx in _ticks(x_lo, x_hi):
        out.append(f'<line x1="{sx(tx):.2f}" y1="{mt + ph}" x2="{sx(tx):.2f}" '
                   f'y2="{mt + ph + 5}" stroke="black" stroke-width="1"/>')
        out.append(f'<text x="{sx(tx):.2f}" y="{mt + ph + 20}" '
                   'text-anchor="middle" font-family="sans-serif" '
                   f'font-size="11">{tx:.3g}</text>')
    for ty in _ticks(y_lo, y_hi):
        out.append(f'<line x1="{ml - 5}" y1="{sy(ty):.2f}" x2="{ml}" '
                   f'y2="{sy(ty):.2f}" stroke="black" stroke-width="1"/>')
        out.append(f'<text x="{ml - 9}" y="{sy(ty) + 4:.2f}" '
                   'text-anchor="end" font-family="sans-serif" '
                   f'font-size="11">{ty:.3g}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 12}" '
               'text-anchor="middle" font-family="sans-serif" '
               f'font-size="13">{x_label}</text>')
    out.append(f'<text x="18" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               'font-family="sans-serif" font-size="13" '
               f'transform="rotate(-90 18 {mt + ph / 2:.1f})">{y_label}</text>')
    # series
    for i, (label, xs, ys) in enumerate(series):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                   'stroke-width="1.8"/>')
        for x, y in zip(xs, ys):
            out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.4" '
                       f'fill="{color}"/>')
        ly = mt + 16 + 18 * i
        lx = ml + pw + 12
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 22}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="1.8"/>')
        out.append(f'<text x="{lx + 28}" y="{ly}" font-family="sans-serif" '
                   f'font-size="12">{label}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path


def _plot_miou_vs_ratio(spec, results, out_dir: Path) -> Path | None:
    series = []
    for m in spec.methods:
        xs, ys = [], []
        for r in sorted(spec.ratios):
            vals = _final_mious(spec, results, m, r)
            if vals:
                xs.append(r)
                ys.append(100.0 * float(np.mean(vals)))
        if xs:
            series.append((m.value, xs, ys))
    if not series:
        return None
    return write_svg_lines(out_dir / "miou_vs_ratio.svg", series,
                           "labeled fraction", "mIoU (%)",
                           "Validation mIoU vs labeled fraction")


def _plot_overlap_vs_epoch(spec, results, out_dir: Path) -> Path | None:
    """Mean pseudo-map agreement per epoch, one line per (method, ratio)
    that produces the diagnostic (dual-network methods only)."""
    series = []
    for m in spec.methods:
        for r in sorted(spec.ratios):
            per_seed = []
            for s in spec.seeds:
                key = RunKey(m, r, s).name
                if key in results and results[key].records[-1].overlap is not None:
                    per_seed.append([rec.overlap for rec in results[key].records])
            if per_seed:
                arr = np.asarray(per_seed)
                xs = list(range(1, arr.shape[1] + 1))
                ys = list(arr.mean(axis=0))
                series.append((f"{m.value} {_ratio_label(r)}", xs, ys))
    if not series:
        return None
    return write_svg_lines(out_dir / "overlap_vs_epoch.svg", series,
                           "epoch", "overlap ratio",
                           "Pseudo-map agreement in object regions")
