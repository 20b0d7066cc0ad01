"""
Forecast quality metrics, analytic cost accounting, timing benchmarks, and a
synthetic moving-bump dataset for desk-scale checks.
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .dataset import write_dataset
from .frm import FireRiskMap, KernelSpec, normalize_dataset, rasterize_kernel
from .ingest import SPLITS, SegmentIndex, split_boundaries
from .model import ConditioningContext, DenoiserConfig, ShiftingDenoiser, count_parameters
from .rng import numpy_rng
from .sample import SamplerRun, run_sampler
from .schedule import NoiseSchedule, subsample_levels

log = logging.getLogger(__name__)

KL_EPS = 1e-8
KL_CONVENTION = "KL(target || pred), maps smoothed by +1e-8 and renormalized to unit sum"


@dataclass(frozen=True)
class QualityMetrics:
    rmse: float
    mae: float
    kl: float

    def to_dict(self) -> dict:
        return asdict(self)


def kl_divergence(target: np.ndarray, pred: np.ndarray, eps: float = KL_EPS) -> float:
    """KL(target || pred) between two non-negative maps treated as distributions."""
    if np.any(target < 0) or np.any(pred < 0):
        raise ValueError("KL needs non-negative maps")
    p = target.astype(np.float64).ravel() + eps
    q = pred.astype(np.float64).ravel() + eps
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


def quality(pred, target) -> QualityMetrics:
    """RMSE, MAE and mean per-map KL for (T+1, H, W) stacks (or a single H x W map)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(target))):
        raise ValueError("metrics need finite values")
    diff = pred - target
    maps_p = pred.reshape((-1,) + pred.shape[-2:])
    maps_t = target.reshape((-1,) + target.shape[-2:])
    kl = float(np.mean([kl_divergence(t, p) for t, p in zip(maps_t, maps_p)]))
    return QualityMetrics(rmse=float(np.sqrt(np.mean(diff**2))), mae=float(np.mean(np.abs(diff))), kl=kl)


def mean_quality(items: Sequence[QualityMetrics]) -> QualityMetrics:
    return QualityMetrics(*(float(np.mean([getattr(q, f) for q in items])) for f in ("rmse", "mae", "kl")))


# --- analytic FLOPs: 2 x MACs over conv and affine layers


def _layer_flops(module: nn.Module, out: torch.Tensor) -> int:
    if isinstance(module, nn.Conv2d):
        kh, kw = module.kernel_size
        return 2 * out.numel() * kh * kw * (module.in_channels // module.groups)
    if isinstance(module, nn.Linear):
        return 2 * out.numel() * module.in_features
    return 0


def count_module_flops(module: nn.Module, *inputs: torch.Tensor) -> int:
    """Run one forward pass with hooks and sum 2 x MACs of every Conv2d and Linear layer."""
    total = 0

    def hook(mod, _inp, out):
        nonlocal total
        total += _layer_flops(mod, out)

    handles = [m.register_forward_hook(hook) for m in module.modules() if isinstance(m, (nn.Conv2d, nn.Linear))]
    try:
        with torch.no_grad():
            module(*inputs)
    finally:
        for h in handles:
            h.remove()
    return total


def flops_per_call(config: DenoiserConfig) -> int:
    torch.manual_seed(0)
    model = ShiftingDenoiser(config)
    h, w = config.resolution
    x = torch.zeros(1, 1, h, w)
    cond = torch.zeros(1, config.cond_channels, h, w)
    one = torch.ones(1, dtype=torch.long)
    return count_module_flops(model, x, cond, one, one * 0, one * 0)


def flops_estimate(config: DenoiserConfig, calls: int) -> float:
    """Total GFLOPs for ``calls`` denoiser invocations."""
    if calls < 0:
        raise ValueError("calls must be non-negative")
    return flops_per_call(config) * calls / 1e9


@dataclass
class EfficiencyReport:
    wall_time_ms: float
    wall_time_std_ms: float | None
    flops_g: float
    params_m: float
    calls: int

    def to_dict(self) -> dict:
        return asdict(self)


def efficiency(model: ShiftingDenoiser, runs: Sequence[SamplerRun]) -> EfficiencyReport:
    times = [r.wall_time_ms for r in runs]
    calls = runs[0].call_counter
    return EfficiencyReport(
        wall_time_ms=float(np.mean(times)),
        wall_time_std_ms=float(np.std(times, ddof=1)) if len(times) >= 3 else None,
        flops_g=flops_estimate(model.config, calls),
        params_m=count_parameters(model) / 1e6,
        calls=calls,
    )


# --- timing benchmark


@dataclass
class BenchRow:
    sampler: str
    D_test: int
    mean_ms: float
    std_ms: float
    calls: int
    expected_calls: int


@dataclass
class BenchResult:
    rows: list[BenchRow]
    ordering: dict  # D_test -> bool, tree faster than independent
    r_squared: dict  # sampler -> R^2 of the time-vs-steps line

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows],
                "ordering_tree_lt_independent": {str(k): v for k, v in self.ordering.items()},
                "r_squared": self.r_squared}


def linear_r2(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    slope, icept = np.polyfit(x, y, 1)
    resid = y - (slope * x + icept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0


def bench_scaling(model: ShiftingDenoiser, ctx: ConditioningContext, schedule: NoiseSchedule,
                  samplers: Sequence[str], D_test_list: Sequence[int], repeats: int = 3,
                  horizons: int | None = None, L: int = 4, branching=None, warmup: int = 2,
                  seed: int = 0) -> BenchResult:
    """Wall time per (sampler, D_test); warm-up runs are discarded."""
    if repeats < 3:
        raise ValueError("need at least 3 timed repeats")
    horizons = horizons or model.config.horizons
    torch.set_num_threads(1)
    rows = []
    for D_test in D_test_list:
        stepping = subsample_levels(schedule.D, D_test)
        for name in samplers:
            go = lambda: run_sampler(name, model, ctx, schedule, stepping, horizons, L, branching, seed)
            for _ in range(warmup):
                go()
            runs = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                r = go()
                r.wall_time_ms = (time.perf_counter() - t0) * 1e3
                runs.append(r)
            times = [r.wall_time_ms for r in runs]
            rows.append(BenchRow(name, D_test, statistics.fmean(times), statistics.stdev(times),
                                 runs[0].call_counter, runs[0].expected_calls))
    ordering = {}
    if "tree" in samplers and "independent" in samplers:
        for D_test in D_test_list:
            t = {r.sampler: r.mean_ms for r in rows if r.D_test == D_test}
            ordering[D_test] = t["tree"] < t["independent"]
    r2 = {}
    if len(D_test_list) >= 2:
        for name in samplers:
            pts = [(r.D_test, r.mean_ms) for r in rows if r.sampler == name]
            r2[name] = linear_r2(*zip(*pts))
    return BenchResult(rows, ordering, r2)


def format_bench(result: BenchResult) -> str:
    lines = [f"{'sampler':<15}{'D_test':>7}{'mean_ms':>12}{'std_ms':>10}{'calls':>8}{'expected':>9}"]
    for r in result.rows:
        lines.append(f"{r.sampler:<15}{r.D_test:>7}{r.mean_ms:>12.2f}{r.std_ms:>10.2f}{r.calls:>8}{r.expected_calls:>9}")
    for d, ok in result.ordering.items():
        lines.append(f"D_test={d}: tree < independent: {'yes' if ok else 'NO'}")
    for name, v in result.r_squared.items():
        lines.append(f"linear fit R^2 [{name}] = {v:.5f}")
    return "\n".join(lines)


# --- synthetic moving-bump data


def synthetic_segment(horizons: int, resolution: tuple[int, int], rng: np.random.Generator,
                      sigma: float = 1.5, margin_sigmas: float = 3.0, motion: str = "through_center",
                      velocity: tuple[float, float] | None = None) -> list[np.ndarray]:
    """``horizons + 1`` frames of one Gaussian bump moving at constant velocity, kept inside the grid.

    ``through_center`` moves from a random start to the mirror point at half
    distance across the grid centre, so the velocity follows from the first
    frame. ``random`` draws an unrelated end point. An explicit ``velocity``
    (pixels per frame) overrides both.
    """
    h, w = resolution
    if min(h, w) < 16:
        raise ValueError("synthetic data needs at least a 16 x 16 grid")
    lo = margin_sigmas * sigma
    span_x, span_y = (w - 1) - 2 * lo, (h - 1) - 2 * lo
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    p0 = np.array([rng.uniform(lo, lo + span_x), rng.uniform(lo, lo + span_y)])
    n = max(horizons, 1)
    if velocity is not None:
        vel = np.asarray(velocity, dtype=float)
    elif motion == "through_center":
        vel = (center + 0.5 * (center - p0) - p0) / n
    elif motion == "random":
        p1 = np.array([rng.uniform(lo, lo + span_x), rng.uniform(lo, lo + span_y)])
        vel = (p1 - p0) / n
    else:
        raise ValueError(f"unknown motion {motion!r}")
    frames = []
    for k in range(horizons + 1):
        cx, cy = p0 + k * vel
        frames.append(rasterize_kernel(KernelSpec((cx, cy), (sigma, sigma)), resolution))
    return frames


def make_synthetic_dataset(out_dir: str | Path, num_segments: int, horizons: int,
                           resolution: tuple[int, int] = (16, 16), seed: int = 0,
                           ratios=(0.70, 0.15, 0.15), sigma: float = 1.5,
                           motion: str = "through_center") -> Path:
    """Write back-to-back moving-bump segments in the standard dataset format.

    Segment k occupies days [k (h+1), (k+1)(h+1)) with h = ``horizons``:
    one conditioning frame and h target frames. Splits are cut
    chronologically on segment boundaries and each split holds only the
    segments that start on a block edge, so no window mixes two bumps.
    """
    rng = numpy_rng(seed, "synthetic")
    seg_len = horizons + 1
    maps: list[FireRiskMap] = []
    for k in range(num_segments):
        for j, grid in enumerate(synthetic_segment(horizons, resolution, rng, sigma, motion=motion)):
            maps.append(FireRiskMap(grid=grid, day_index=k * seg_len + j))
    num_days = len(maps)
    b1, b2 = (b * seg_len for b in split_boundaries(num_segments, ratios))
    bounds = {"train": (0, b1), "val": (b1, b2), "test": (b2, num_days)}
    index = {
        split: SegmentIndex(split, bounds[split],
                            tuple((s, seg_len) for s in range(bounds[split][0], bounds[split][1], seg_len)))
        for split in SPLITS
    }
    train_days = range(*bounds["train"]) if b1 > 0 else range(num_days)
    maps, c = normalize_dataset(maps, train_days)
    extra = {"source": "synthetic", "seed": seed, "num_segments": num_segments, "sigma_px": sigma,
             "motion": motion}
    return write_dataset(out_dir, maps, index, bbox=None, normalization_constant=c, extra=extra)
