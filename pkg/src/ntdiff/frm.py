"""
Fire Risk Map construction.

Every detection becomes an axis-aligned 2-D Gaussian whose bandwidth grows with
brightness temperature; a day's map is the sum of its kernels. Integer pixel
coordinates are pixel centres: pixel (row i, col j) sits at (x=j, y=i).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .ingest import BBox, DailyEventSet


@dataclass(frozen=True)
class SigmaConfig:
    b_lo: float = 300.0
    b_hi: float = 500.0
    sigma_min_px: float = 1.0
    sigma_max_px: float = 4.0
    # sigma_y = y_scale * sigma_x; 1.0 keeps kernels isotropic
    y_scale: float = 1.0

    def __post_init__(self) -> None:
        if not self.sigma_min_px > 0:
            raise ValueError("sigma_min_px must be positive")
        if self.sigma_max_px < self.sigma_min_px:
            raise ValueError("sigma_max_px must be >= sigma_min_px")
        if not self.b_hi > self.b_lo:
            raise ValueError("b_hi must exceed b_lo")
        if not self.y_scale > 0:
            raise ValueError("y_scale must be positive")


def intensity_to_sigma(brightness: float, config: SigmaConfig = SigmaConfig()) -> tuple[float, float]:
    """Clamped affine map from brightness temperature (K) to kernel sigma (px)."""
    if not brightness > 0:
        raise ValueError(f"brightness must be positive, got {brightness}")
    frac = (brightness - config.b_lo) / (config.b_hi - config.b_lo)
    sigma = config.sigma_min_px + frac * (config.sigma_max_px - config.sigma_min_px)
    sigma = min(max(sigma, config.sigma_min_px), config.sigma_max_px)
    return sigma, sigma * config.y_scale


@dataclass(frozen=True)
class KernelSpec:
    center_px: tuple[float, float]
    sigma_px: tuple[float, float]

    def __post_init__(self) -> None:
        if not (self.sigma_px[0] > 0 and self.sigma_px[1] > 0):
            raise ValueError(f"sigmas must be positive, got {self.sigma_px}")


def _axis_profile(n: int, center: float, sigma: float) -> np.ndarray:
    coords = np.arange(n, dtype=np.float64)
    return np.exp(-((coords - center) ** 2) / (2.0 * sigma * sigma))


def rasterize_kernel(
    spec: KernelSpec,
    resolution: tuple[int, int],
    cutoff_sigmas: float | None = None,
) -> np.ndarray:
    """Evaluate one normalized Gaussian at every pixel centre of an H x W grid.

    With ``cutoff_sigmas`` set, pixels further than that many (Mahalanobis)
    sigmas from the centre are zeroed; the cutoff must be at least 6.
    """
    h, w = resolution
    if h < 1 or w < 1:
        raise ValueError(f"resolution must be positive, got {resolution}")
    (xc, yc), (sx, sy) = spec.center_px, spec.sigma_px
    gx = _axis_profile(w, xc, sx)
    gy = _axis_profile(h, yc, sy)
    out = np.outer(gy, gx) * (1.0 / (2.0 * math.pi * sx * sy))
    if cutoff_sigmas is not None:
        if cutoff_sigmas < 6.0:
            raise ValueError("cutoff_sigmas must be >= 6")
        dx = (np.arange(w) - xc) / sx
        dy = (np.arange(h) - yc) / sy
        out[dy[:, None] ** 2 + dx[None, :] ** 2 > cutoff_sigmas**2] = 0.0
    return out


@dataclass(frozen=True)
class GeoTransform:
    """Plate carree lat/lon -> continuous pixel coordinates.

    The box edges land on the outer pixel edges, so the north-west corner of
    the box is (x, y) = (-0.5, -0.5). Row 0 is the northern edge.
    """

    bbox: BBox
    resolution: tuple[int, int]

    def to_pixel(self, lat: float, lon: float) -> tuple[float, float]:
        h, w = self.resolution
        b = self.bbox
        x = (lon - b.lon_min) / (b.lon_max - b.lon_min) * w - 0.5
        y = (b.lat_max - lat) / (b.lat_max - b.lat_min) * h - 0.5
        return x, y


@dataclass
class FireRiskMap:
    grid: np.ndarray
    day_index: int
    normalization_constant: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.grid.shape)  # type: ignore[return-value]


def build_frm(
    day: DailyEventSet,
    geo: GeoTransform,
    sigma_config: SigmaConfig = SigmaConfig(),
    resolution: tuple[int, int] | None = None,
    cutoff_sigmas: float | None = None,
) -> FireRiskMap:
    resolution = tuple(resolution or geo.resolution)
    if resolution != tuple(geo.resolution):
        raise ValueError(f"geo transform targets {geo.resolution}, asked for {resolution}")
    grid = np.zeros(resolution, dtype=np.float64)
    # accumulate in event order so a union of event sets sums identically
    for ev in day.events:
        spec = KernelSpec(geo.to_pixel(ev.latitude, ev.longitude),
                          intensity_to_sigma(ev.brightness, sigma_config))
        grid += rasterize_kernel(spec, resolution, cutoff_sigmas)
    return FireRiskMap(grid=grid, day_index=day.day_index)


def normalization_constant(train_maps: Iterable[FireRiskMap], percentile: float = 99.9) -> float:
    positives = [m.grid[m.grid > 0] for m in train_maps]
    values = np.concatenate(positives) if positives else np.empty(0)
    if values.size == 0:
        raise DataError("training split is all zero; no normalization constant exists")
    c = float(np.percentile(values, percentile))
    if c <= 0:
        c = float(values.max())
    return c


def apply_normalization(maps: Sequence[FireRiskMap], c: float) -> list[FireRiskMap]:
    if not c > 0:
        raise ValueError(f"normalization constant must be positive, got {c}")
    return [
        replace(m, grid=np.clip(m.grid / c, 0.0, 1.0), normalization_constant=c)
        for m in maps
    ]


def normalize_dataset(
    maps: Sequence[FireRiskMap],
    train_split_days: Iterable[int],
    method: str = "global",
    percentile: float = 99.9,
) -> tuple[list[FireRiskMap], float | None]:
    """Scale maps into [0, 1].

    ``global`` divides every map by one constant taken from the training days
    (99.9th percentile of positive pixels) and clips; ``per_map`` divides each
    map by its own maximum and returns ``None`` for the shared constant.
    """
    train_days = set(train_split_days)
    if not train_days:
        raise DataError("training split is empty")
    if method == "global":
        c = normalization_constant((m for m in maps if m.day_index in train_days), percentile)
        return apply_normalization(maps, c), c
    if method == "per_map":
        out = []
        for m in maps:
            peak = float(m.grid.max())
            out.append(replace(m, grid=m.grid / peak, normalization_constant=peak) if peak > 0
                       else replace(m, grid=m.grid.copy(), normalization_constant=1.0))
        return out, None
    raise ValueError(f"unknown normalization method {method!r}")


# --- on-disk format: raw little-endian float32, row-major, plus a JSON sidecar


def write_frm(base: str | Path, frm: FireRiskMap, bbox: BBox | None = None) -> Path:
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    h, w = frm.grid.shape
    raw = base.with_suffix(".f32")
    raw.write_bytes(np.ascontiguousarray(frm.grid, dtype="<f4").tobytes())
    sidecar = {
        "day_index": int(frm.day_index),
        "shape": [h, w],
        "dtype": "f32le",
        "normalization_constant": frm.normalization_constant,
        "bbox": bbox.to_list() if bbox is not None else None,
        **frm.meta,
    }
    base.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")
    return raw


def read_frm(base: str | Path) -> FireRiskMap:
    base = Path(base)
    meta_path = base.with_suffix(".json")
    if not meta_path.exists():
        raise DataError(f"FRM sidecar not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("dtype") != "f32le":
        raise DataError(f"{meta_path}: unsupported dtype {meta.get('dtype')!r}")
    h, w = meta["shape"]
    data = np.frombuffer(base.with_suffix(".f32").read_bytes(), dtype="<f4")
    if data.size != h * w:
        raise DataError(f"{base}: expected {h * w} values, found {data.size}")
    extra = {k: v for k, v in meta.items()
             if k not in ("day_index", "shape", "dtype", "normalization_constant")}
    return FireRiskMap(grid=data.reshape(h, w).astype(np.float32),
                       day_index=int(meta["day_index"]),
                       normalization_constant=meta.get("normalization_constant"),
                       meta=extra)
