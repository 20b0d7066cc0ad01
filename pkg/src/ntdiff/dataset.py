"""On-disk FRM dataset: one raw float32 frame per day, a manifest, and per-split segment files."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError
from .frm import FireRiskMap, read_frm, write_frm
from .ingest import BBox, SegmentIndex, check_no_leakage, read_segment_index, write_segment_index

MANIFEST_NAME = "manifest.json"


def frame_stem(day_index: int) -> str:
    return f"frames/day_{day_index:05d}"


def write_dataset(
    out_dir: str | Path,
    maps: Sequence[FireRiskMap],
    index: Mapping[str, SegmentIndex],
    bbox: BBox | None,
    normalization_constant: float | None,
    extra: dict | None = None,
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    days = []
    for m in sorted(maps, key=lambda m: m.day_index):
        stem = frame_stem(m.day_index)
        write_frm(out_dir / stem, m, bbox)
        days.append({"day_index": m.day_index, "file": stem + ".f32", **m.meta})
    check_no_leakage(index, len(days))
    write_segment_index(index, out_dir)
    h, w = maps[0].grid.shape
    seg_lengths = {n for idx in index.values() for _, n in idx.segments}
    manifest = {
        "num_days": len(days),
        "resolution": [h, w],
        "dtype": "f32le",
        "normalization_constant": normalization_constant,
        "bbox": bbox.to_list() if bbox is not None else None,
        "segment_length": seg_lengths.pop() if len(seg_lengths) == 1 else None,
        "splits": {k: list(v.boundaries) for k, v in index.items()},
        "days": days,
        **(extra or {}),
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out_dir


@dataclass
class FRMDataset:
    frames: np.ndarray  # (num_days, H, W) float32
    manifest: dict
    index: dict[str, SegmentIndex]

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.frames.shape[1:])  # type: ignore[return-value]

    @property
    def segment_length(self) -> int:
        return int(self.manifest["segment_length"])

    @property
    def horizons(self) -> int:
        return self.segment_length - 1

    def starts(self, split: str) -> list[int]:
        return [s for s, _ in self.index[split].segments]

    def segment(self, start: int) -> tuple[np.ndarray, np.ndarray]:
        """(conditioning frame, targets for horizons 0..T) of the segment starting at ``start``."""
        n = self.segment_length
        if start < 0 or start + n > len(self.frames):
            raise DataError(f"segment at day {start} runs past the dataset")
        return self.frames[start], self.frames[start + 1:start + n]


def load_dataset(in_dir: str | Path) -> FRMDataset:
    in_dir = Path(in_dir)
    mpath = in_dir / MANIFEST_NAME
    if not mpath.exists():
        raise DataError(f"dataset manifest not found: {mpath} (run build-data first)")
    manifest = json.loads(mpath.read_text())
    frames = np.stack([read_frm(in_dir / frame_stem(d["day_index"])).grid for d in manifest["days"]])
    index = read_segment_index(in_dir)
    check_no_leakage(index, len(frames))
    if manifest.get("segment_length") is None:
        raise DataError(f"{mpath}: no uniform segment length recorded")
    return FRMDataset(frames=frames.astype(np.float32), manifest=manifest, index=index)
