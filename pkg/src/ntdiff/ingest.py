"""
FIRMS-style fire detection ingest.

Turns the point records of a satellite active-fire CSV into one event set per
calendar day, and cuts the day axis into chronological train/val/test ranges
from which fixed-length segments are drawn without crossing a split boundary.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import IO, Iterable, Mapping

from .errors import DataError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

DEFAULT_COLUMNS = {
    "latitude": "latitude",
    "longitude": "longitude",
    "acq_date": "acq_date",
    "brightness": "brightness",
    "confidence": "confidence",
}
REQUIRED_FIELDS = ("latitude", "longitude", "acq_date", "brightness")

# VIIRS reports confidence as a class letter rather than a percentage.
_CONFIDENCE_CLASSES = {"l": 0.0, "low": 0.0, "n": 50.0, "nominal": 50.0, "h": 100.0, "high": 100.0}


@dataclass(frozen=True)
class FireEvent:
    latitude: float
    longitude: float
    acq_date: date
    brightness: float
    confidence: float | None = None

    def __post_init__(self) -> None:
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude out of range: {self.latitude}")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude out of range: {self.longitude}")
        if not self.brightness > 0.0:
            raise ValueError(f"brightness must be positive, got {self.brightness}")


@dataclass(frozen=True)
class DailyEventSet:
    day_index: int
    acq_date: date
    events: tuple[FireEvent, ...] = ()

    def __post_init__(self) -> None:
        for ev in self.events:
            if ev.acq_date != self.acq_date:
                raise ValueError(f"event dated {ev.acq_date} in the set for {self.acq_date}")

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class BBox:
    """Latitude/longitude box, inclusive on all edges."""

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self) -> None:
        if not (self.lat_max > self.lat_min and self.lon_max > self.lon_min):
            raise ValueError(f"degenerate bounding box: {self}")

    def contains(self, lat: float, lon: float) -> bool:
        return self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max

    def to_list(self) -> list[float]:
        return [self.lat_min, self.lat_max, self.lon_min, self.lon_max]

    @classmethod
    def from_sequence(cls, values: Iterable[float]) -> "BBox":
        lat_min, lat_max, lon_min, lon_max = (float(v) for v in values)
        return cls(lat_min, lat_max, lon_min, lon_max)


# Continental United States.
CONUS = BBox(24.0, 50.0, -125.0, -66.0)


@dataclass
class ParseStats:
    rows: int = 0
    kept: int = 0
    out_of_region: int = 0
    below_confidence: int = 0
    skipped: int = 0
    skip_reasons: list[str] = field(default_factory=list)


def _parse_confidence(raw: str | None) -> float | None:
    if raw is None:
        return None
    raw = raw.strip()
    if not raw:
        return None
    try:
        return float(raw)
    except ValueError:
        return _CONFIDENCE_CLASSES.get(raw.lower())


def _open_text(source: bytes | str | Path | IO) -> IO[str]:
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8-sig"))
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise DataError(f"CSV file not found: {path}")
        return open(path, "r", encoding="utf-8-sig", newline="")
    if isinstance(source, io.TextIOBase):
        return source
    # binary file-like
    return io.TextIOWrapper(source, encoding="utf-8-sig", newline="")


def parse_events(
    csv_source: bytes | str | Path | IO,
    region: BBox = CONUS,
    columns: Mapping[str, str] | None = None,
    min_confidence: float | None = None,
    start_date: date | None = None,
    end_date: date | None = None,
    stats: ParseStats | None = None,
) -> list[DailyEventSet]:
    """Parse a fire-detection CSV into contiguous daily event sets.

    The covered day range runs from the earliest to the latest valid row
    (regardless of region) unless ``start_date``/``end_date`` pin it. Days with
    no in-region detections are returned as empty sets. Malformed rows are
    skipped and counted in ``stats``.
    """
    colmap = dict(DEFAULT_COLUMNS)
    if columns:
        colmap.update(columns)
    stats = stats if stats is not None else ParseStats()

    fh = _open_text(csv_source)
    try:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise DataError("empty CSV: no header row")
        header = [h.strip() for h in header]
        reader.fieldnames = header
        for fieldname in REQUIRED_FIELDS:
            if colmap[fieldname] not in header:
                raise DataError(f"missing required column {colmap[fieldname]!r} (field {fieldname})")
        conf_col = colmap.get("confidence")
        has_conf = conf_col in header

        parsed: list[FireEvent] = []
        in_region: list[bool] = []
        for lineno, row in enumerate(reader, start=2):
            stats.rows += 1
            try:
                ev = FireEvent(
                    latitude=float(row[colmap["latitude"]]),
                    longitude=float(row[colmap["longitude"]]),
                    acq_date=date.fromisoformat(row[colmap["acq_date"]].strip()),
                    brightness=float(row[colmap["brightness"]]),
                    confidence=_parse_confidence(row.get(conf_col)) if has_conf else None,
                )
                if not (math.isfinite(ev.latitude) and math.isfinite(ev.longitude)
                        and math.isfinite(ev.brightness)):
                    raise ValueError("non-finite value")
            except (ValueError, TypeError, AttributeError) as exc:
                stats.skipped += 1
                reason = f"line {lineno}: {exc}"
                stats.skip_reasons.append(reason)
                log.warning("skipping malformed row, %s", reason)
                continue
            parsed.append(ev)
            in_region.append(region.contains(ev.latitude, ev.longitude))
    finally:
        if not isinstance(csv_source, io.TextIOBase):
            fh.close()

    if not parsed and (start_date is None or end_date is None):
        raise DataError("CSV contains no valid fire records")

    first = start_date or min(ev.acq_date for ev in parsed)
    last = end_date or max(ev.acq_date for ev in parsed)
    if last < first:
        raise DataError(f"end date {last} precedes start date {first}")
    num_days = (last - first).days + 1

    buckets: list[list[FireEvent]] = [[] for _ in range(num_days)]
    for ev, inside in zip(parsed, in_region):
        if not inside:
            stats.out_of_region += 1
            continue
        if min_confidence is not None and (ev.confidence is None or ev.confidence < min_confidence):
            stats.below_confidence += 1
            continue
        offset = (ev.acq_date - first).days
        if 0 <= offset < num_days:
            buckets[offset].append(ev)
            stats.kept += 1

    return [
        DailyEventSet(day_index=i, acq_date=first + timedelta(days=i), events=tuple(evs))
        for i, evs in enumerate(buckets)
    ]


@dataclass(frozen=True)
class SegmentIndex:
    split: str
    boundaries: tuple[int, int]
    segments: tuple[tuple[int, int], ...]

    @property
    def day_range(self) -> range:
        return range(*self.boundaries)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "boundaries": list(self.boundaries),
            "segments": [{"start_day": s, "length": n} for s, n in self.segments],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SegmentIndex":
        try:
            return cls(
                split=str(doc["split"]),
                boundaries=(int(doc["boundaries"][0]), int(doc["boundaries"][1])),
                segments=tuple((int(s["start_day"]), int(s["length"])) for s in doc["segments"]),
            )
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise DataError(f"malformed segment index document: {exc}") from exc


def split_boundaries(num_days: int, ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)) -> tuple[int, int]:
    """Day indices where val and test begin. Train and val sizes are floored."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    # tolerance keeps 1/3 * 84 == 28 from flooring to 27
    n_train = math.floor(ratios[0] * num_days + 1e-9)
    n_val = math.floor(ratios[1] * num_days + 1e-9)
    return n_train, n_train + n_val


def _windows(lo: int, hi: int, length: int, stride: int) -> tuple[tuple[int, int], ...]:
    return tuple((start, length) for start in range(lo, hi - length + 1, stride))


def build_segment_index(
    num_days: int,
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
    segment_length: int = 28,
    stride: int = 1,
) -> dict[str, SegmentIndex]:
    if segment_length < 1 or stride < 1:
        raise ValueError("segment_length and stride must be positive")
    if num_days < segment_length:
        raise DataError(f"{num_days} days cannot hold a single {segment_length}-day segment")
    b1, b2 = split_boundaries(num_days, ratios)
    ranges = {"train": (0, b1), "val": (b1, b2), "test": (b2, num_days)}
    out = {}
    for split in SPLITS:
        lo, hi = ranges[split]
        segs = _windows(lo, hi, segment_length, stride)
        if not segs:
            warnings.warn(f"split {split!r} spans {hi - lo} days and holds no {segment_length}-day segment")
        out[split] = SegmentIndex(split=split, boundaries=(lo, hi), segments=segs)
    return out


def check_no_leakage(index: Mapping[str, SegmentIndex], num_days: int) -> None:
    """Raise DataError unless splits partition the days and no window crosses a boundary."""
    covered: list[int] = []
    for split in SPLITS:
        covered.extend(index[split].day_range)
    if sorted(covered) != list(range(num_days)):
        raise DataError("split day ranges do not partition the dataset")
    prev_hi = 0
    for split in SPLITS:
        lo, hi = index[split].boundaries
        if lo != prev_hi:
            raise DataError(f"split {split!r} is not contiguous with the previous split")
        prev_hi = hi
        for start, length in index[split].segments:
            if start < lo or start + length > hi:
                raise DataError(f"{split} segment at day {start} crosses the split boundary")
    seen: dict[int, str] = {}
    for split in SPLITS:
        for start, length in index[split].segments:
            for day in range(start, start + length):
                if seen.setdefault(day, split) != split:
                    raise DataError(f"day {day} appears in both {seen[day]} and {split}")


def write_segment_index(index: Mapping[str, SegmentIndex], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for split in SPLITS:
        path = out_dir / f"segments_{split}.json"
        path.write_text(json.dumps(index[split].to_dict(), indent=1) + "\n")
        paths.append(path)
    return paths


def read_segment_index(in_dir: str | Path) -> dict[str, SegmentIndex]:
    in_dir = Path(in_dir)
    out = {}
    for split in SPLITS:
        path = in_dir / f"segments_{split}.json"
        if not path.exists():
            raise DataError(f"segment index not found: {path}")
        out[split] = SegmentIndex.from_dict(json.loads(path.read_text()))
    return out
