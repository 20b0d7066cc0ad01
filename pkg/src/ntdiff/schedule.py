"""Forward noising process and inference-time level subsampling.

Noise levels run from s = 0 (clean) to s = D (most noisy); ``alpha_bars[s]``
is the cumulative signal fraction with ``alpha_bars[0] == 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray  # beta_1 .. beta_D, stored at index 0 .. D-1
    alpha_bars: np.ndarray  # alpha_bar_0 .. alpha_bar_D
    params: dict

    @property
    def D(self) -> int:
        return len(self.betas)

    @classmethod
    def from_betas(cls, betas, params: dict | None = None) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("every beta must lie strictly between 0 and 1")
        alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        betas.setflags(write=False)
        alpha_bars.setflags(write=False)
        return cls(betas, alpha_bars, params or {"kind": "explicit", "betas": betas.tolist()})

    def to_dict(self) -> dict:
        return dict(self.params)

    @classmethod
    def from_dict(cls, doc: dict) -> "NoiseSchedule":
        kind = doc.get("kind")
        if kind == "linear":
            return make_linear_schedule(int(doc["D"]), float(doc["beta_start"]), float(doc["beta_end"]))
        if kind == "explicit":
            return cls.from_betas(doc["betas"])
        raise ValueError(f"unknown schedule kind {kind!r}")


def make_linear_schedule(D: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if D < 1:
        raise ValueError("D must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, D, dtype=np.float64)
    return NoiseSchedule.from_betas(
        betas, {"kind": "linear", "D": D, "beta_start": beta_start, "beta_end": beta_end})


def _coefficients(s, schedule: NoiseSchedule, like):
    """sqrt(alpha_bar_s), sqrt(1 - alpha_bar_s) shaped to broadcast against ``like``."""
    if isinstance(s, torch.Tensor):
        ab = torch.from_numpy(np.array(schedule.alpha_bars, dtype=np.float64))[s.long().cpu()]
        ab = ab.reshape(ab.shape + (1,) * (like.dim() - ab.dim()))
        cast = lambda v: v.to(dtype=like.dtype, device=like.device)
        return cast(ab.sqrt()), cast((1.0 - ab).sqrt())
    s_arr = np.asarray(s)
    if s_arr.ndim == 0:
        ab = float(schedule.alpha_bars[int(s)])
        return ab**0.5, (1.0 - ab) ** 0.5
    ab = schedule.alpha_bars[s_arr]
    ab = ab.reshape(ab.shape + (1,) * (np.ndim(like) - ab.ndim))
    return np.sqrt(ab), np.sqrt(1.0 - ab)


def _check_levels(s, D: int) -> None:
    lo, hi = (int(s.min()), int(s.max())) if isinstance(s, torch.Tensor) else (int(np.min(s)), int(np.max(s)))
    if lo < 0 or hi > D:
        raise ValueError(f"noise level outside [0, {D}]")


def forward_noise(clean, s, schedule: NoiseSchedule, eps):
    """sqrt(ab_s) * clean + sqrt(1 - ab_s) * eps, for numpy arrays or tensors.

    ``s`` may be a scalar level or one level per leading batch element.
    """
    if tuple(clean.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: clean {tuple(clean.shape)} vs eps {tuple(eps.shape)}")
    _check_levels(s, schedule.D)
    if not isinstance(s, torch.Tensor) and np.ndim(s) == 0 and int(s) == 0:
        return clean.clone() if isinstance(clean, torch.Tensor) else np.array(clean, copy=True)
    a, b = _coefficients(s, schedule, clean)
    return a * clean + b * eps


def residual_target(noisy, clean, s, schedule: NoiseSchedule):
    """(noisy - sqrt(ab_s) * clean) / sqrt(1 - ab_s): the noise that maps ``clean`` onto ``noisy``."""
    _check_levels(s, schedule.D)
    a, b = _coefficients(s, schedule, noisy)
    return (noisy - a * clean) / b


@dataclass(frozen=True)
class InferenceStepping:
    levels: tuple[int, ...]  # strictly decreasing, all >= 1; the walk ends at 0

    def __post_init__(self) -> None:
        if not self.levels:
            raise ValueError("stepping needs at least one level")
        if any(a <= b for a, b in zip(self.levels, self.levels[1:])) or self.levels[-1] < 1:
            raise ValueError(f"levels must be strictly decreasing and >= 1: {self.levels}")

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def transitions(self) -> list[tuple[int, int]]:
        targets = self.levels[1:] + (0,)
        return list(zip(self.levels, targets))

    def split(self, segment_steps) -> list[list[tuple[int, int]]]:
        """Partition the transitions into consecutive segments of the given sizes."""
        if sum(segment_steps) != len(self.levels):
            raise ValueError(f"segments {tuple(segment_steps)} do not cover {len(self.levels)} transitions")
        trans, out, pos = self.transitions, [], 0
        for n in segment_steps:
            out.append(trans[pos:pos + n])
            pos += n
        return out


def subsample_levels(D_train: int, D_test: int) -> InferenceStepping:
    """Evenly strided levels round(D_train * k / D_test) for k = D_test .. 1 (half-up rounding)."""
    if not 1 <= D_test <= D_train:
        raise ValueError(f"need 1 <= D_test <= D_train, got {D_test}, {D_train}")
    levels = []
    for k in range(D_test, 0, -1):
        lvl = (2 * D_train * k + D_test) // (2 * D_test)
        if levels and lvl >= levels[-1]:
            lvl = levels[-1] - 1
        levels.append(lvl)
    # stride >= 1 keeps the rounded levels distinct; nothing left to dedupe
    return InferenceStepping(tuple(levels))
