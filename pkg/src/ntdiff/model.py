"""
Shifting denoiser: a small U-Net whose bottleneck is FiLM-modulated.

The encoder sees the noisy map stacked with the conditioning map. Four
embeddings (condition, noise level, absolute horizon, relative shift) are
concatenated and one linear layer turns them into a per-channel scale and
offset for the bottleneck latent. The network predicts the noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError


@dataclass(frozen=True)
class DenoiserConfig:
    resolution: tuple[int, int] = (128, 128)
    base_channels: int = 32
    depth: int = 3
    embed_dim: int = 64
    horizons: int = 27  # T + 1
    max_level: int = 1000  # D_train
    cond_channels: int = 1
    film_per_level: bool = False

    def __post_init__(self) -> None:
        h, w = self.resolution
        f = 2 ** (self.depth - 1)
        if self.depth < 1 or h % f or w % f:
            raise ValueError(f"resolution {self.resolution} must be divisible by 2^(depth-1) = {f}")
        if self.embed_dim < 4 or self.embed_dim % 2:
            raise ValueError("embed_dim must be an even number >= 4")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["resolution"] = tuple(d["resolution"])
        return cls(**d)


def sinusoidal_code(values: torch.Tensor, dim: int, base: float = 10000.0) -> torch.Tensor:
    """Transformer-style positional code: [sin(v w_k), cos(v w_k)], w_k = base^(-k/half)."""
    half = dim // 2
    freqs = torch.exp(-math.log(base) * torch.arange(half, dtype=torch.float64) / half)
    args = values.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class IndexEmbedding(nn.Module):
    """Sinusoidal code followed by a two-layer MLP; used for level, horizon and shift."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        code = sinusoidal_code(values, self.dim).to(self.mlp[0].weight.dtype)
        return self.mlp(code)


class ConditionEncoder(nn.Module):
    def __init__(self, in_ch: int, width: int, dim: int) -> None:
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.proj = nn.Linear(2 * width, dim)

    def forward(self, cond: torch.Tensor) -> torch.Tensor:
        return self.proj(self.net(cond).mean(dim=(2, 3)))


def _groups(ch: int) -> int:
    return math.gcd(ch, 8)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int) -> None:
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, film=None):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.norm2(h)
        if film is not None:
            gamma, beta = film
            h = gamma * h + beta
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class EmbeddingSet(NamedTuple):
    h_cond: torch.Tensor
    h_step: torch.Tensor
    h_time: torch.Tensor
    h_shift: torch.Tensor

    def concat(self) -> torch.Tensor:
        return torch.cat(list(self), dim=-1)


class ShiftingDenoiser(nn.Module):
    def __init__(self, config: DenoiserConfig) -> None:
        super().__init__()
        self.config = config
        c, e = config.base_channels, config.embed_dim
        chans = [c * 2**k for k in range(config.depth)]
        self.chans = chans

        self.cond_encoder = ConditionEncoder(config.cond_channels, c, e)
        self.step_embed = IndexEmbedding(e)
        self.time_embed = IndexEmbedding(e)
        self.shift_embed = IndexEmbedding(e)

        self.in_conv = nn.Conv2d(1 + config.cond_channels, c, 3, padding=1)
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = c
        for k, ch in enumerate(chans):
            self.enc.append(ResBlock(prev, ch))
            if k < config.depth - 1:
                self.down.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch
        self.mid = ResBlock(chans[-1], chans[-1])
        self.film = nn.Linear(4 * e, 2 * chans[-1])

        self.dec = nn.ModuleList()
        self.up = nn.ModuleList()
        for k in reversed(range(config.depth)):
            self.dec.append(ResBlock(2 * chans[k], chans[k]))
            if k > 0:
                self.up.append(nn.Conv2d(chans[k], chans[k - 1], 3, padding=1))
        self.out_norm = nn.GroupNorm(_groups(c), c)
        self.out_conv = nn.Conv2d(c, 1, 3, padding=1)

        if config.film_per_level:
            blocks = list(self.enc) + list(self.dec)
            self.level_film = nn.ModuleList(nn.Linear(4 * e, 2 * b.conv1.out_channels) for b in blocks)
        else:
            self.level_film = None

    def embeddings(self, cond, s, t, dt) -> EmbeddingSet:
        return EmbeddingSet(
            h_cond=self.cond_encoder(cond),
            h_step=self.step_embed(s),
            h_time=self.time_embed(t),
            h_shift=self.shift_embed(dt),
        )

    @staticmethod
    def _split_film(raw: torch.Tensor):
        gamma_res, beta = raw.chunk(2, dim=-1)
        return (1.0 + gamma_res)[:, :, None, None], beta[:, :, None, None]

    def film_params(self, emb: EmbeddingSet):
        """(gamma, beta) for the bottleneck, shaped (B, C, 1, 1); gamma = 1 + residual."""
        return self._split_film(self.film(emb.concat()))

    def forward(self, noisy, cond, s, t, dt):
        """Predict the noise in ``noisy`` (B, 1, H, W); s, t, dt are (B,) level/horizon/shift indices."""
        emb = self.embeddings(cond, s, t, dt)
        z = emb.concat()
        films = [self._split_film(f(z)) for f in self.level_film] if self.level_film is not None else None

        h = self.in_conv(torch.cat([noisy, cond], dim=1))
        skips = []
        for k, block in enumerate(self.enc):
            h = block(h, films[k] if films else None)
            skips.append(h)
            if k < len(self.down):
                h = self.down[k](h)
        h = self.mid(h)
        gamma, beta = self.film_params(emb)
        h = gamma * h + beta
        n_enc = len(self.enc)
        for i, block in enumerate(self.dec):
            h = block(torch.cat([h, skips.pop()], dim=1), films[n_enc + i] if films else None)
            if i < len(self.up):
                h = self.up[i](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out_conv(F.silu(self.out_norm(h)))


@dataclass
class ConditioningContext:
    cond_map: torch.Tensor  # (H, W), values in [0, 1]
    extra: torch.Tensor | None = None

    def __post_init__(self) -> None:
        self.cond_map = torch.as_tensor(self.cond_map)
        if self.cond_map.dim() != 2:
            raise ValueError("cond_map must be a single H x W map")
        if self.cond_map.numel() and (self.cond_map.min() < 0 or self.cond_map.max() > 1):
            raise ValueError("cond_map values must lie in [0, 1]")

    def batch(self, like: torch.Tensor) -> torch.Tensor:
        c = self.cond_map.to(dtype=like.dtype, device=like.device)[None, None]
        if self.extra is not None:
            c = torch.cat([c, self.extra.to(dtype=like.dtype, device=like.device)[None]], dim=1)
        return c


def predict_noise(model: ShiftingDenoiser, noisy, ctx: ConditioningContext | torch.Tensor,
                  s: int, t: int, dt: int) -> torch.Tensor:
    """Single-map call with range checks; returns an H x W noise estimate."""
    cfg = model.config
    noisy = torch.as_tensor(noisy)
    if tuple(noisy.shape) != tuple(cfg.resolution):
        raise ValueError(f"noisy map shape {tuple(noisy.shape)} != configured {cfg.resolution}")
    if not 1 <= s <= cfg.max_level:
        raise ValueError(f"noise level {s} outside [1, {cfg.max_level}]")
    if not 0 <= t < cfg.horizons:
        raise ValueError(f"horizon {t} outside [0, {cfg.horizons - 1}]")
    if not 0 <= t - dt < cfg.horizons:
        raise ValueError(f"parent horizon t - dt = {t - dt} outside [0, {cfg.horizons - 1}]")
    x = noisy.to(next(model.parameters()).dtype)[None, None]
    cond = ctx.batch(x) if isinstance(ctx, ConditioningContext) else torch.as_tensor(ctx).to(x.dtype)[None, None]
    if tuple(cond.shape[-2:]) != tuple(cfg.resolution):
        raise ValueError("conditioning map resolution does not match the model")
    idx = lambda v: torch.tensor([v], dtype=torch.long)
    return model(x, cond, idx(s), idx(t), idx(dt))[0, 0]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --- checkpoints: torch-native parameter file plus a portable JSON manifest

MANIFEST_KEYS = ("denoiser_config", "schedule_params", "tree_params", "normalization_constant", "training_step")


def save_checkpoint(path: str | Path, model: ShiftingDenoiser, manifest: dict, extra_state: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    missing = [k for k in MANIFEST_KEYS if k not in manifest]
    if missing:
        raise ValueError(f"checkpoint manifest lacks {missing}")
    torch.save({"model": model.state_dict(), **(extra_state or {})}, path / "state.pt")
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32):
    """Return (model, manifest, raw_state). Raises CheckpointError on anything unreadable."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        missing = [k for k in MANIFEST_KEYS if k not in manifest]
        if missing:
            raise CheckpointError(f"{path}: manifest lacks {missing}")
        config = DenoiserConfig.from_dict(manifest["denoiser_config"])
        state = torch.load(path / "state.pt", map_location="cpu", weights_only=False)
        model = ShiftingDenoiser(config).to(dtype)
        model.load_state_dict(state["model"])
    except CheckpointError:
        raise
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint incomplete at {path}: {exc}") from exc
    except Exception as exc:  # torch/json raise a zoo of types on corrupted files
        raise CheckpointError(f"corrupted checkpoint at {path}: {exc}") from exc
    model.eval()
    return model, manifest, state
