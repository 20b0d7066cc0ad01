"""
Dual-path shifting loss and the training loop.

For a horizon pair (t_i, t_j) and one shared noise level s, each horizon is
noised with its own draw. The standard path asks the network for the noise
of each noisy state under Delta t = 0. The shifted path reuses the noisy
state of one horizon and regresses it toward the other horizon's clean map,
with the network told the target horizon and the signed offset. Both
directions give four equally weighted terms.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .dataset import FRMDataset
from .errors import CheckpointError, NonFiniteLossError
from .model import ConditioningContext, DenoiserConfig, ShiftingDenoiser, load_checkpoint, save_checkpoint
from .rng import derive_seed, numpy_rng, torch_gen
from .sample import run_tree
from .schedule import NoiseSchedule, forward_noise, residual_target, subsample_levels
from .treeplan import TreePlan, build_plan

log = logging.getLogger(__name__)


@dataclass
class TrainBatch:
    cond: torch.Tensor  # (B, 1, H, W)
    t_i: torch.Tensor  # (B,) long
    t_j: torch.Tensor
    x_i: torch.Tensor  # clean maps at t_i, (B, 1, H, W)
    x_j: torch.Tensor
    s: torch.Tensor  # (B,) long, in [1, D_train]
    eps_i: torch.Tensor
    eps_j: torch.Tensor

    def metadata(self) -> dict:
        return {"t_i": self.t_i.tolist(), "t_j": self.t_j.tolist(), "s": self.s.tolist()}


@dataclass(frozen=True)
class LossBreakdown:
    l1_i: float
    l1_j: float
    l2_ij: float
    l2_ji: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def _path_loss(model, noisy, clean_target, cond, s, t, dt, schedule):
    target = residual_target(noisy, clean_target, s, schedule)
    pred = model(noisy, cond, s, t, dt)
    return torch.mean((target - pred) ** 2)


def loss_standard(model, batch: TrainBatch, schedule: NoiseSchedule) -> torch.Tensor:
    """Noise regression at t_i with Delta t = 0.

    The target is written as (noisy - sqrt(ab) x_i) / sqrt(1 - ab), which
    equals eps_i; sharing the expression with the shifted path makes the
    t_i == t_j case agree exactly.
    """
    noisy = forward_noise(batch.x_i, batch.s, schedule, batch.eps_i)
    return _path_loss(model, noisy, batch.x_i, batch.cond, batch.s, batch.t_i,
                      torch.zeros_like(batch.t_i), schedule)


def loss_shifted(model, batch: TrainBatch, schedule: NoiseSchedule, direction: str = "ij") -> torch.Tensor:
    """Reuse one horizon's noisy state and regress toward the other horizon's clean map."""
    if direction == "ij":
        src_x, src_eps, src_t, dst_x, dst_t = batch.x_i, batch.eps_i, batch.t_i, batch.x_j, batch.t_j
    elif direction == "ji":
        src_x, src_eps, src_t, dst_x, dst_t = batch.x_j, batch.eps_j, batch.t_j, batch.x_i, batch.t_i
    else:
        raise ValueError(f"direction must be 'ij' or 'ji', got {direction!r}")
    noisy = forward_noise(src_x, batch.s, schedule, src_eps)
    return _path_loss(model, noisy, dst_x, batch.cond, batch.s, dst_t, dst_t - src_t, schedule)


def dpsl_losses(model, batch: TrainBatch, schedule: NoiseSchedule):
    """All four terms from one stacked forward pass. Returns (total tensor, LossBreakdown)."""
    s = batch.s
    noisy_i = forward_noise(batch.x_i, s, schedule, batch.eps_i)
    noisy_j = forward_noise(batch.x_j, s, schedule, batch.eps_j)
    zero = torch.zeros_like(batch.t_i)
    noisy = torch.cat([noisy_i, noisy_j, noisy_i, noisy_j])
    clean = torch.cat([batch.x_i, batch.x_j, batch.x_j, batch.x_i])
    t = torch.cat([batch.t_i, batch.t_j, batch.t_j, batch.t_i])
    dt = torch.cat([zero, zero, batch.t_j - batch.t_i, batch.t_i - batch.t_j])
    s4 = s.repeat(4)
    cond4 = batch.cond.repeat(4, 1, 1, 1)
    target = residual_target(noisy, clean, s4, schedule)
    pred = model(noisy, cond4, s4, t, dt)
    per_term = ((target - pred) ** 2).reshape(4, -1).mean(dim=1)
    total = per_term.sum()
    l1_i, l1_j, l2_ij, l2_ji = (float(v) for v in per_term.detach())
    return total, LossBreakdown(l1_i, l1_j, l2_ij, l2_ji, float(total.detach()))


def dpsl_step(model, optimizer, batch: TrainBatch, schedule: NoiseSchedule) -> LossBreakdown:
    model.train()
    optimizer.zero_grad(set_to_none=True)
    total, parts = dpsl_losses(model, batch, schedule)
    if not math.isfinite(parts.total):
        raise NonFiniteLossError(f"non-finite loss {parts}", batch.metadata())
    total.backward()
    optimizer.step()
    return parts


def sample_pair(plan: TreePlan, rng: np.random.Generator, p_tree: float = 0.8) -> tuple[int, int]:
    """A horizon pair: a parent->child branch edge with probability p_tree, else t_i == t_j."""
    edges = [(a, b) for a, b in plan.branch_transitions() if a != b]
    if edges and rng.random() < p_tree:
        return edges[int(rng.integers(len(edges)))]
    t = int(rng.integers(plan.horizons))
    return t, t


@dataclass
class TrainConfig:
    epochs: int = 1
    max_steps: int | None = None
    batch_size: int = 4
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 0.01
    p_tree: float = 0.8
    seed: int = 0
    L: int = 4
    branching: list[int] | None = None
    D_test: int = 10
    val_interval: int = 0  # steps; 0 validates once at the end
    val_max_segments: int = 8
    checkpoint_interval: int = 0  # steps; 0 keeps only last and best
    log_interval: int = 1


@dataclass
class TrainResult:
    out_dir: Path
    steps: int
    checkpoints: list[Path] = field(default_factory=list)
    best_val_rmse: float | None = None
    history: list[dict] = field(default_factory=list)
    val_history: list[dict] = field(default_factory=list)


def make_batch(dataset: FRMDataset, starts: list[int], plan: TreePlan, schedule: NoiseSchedule,
               seed: int, step: int, p_tree: float, dtype=torch.float32) -> TrainBatch:
    """Batch for ``step``; a pure function of (seed, step, starts) so training resumes exactly."""
    rng = numpy_rng(seed, "batch", step)
    gen = torch_gen(seed, "noise", step)
    conds, xi, xj, ti, tj = [], [], [], [], []
    for start in starts:
        cond, targets = dataset.segment(start)
        a, b = sample_pair(plan, rng, p_tree)
        conds.append(cond)
        xi.append(targets[a])
        xj.append(targets[b])
        ti.append(a)
        tj.append(b)
    as_t = lambda arrs: torch.from_numpy(np.stack(arrs)[:, None]).to(dtype)
    s = torch.from_numpy(rng.integers(1, schedule.D + 1, size=len(starts))).long()
    shape = (len(starts), 1) + dataset.resolution
    eps_i = torch.randn(shape, generator=gen, dtype=dtype)
    eps_j = torch.randn(shape, generator=gen, dtype=dtype)
    return TrainBatch(cond=as_t(conds), t_i=torch.tensor(ti), t_j=torch.tensor(tj),
                      x_i=as_t(xi), x_j=as_t(xj), s=s, eps_i=eps_i, eps_j=eps_j)


def validation_rmse(model: ShiftingDenoiser, dataset: FRMDataset, schedule: NoiseSchedule,
                    L: int, D_test: int, seed: int, split: str = "val", max_segments: int | None = None,
                    branching=None) -> float | None:
    starts = dataset.starts(split)[:max_segments] if max_segments else dataset.starts(split)
    if not starts:
        return None
    stepping = subsample_levels(schedule.D, D_test)
    plan = build_plan(dataset.horizons, L, D_test, branching)
    model.eval()
    errs = []
    for k, start in enumerate(starts):
        cond, targets = dataset.segment(start)
        run = run_tree(model, plan, stepping, ConditioningContext(torch.from_numpy(cond)), schedule,
                       seed=derive_seed(seed, "val", k))
        errs.append(float(np.sqrt(np.mean((run.outputs - targets) ** 2))))
    return float(np.mean(errs))


def _manifest(model_cfg: DenoiserConfig, schedule: NoiseSchedule, cfg: TrainConfig,
              plan: TreePlan, dataset: FRMDataset, step: int, extra: dict | None) -> dict:
    return {
        "denoiser_config": model_cfg.to_dict(),
        "schedule_params": schedule.to_dict(),
        "tree_params": {"L": plan.L, "branching": list(plan.branching), "horizons": plan.horizons,
                        "D_test": cfg.D_test},
        "normalization_constant": dataset.manifest.get("normalization_constant"),
        "training_step": step,
        "train_config": asdict(cfg),
        "version": __version__,
        **(extra or {}),
    }


def train_loop(dataset: FRMDataset, model_cfg: DenoiserConfig, schedule: NoiseSchedule,
               cfg: TrainConfig, out_dir: str | Path, resume_from: str | Path | None = None,
               manifest_extra: dict | None = None) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if tuple(model_cfg.resolution) != dataset.resolution:
        raise ValueError(f"model resolution {model_cfg.resolution} != dataset {dataset.resolution}")
    if model_cfg.horizons != dataset.horizons:
        raise ValueError(f"model horizons {model_cfg.horizons} != dataset horizons {dataset.horizons}")
    if model_cfg.max_level != schedule.D:
        raise ValueError(f"model max_level {model_cfg.max_level} != schedule length {schedule.D}")
    train_starts = dataset.starts("train")
    if not train_starts:
        raise ValueError("training split holds no segments")

    plan = build_plan(dataset.horizons, cfg.L, schedule.D, cfg.branching)
    torch.manual_seed(derive_seed(cfg.seed, "init"))
    model = ShiftingDenoiser(model_cfg)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr_max, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train_starts) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(total_steps, 1), eta_min=cfg.lr_min)

    result = TrainResult(out_dir=out_dir, steps=0)
    step = 0
    best = math.inf
    if resume_from is not None:
        model, man, state = load_checkpoint(resume_from)
        if man["denoiser_config"] != model_cfg.to_dict():
            raise CheckpointError("resume checkpoint was trained with a different denoiser config")
        try:
            optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr_max, weight_decay=cfg.weight_decay)
            optimizer.load_state_dict(state["optimizer"])
            lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(
                optimizer, T_max=max(total_steps, 1), eta_min=cfg.lr_min)
            lr_sched.load_state_dict(state["lr_scheduler"])
        except KeyError as exc:
            raise CheckpointError(f"checkpoint {resume_from} lacks training state {exc}") from exc
        step = int(man["training_step"])
        best = float(state.get("best_val_rmse", math.inf))

    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if resume_from is not None else "w"

    def checkpoint(name: str) -> Path:
        extra_state = {"optimizer": optimizer.state_dict(), "lr_scheduler": lr_sched.state_dict(),
                       "best_val_rmse": best}
        man = _manifest(model_cfg, schedule, cfg, plan, dataset, step, manifest_extra)
        p = save_checkpoint(out_dir / name, model, man, extra_state)
        result.checkpoints.append(p)
        return p

    def validate() -> None:
        nonlocal best
        rmse = validation_rmse(model, dataset, schedule, cfg.L, cfg.D_test, cfg.seed,
                               max_segments=cfg.val_max_segments, branching=cfg.branching)
        result.val_history.append({"step": step, "val_rmse": rmse})
        log.info("step %d validation rmse %s", step, rmse)
        if rmse is not None and rmse < best:
            best = rmse
            checkpoint("best")

    with open(metrics_path, mode) as mlog:
        while step < total_steps:
            epoch, pos = divmod(step, steps_per_epoch)
            order = numpy_rng(cfg.seed, "epoch", epoch).permutation(len(train_starts))
            idx = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
            batch = make_batch(dataset, [train_starts[i] for i in idx], plan, schedule,
                               cfg.seed, step, cfg.p_tree)
            lr = optimizer.param_groups[0]["lr"]
            try:
                parts = dpsl_step(model, optimizer, batch, schedule)
            except NonFiniteLossError as exc:
                dump = {"step": step, **exc.metadata, "segments": [train_starts[i] for i in idx]}
                (out_dir / "nonfinite_batch.json").write_text(json.dumps(dump, indent=1))
                exc.metadata = dump
                raise
            lr_sched.step()
            step += 1
            row = {"step": step, **parts.to_dict(), "lr": lr}
            result.history.append(row)
            if cfg.log_interval and step % cfg.log_interval == 0:
                mlog.write(json.dumps(row) + "\n")
            if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                checkpoint(f"step_{step:07d}")
            if cfg.val_interval and step % cfg.val_interval == 0:
                validate()

    if not cfg.val_interval or step % cfg.val_interval:
        validate()
    checkpoint("last")
    result.steps = step
    result.best_val_rmse = best if math.isfinite(best) else None
    return result
