"""
Reverse-diffusion samplers.

``run_tree`` walks a TreePlan: the root trajectory runs the first segment at
horizon 0, each node's final state is copied to its children, and a child's
first step is conditioned on its own horizon and its shift from the parent.
The three baselines (fully independent, fully shared, autoregressive) share the
same single-step update and call accounting so their costs are comparable.

Every denoiser invocation is counted per trajectory step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import ConditioningContext, ShiftingDenoiser
from .rng import torch_gen
from .schedule import InferenceStepping, NoiseSchedule
from .treeplan import TreePlan, build_plan, count_calls, shared_calls

SAMPLER_NAMES = ("tree", "independent", "shared", "autoregressive")
DATA_RANGE = (0.0, 1.0)  # normalized maps live in [0, 1]


def reverse_transition(
    noisy: torch.Tensor,
    s_from: int,
    s_to: int,
    eps_hat: torch.Tensor,
    schedule: NoiseSchedule,
    mode: str = "deterministic",
    generator: torch.Generator | None = None,
    clip: tuple[float, float] | None = DATA_RANGE,
) -> torch.Tensor:
    """One reverse step from level ``s_from`` to ``s_to`` given a noise estimate.

    Deterministic mode re-noises the clean estimate with the predicted noise.
    Stochastic mode uses the posterior variance, which for adjacent levels is
    the usual DDPM beta-tilde step. With ``clip`` set, the clean estimate is
    clamped to the data range and the noise estimate recomputed from it, so
    early high-noise steps cannot blow up.
    """
    if not s_from > s_to >= 0:
        raise ValueError(f"need s_from > s_to >= 0, got {s_from} -> {s_to}")
    ab_from = float(schedule.alpha_bars[s_from])
    ab_to = float(schedule.alpha_bars[s_to])
    x0 = (noisy - (1.0 - ab_from) ** 0.5 * eps_hat) / ab_from**0.5
    if clip is not None:
        x0 = x0.clamp(*clip)
        eps_hat = (noisy - ab_from**0.5 * x0) / (1.0 - ab_from) ** 0.5
    if s_to == 0:
        return x0
    if mode == "deterministic":
        return ab_to**0.5 * x0 + (1.0 - ab_to) ** 0.5 * eps_hat
    if mode == "stochastic":
        var = (1.0 - ab_to) / (1.0 - ab_from) * (1.0 - ab_from / ab_to)
        z = torch.randn(noisy.shape, generator=generator, dtype=noisy.dtype)
        return ab_to**0.5 * x0 + max(1.0 - ab_to - var, 0.0) ** 0.5 * eps_hat + var**0.5 * z
    raise ValueError(f"unknown mode {mode!r}")


def resolve_mode(mode: str, stepping: InferenceStepping) -> str:
    if mode != "auto":
        return mode
    skips = any(a - b > 1 for a, b in stepping.transitions)
    return "deterministic" if skips else "stochastic"


class CountingDenoiser:
    """Wraps the network; counts one call per trajectory (batch row) per step."""

    def __init__(self, model: ShiftingDenoiser) -> None:
        self.model = model
        self.calls = 0
        self.dtype = next(model.parameters()).dtype

    @torch.no_grad()
    def __call__(self, x, cond, s: int, t: int, dt: int) -> torch.Tensor:
        self.calls += x.shape[0]
        idx = lambda v: torch.full((x.shape[0],), v, dtype=torch.long)
        return self.model(x, cond, idx(s), idx(t), idx(dt))


@dataclass
class SamplerRun:
    sampler: str
    seed: int
    levels: tuple[int, ...]
    outputs: np.ndarray  # (T+1, H, W) float32, clipped to [0, 1]
    call_counter: int
    expected_calls: int
    wall_time_ms: float
    plan: TreePlan | None = None
    trace: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        return {
            "sampler": self.sampler,
            "plan": self.plan.to_dict() if self.plan is not None else None,
            "call_counter": self.call_counter,
            "expected_calls": self.expected_calls,
            "wall_time_ms": self.wall_time_ms,
            "seed": self.seed,
            "levels": list(self.levels),
        }


def _init_noise(shape, dtype, seed: int, key) -> torch.Tensor:
    return torch.randn(shape, generator=torch_gen(seed, "init", key), dtype=dtype)


def _walk(net, x, cond, transitions, schedule, mode, gen, t: int, first_shift: int = 0):
    for k, (s_from, s_to) in enumerate(transitions):
        eps_hat = net(x, cond, s_from, t, first_shift if k == 0 else 0)
        x = reverse_transition(x, s_from, s_to, eps_hat, schedule, mode, gen)
    return x


def _emit(states: list[torch.Tensor]) -> np.ndarray:
    out = torch.stack([s[0, 0] for s in states]).clamp(0.0, 1.0)
    return out.to(torch.float32).numpy()


def _prep(model: ShiftingDenoiser, ctx: ConditioningContext):
    net = CountingDenoiser(model)
    shape = (1, 1) + tuple(model.config.resolution)
    cond = ctx.batch(torch.empty(0, dtype=net.dtype))
    if tuple(cond.shape[-2:]) != tuple(model.config.resolution):
        raise ValueError(f"conditioning map {tuple(cond.shape[-2:])} does not match model {model.config.resolution}")
    return net, shape, cond


def _check_horizons(model: ShiftingDenoiser, horizons: int) -> None:
    if not 1 <= horizons <= model.config.horizons:
        raise ValueError(f"model supports up to {model.config.horizons} horizons, asked for {horizons}")


def run_tree(
    model: ShiftingDenoiser,
    plan: TreePlan,
    stepping: InferenceStepping,
    ctx: ConditioningContext,
    schedule: NoiseSchedule,
    seed: int = 0,
    mode: str = "auto",
    record_trace: bool = False,
) -> SamplerRun:
    if plan.D != len(stepping):
        raise ValueError(f"plan covers {plan.D} steps but stepping has {len(stepping)}")
    _check_horizons(model, plan.horizons)
    mode = resolve_mode(mode, stepping)
    segments = stepping.split(plan.segment_steps)
    net, shape, cond = _prep(model, ctx)
    trace: dict = {}

    start = time.perf_counter()
    root = plan.levels[0][0]
    entry = {root.path: _init_noise(shape, net.dtype, seed, 0)}
    for level, nodes in enumerate(plan.levels):
        finals = {}
        for node in nodes:
            x = entry[node.path]
            if record_trace:
                trace[node.path] = x.clone()
            gen = torch_gen(seed, "node", node.path) if mode == "stochastic" else None
            finals[node.path] = _walk(net, x, cond, segments[level], schedule, mode, gen,
                                      t=node.horizon, first_shift=node.shift)
        if level + 1 < plan.L:
            # children start from an exact copy of the parent's state
            entry = {c.path: finals[c.path[:-1]].clone() for c in plan.levels[level + 1]}
    leaves = sorted(plan.leaves, key=lambda n: n.horizon)
    outputs = _emit([finals[n.path] for n in leaves])
    elapsed = (time.perf_counter() - start) * 1e3

    return SamplerRun("tree", seed, stepping.levels, outputs, net.calls, count_calls(plan).calls_nt,
                      elapsed, plan=plan, trace=trace)


def run_independent(model, horizons: int, stepping: InferenceStepping, ctx: ConditioningContext,
                    schedule: NoiseSchedule, seed: int = 0, mode: str = "auto") -> SamplerRun:
    _check_horizons(model, horizons)
    mode = resolve_mode(mode, stepping)
    net, shape, cond = _prep(model, ctx)
    start = time.perf_counter()
    states = []
    for t in range(horizons):
        gen = torch_gen(seed, "horizon", t) if mode == "stochastic" else None
        x = _init_noise(shape, net.dtype, seed, t)
        states.append(_walk(net, x, cond, stepping.transitions, schedule, mode, gen, t=t))
    outputs = _emit(states)
    elapsed = (time.perf_counter() - start) * 1e3
    return SamplerRun("independent", seed, stepping.levels, outputs, net.calls,
                      horizons * len(stepping), elapsed)


def run_fully_shared(model, horizons: int, stepping: InferenceStepping, ctx: ConditioningContext,
                     schedule: NoiseSchedule, seed: int = 0, mode: str = "auto",
                     record_trace: bool = False) -> SamplerRun:
    """One trunk at horizon 0 down to the smallest nonzero level, then one shifted step per horizon."""
    _check_horizons(model, horizons)
    mode = resolve_mode(mode, stepping)
    net, shape, cond = _prep(model, ctx)
    trans = stepping.transitions
    start = time.perf_counter()
    gen = torch_gen(seed, "trunk") if mode == "stochastic" else None
    trunk = _walk(net, _init_noise(shape, net.dtype, seed, 0), cond, trans[:-1], schedule, mode, gen, t=0)
    s_from, s_to = trans[-1]
    trace = {"trunk": trunk.clone()} if record_trace else {}
    states = []
    for t in range(horizons):
        x = trunk.clone()
        if record_trace:
            trace[("start", t)] = x.clone()
        eps_hat = net(x, cond, s_from, t, t)
        states.append(reverse_transition(x, s_from, s_to, eps_hat, schedule, mode))
    outputs = _emit(states)
    elapsed = (time.perf_counter() - start) * 1e3
    return SamplerRun("shared", seed, stepping.levels, outputs, net.calls,
                      shared_calls(horizons, len(stepping)), elapsed, trace=trace)


def run_autoregressive(model, horizons: int, stepping: InferenceStepping, ctx: ConditioningContext,
                       schedule: NoiseSchedule, seed: int = 0, mode: str = "auto") -> SamplerRun:
    """Each frame is a one-day-ahead sample (t=0) conditioned on the previous output."""
    _check_horizons(model, horizons)
    mode = resolve_mode(mode, stepping)
    net, shape, cond = _prep(model, ctx)
    start = time.perf_counter()
    states = []
    for t in range(horizons):
        gen = torch_gen(seed, "horizon", t) if mode == "stochastic" else None
        x = _init_noise(shape, net.dtype, seed, t)
        x = _walk(net, x, cond, stepping.transitions, schedule, mode, gen, t=0)
        states.append(x)
        cond = x.clamp(0.0, 1.0)
    outputs = _emit(states)
    elapsed = (time.perf_counter() - start) * 1e3
    return SamplerRun("autoregressive", seed, stepping.levels, outputs, net.calls,
                      horizons * len(stepping), elapsed)


def run_sampler(name: str, model: ShiftingDenoiser, ctx: ConditioningContext, schedule: NoiseSchedule,
                stepping: InferenceStepping, horizons: int, L: int = 4, branching=None,
                seed: int = 0, mode: str = "auto") -> SamplerRun:
    if name == "tree":
        plan = build_plan(horizons, L, len(stepping), branching)
        return run_tree(model, plan, stepping, ctx, schedule, seed, mode)
    if name == "independent":
        return run_independent(model, horizons, stepping, ctx, schedule, seed, mode)
    if name == "shared":
        return run_fully_shared(model, horizons, stepping, ctx, schedule, seed, mode)
    if name == "autoregressive":
        return run_autoregressive(model, horizons, stepping, ctx, schedule, seed, mode)
    raise ValueError(f"unknown sampler {name!r}; choose from {SAMPLER_NAMES}")
