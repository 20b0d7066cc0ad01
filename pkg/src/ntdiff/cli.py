"""
ntdiff command line: build-data, plan-tree, train, sample, evaluate, bench, render.

Every subcommand takes ``--config FILE`` plus dotted overrides, either as
``--set train.lr_max=3e-4`` or directly as ``--train.lr_max 3e-4``.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ExperimentConfig, load_config
from .dataset import FRMDataset, load_dataset, write_dataset
from .errors import CheckpointError, ConfigError, DataError, NonFiniteLossError
from .evaluate import (KL_CONVENTION, bench_scaling, efficiency, flops_per_call, format_bench,
                       make_synthetic_dataset, mean_quality, quality)
from .frm import FireRiskMap, GeoTransform, SigmaConfig, build_frm, normalize_dataset, read_frm, write_frm
from .ingest import BBox, ParseStats, build_segment_index, parse_events
from .model import ConditioningContext, DenoiserConfig, ShiftingDenoiser, count_parameters, load_checkpoint
from .rng import derive_seed
from .sample import SAMPLER_NAMES, run_sampler
from .schedule import NoiseSchedule, make_linear_schedule, subsample_levels
from .train import TrainConfig, train_loop
from .treeplan import build_plan, count_calls, format_plan

log = logging.getLogger("ntdiff")

SHARED_NOTE = "stand-in baseline: one trunk, then a single shifted final step per horizon"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

# short flags mapped onto dotted config keys
ALIASES = {"--L": "tree.L", "--seed": "seed", "--D-test": "diffusion.D_test", "--D_test": "diffusion.D_test",
           "--dataset": "paths.dataset", "--checkpoints": "paths.checkpoints", "--output": "paths.output"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def version_string() -> str:
    """Package version plus the git commit, when run from a checkout."""
    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _is_override(tok: str) -> bool:
    key = tok.split("=", 1)[0]
    return tok.startswith("--") and ("." in key or key in ALIASES)


def _split_overrides(argv: list[str]) -> tuple[list[str], list[str]]:
    """Separate dotted/alias overrides from the regular arguments."""
    rest, out, i = [], [], 0
    while i < len(argv):
        tok = argv[i]
        if not _is_override(tok):
            rest.append(tok)
            i += 1
            continue
        key = tok[2:]
        if "=" in key:
            k, v = key.split("=", 1)
            out.append(f"{ALIASES.get('--' + k, k)}={v}")
            i += 1
            continue
        if i + 1 >= len(argv):
            raise UsageError(f"override {tok} needs a value")
        out.append(f"{ALIASES.get(tok, key)}={argv[i + 1]}")
        i += 2
    return rest, out


def _load(args, overrides: list[str]) -> ExperimentConfig:
    return load_config(args.config, list(args.set or []) + overrides)


def write_run_manifest(out_dir: Path, command: str, cfg: ExperimentConfig, **fields) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config": cfg.to_dict(), "config_hash": cfg.hash(), "seed": cfg.seed,
           "version": version_string(), **fields}
    path = out_dir / f"run_{command}.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")
    return path


def model_config(cfg: ExperimentConfig, resolution, horizons: int) -> DenoiserConfig:
    m = cfg.model
    return DenoiserConfig(resolution=tuple(resolution), base_channels=m.base_channels, depth=m.depth,
                          embed_dim=m.embed_dim, horizons=horizons, max_level=cfg.diffusion.D_train,
                          film_per_level=m.film_per_level)


def make_schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    d = cfg.diffusion
    return make_linear_schedule(d.D_train, d.beta_start, d.beta_end)


# --- build-data


def build_from_csv(cfg: ExperimentConfig, out_dir: Path) -> Path:
    d = cfg.data
    csv_path = Path(d.csv)
    if not csv_path.exists():
        raise DataError(f"CSV not found: {csv_path}")
    bbox = BBox.from_sequence(d.bbox)
    stats = ParseStats()
    try:
        days = parse_events(csv_path, region=bbox, min_confidence=d.min_confidence, stats=stats)
    except DataError as exc:
        raise DataError(f"{csv_path}: {exc}") from exc
    log.info("parsed %s: %d rows, %d kept, %d skipped", csv_path, stats.rows, stats.kept, stats.skipped)
    res = tuple(d.resolution)
    geo = GeoTransform(bbox, res)
    sig = SigmaConfig(d.b_lo, d.b_hi, d.sigma_min_px, d.sigma_max_px)
    maps = [build_frm(day, geo, sig, res) for day in days]
    for m, day in zip(maps, days):
        m.meta["acq_date"] = day.acq_date.isoformat()
        m.meta["num_events"] = len(day)
    index = build_segment_index(len(maps), tuple(d.ratios), d.segment_length, d.stride)
    lo, hi = index["train"].boundaries
    maps, c = normalize_dataset(maps, range(lo, hi), d.normalization, d.percentile)
    return write_dataset(out_dir, maps, index, bbox, c,
                         extra={"source": str(csv_path), "parse_stats": asdict(stats)})


def cmd_build_data(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.paths.dataset)
    if cfg.data.synthetic:
        make_synthetic_dataset(out, cfg.data.num_segments, cfg.horizons, tuple(cfg.data.resolution),
                               seed=derive_seed(cfg.seed, "data"), ratios=tuple(cfg.data.ratios),
                               sigma=cfg.data.synthetic_sigma_px, motion=cfg.data.motion)
    elif cfg.data.csv:
        build_from_csv(cfg, out)
    else:
        raise ConfigError("set data.csv or data.synthetic=true")
    ds = load_dataset(out)
    write_run_manifest(out, "build-data", cfg, num_days=len(ds.frames),
                       segments={k: len(ds.starts(k)) for k in ("train", "val", "test")})
    print(f"dataset written to {out}: {len(ds.frames)} days, resolution {ds.resolution}, "
          + ", ".join(f"{k}={len(ds.starts(k))}" for k in ("train", "val", "test")) + " segments")
    return EXIT_OK


# --- plan-tree


def cmd_plan_tree(cfg: ExperimentConfig, args) -> int:
    horizons = args.horizons or cfg.horizons
    D = args.D or cfg.diffusion.D_train
    t0 = time.perf_counter()
    plan = build_plan(horizons, cfg.tree.L, D, cfg.tree.branching)
    report = count_calls(plan)
    elapsed = time.perf_counter() - t0
    print(format_plan(plan, report))
    doc = {"plan": plan.to_dict(), "cost": report.to_dict(), "elapsed_s": elapsed}
    if args.json:
        Path(args.json).parent.mkdir(parents=True, exist_ok=True)
        Path(args.json).write_text(json.dumps(doc, indent=1, default=str) + "\n")
    else:
        print(json.dumps(report.to_dict(), default=str))
    return EXIT_OK


# --- train


def _require_dataset(cfg: ExperimentConfig) -> FRMDataset:
    path = Path(cfg.paths.dataset)
    if not (path / "manifest.json").exists():
        raise DataError(f"no dataset at {path}; run `ntdiff build-data` first")
    return load_dataset(path)


def cmd_train(cfg: ExperimentConfig, args) -> int:
    ds = _require_dataset(cfg)
    mcfg = model_config(cfg, ds.resolution, ds.horizons)
    t = cfg.train
    tcfg = TrainConfig(epochs=t.epochs, max_steps=t.max_steps, batch_size=t.batch_size, lr_max=t.lr_max,
                       lr_min=t.lr_min, weight_decay=t.weight_decay, p_tree=t.p_tree,
                       seed=derive_seed(cfg.seed, "train"), L=cfg.tree.L, branching=cfg.tree.branching,
                       D_test=cfg.diffusion.D_test, val_interval=t.val_interval,
                       val_max_segments=t.val_max_segments, checkpoint_interval=t.checkpoint_interval)
    out = Path(cfg.paths.checkpoints)
    resume = args.resume
    if resume is not None and not Path(resume).exists():
        raise DataError(f"resume checkpoint not found: {resume}")
    extra = {"config_hash": cfg.hash(), "seed": cfg.seed, "version": version_string()}
    result = train_loop(ds, mcfg, make_schedule(cfg), tcfg, out, resume_from=resume, manifest_extra=extra)
    write_run_manifest(out, "train", cfg, steps=result.steps, best_val_rmse=result.best_val_rmse,
                       checkpoints=[str(p) for p in result.checkpoints])
    print(f"trained {result.steps} steps; best validation RMSE {result.best_val_rmse}; checkpoints in {out}")
    return EXIT_OK


# --- sample / evaluate / bench share checkpoint loading


def _checkpoint_path(cfg: ExperimentConfig, explicit: str | None) -> Path:
    if explicit:
        path = Path(explicit)
    else:
        root = Path(cfg.paths.checkpoints)
        path = root / "best" if (root / "best").exists() else root / "last"
    if not (path / "manifest.json").exists():
        raise DataError(f"no checkpoint at {path}; run `ntdiff train` first or pass --checkpoint")
    return path


def _load_model(cfg: ExperimentConfig, explicit: str | None):
    path = _checkpoint_path(cfg, explicit)
    model, manifest, _ = load_checkpoint(path)
    schedule = NoiseSchedule.from_dict(manifest["schedule_params"])
    return model, schedule, manifest, path


def _check_compatible(model: ShiftingDenoiser, ds: FRMDataset) -> None:
    if tuple(model.config.resolution) != ds.resolution:
        raise ConfigError(f"checkpoint resolution {tuple(model.config.resolution)} does not match "
                          f"dataset resolution {ds.resolution}")
    if model.config.horizons < ds.horizons:
        raise ConfigError(f"checkpoint covers {model.config.horizons} horizons, dataset needs {ds.horizons}")


def _segment_starts(ds: FRMDataset, split: str, limit: int | None) -> list[int]:
    starts = ds.starts(split)
    if not starts:
        raise DataError(f"split {split!r} holds no segments")
    return starts[:limit] if limit else starts


def cmd_sample(cfg: ExperimentConfig, args) -> int:
    ds = _require_dataset(cfg)
    model, schedule, _, ckpt = _load_model(cfg, args.checkpoint)
    _check_compatible(model, ds)
    starts = _segment_starts(ds, args.split, None)
    if not 0 <= args.segment < len(starts):
        raise UsageError(f"--segment must be in [0, {len(starts) - 1}]")
    start = starts[args.segment]
    cond, _ = ds.segment(start)
    stepping = subsample_levels(schedule.D, cfg.diffusion.D_test)
    seed = derive_seed(cfg.seed, "sample", start)
    run = run_sampler(args.sampler, model, ConditioningContext(torch.from_numpy(cond)), schedule, stepping,
                      ds.horizons, cfg.tree.L, cfg.tree.branching, seed, cfg.diffusion.mode)
    out = Path(cfg.paths.output) / f"sample_{args.sampler}_{args.split}{args.segment}"
    c = ds.manifest.get("normalization_constant")
    for t, grid in enumerate(run.outputs):
        write_frm(out / f"horizon_{t:02d}", FireRiskMap(grid, day_index=start + 1 + t, normalization_constant=c,
                                                         meta={"horizon": t}))
    write_run_manifest(out, "sample", cfg, checkpoint=str(ckpt), segment_start=start, **run.manifest())
    print(f"{args.sampler}: {run.call_counter} denoiser calls (expected {run.expected_calls}), "
          f"{run.wall_time_ms:.1f} ms -> {out}")
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    ds = _require_dataset(cfg)
    model, schedule, _, ckpt = _load_model(cfg, args.checkpoint)
    _check_compatible(model, ds)
    stepping = subsample_levels(schedule.D, cfg.diffusion.D_test)
    starts = _segment_starts(ds, args.split, args.max_segments)
    samplers = args.samplers.split(",")
    results = {}
    first_outputs = {}
    for name in samplers:
        metrics, runs = [], []
        for start in starts:
            cond, targets = ds.segment(start)
            run = run_sampler(name, model, ConditioningContext(torch.from_numpy(cond)), schedule, stepping,
                              ds.horizons, cfg.tree.L, cfg.tree.branching,
                              derive_seed(cfg.seed, "sample", start), cfg.diffusion.mode)
            metrics.append(quality(run.outputs, targets))
            runs.append(run)
            first_outputs.setdefault(name, run.outputs)
        q = mean_quality(metrics)
        eff = efficiency(model, runs)
        results[name] = {"quality": q.to_dict(), "efficiency": eff.to_dict()}
    out = Path(cfg.paths.output) / f"evaluate_{args.split}"
    doc = {"split": args.split, "segments": len(starts), "kl_convention": KL_CONVENTION, "results": results}
    if "shared" in samplers:
        doc["shared_note"] = SHARED_NOTE
    out.mkdir(parents=True, exist_ok=True)
    (out / "evaluate.json").write_text(json.dumps(doc, indent=1) + "\n")
    write_run_manifest(out, "evaluate", cfg, checkpoint=str(ckpt))
    print(f"{'sampler':<15}{'RMSE':>10}{'MAE':>10}{'KL':>10}{'calls':>8}{'time_ms':>10}{'GFLOPs':>9}{'params_M':>9}")
    for name, r in results.items():
        q, e = r["quality"], r["efficiency"]
        print(f"{name:<15}{q['rmse']:>10.4f}{q['mae']:>10.4f}{q['kl']:>10.4f}{e['calls']:>8}"
              f"{e['wall_time_ms']:>10.1f}{e['flops_g']:>9.3f}{e['params_m']:>9.3f}")
    print(f"KL convention: {KL_CONVENTION}")
    if "shared" in samplers:
        print(f"shared: {SHARED_NOTE}")
    if args.png:
        _, targets = ds.segment(starts[0])
        for name, outputs in first_outputs.items():
            render_pair(outputs, targets, out / f"{name}_segment0.png", title=name)
    return EXIT_OK


def cmd_bench(cfg: ExperimentConfig, args) -> int:
    if args.untrained:
        torch.manual_seed(derive_seed(cfg.seed, "init"))
        res = tuple(cfg.data.resolution)
        model = ShiftingDenoiser(model_config(cfg, res, cfg.horizons)).eval()
        schedule = make_schedule(cfg)
        cond = torch.zeros(res)
        ckpt = None
    else:
        model, schedule, _, ckpt = _load_model(cfg, args.checkpoint)
        ds = _require_dataset(cfg)
        _check_compatible(model, ds)
        cond = torch.from_numpy(ds.segment(_segment_starts(ds, "test", 1)[0])[0])
    d_list = [int(v) for v in args.steps.split(",")]
    result = bench_scaling(model, ConditioningContext(cond), schedule, args.samplers.split(","), d_list,
                           repeats=args.repeats, L=cfg.tree.L, branching=cfg.tree.branching,
                           horizons=model.config.horizons, seed=cfg.seed)
    text = format_bench(result)
    print(text)
    out = Path(cfg.paths.output) / "bench"
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(result.to_dict(), indent=1) + "\n")
    (out / "bench.txt").write_text(text + "\n")
    write_run_manifest(out, "bench", cfg, checkpoint=str(ckpt) if ckpt else None,
                       params=count_parameters(model), flops_per_call=flops_per_call(model.config))
    return EXIT_OK


# --- render


def render_pair(pred: np.ndarray, target: np.ndarray | None, path: Path, title: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = 1 if target is None else 2
    n = len(pred)
    fig, axes = plt.subplots(rows, n, figsize=(1.4 * n, 1.5 * rows), squeeze=False)
    for t in range(n):
        axes[0, t].imshow(pred[t], vmin=0, vmax=1, cmap="inferno")
        axes[0, t].set_title(f"t={t}", fontsize=7)
        if target is not None:
            axes[1, t].imshow(target[t], vmin=0, vmax=1, cmap="inferno")
    for ax in axes.ravel():
        ax.set_axis_off()
    if title:
        fig.suptitle(title + ("  (top: predicted, bottom: target)" if target is not None else ""), fontsize=8)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def cmd_render(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out or Path(cfg.paths.output) / "render")
    written = []
    for item in args.inputs:
        p = Path(item)
        bases = sorted(q.with_suffix("") for q in p.glob("*.f32")) if p.is_dir() else [p.with_suffix("")]
        if not bases:
            raise DataError(f"no .f32 maps under {p}")
        grids = np.stack([read_frm(b).grid for b in bases])
        name = p.name if p.is_dir() else p.stem
        written.append(render_pair(grids, None, out / f"{name}.png", title=name))
    for w in written:
        print(w)
    return EXIT_OK


COMMANDS = {
    "build-data": cmd_build_data,
    "plan-tree": cmd_plan_tree,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ntdiff", allow_abbrev=False, description="Tree-structured multi-horizon diffusion for fire-risk maps.")
    p.add_argument("--version", action="version", version=version_string())
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, allow_abbrev=False)
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    add("build-data", "build the FRM dataset from a CSV or synthetic generator")
    sp = add("plan-tree", "print the tree plan and exact call counts")
    sp.add_argument("--horizons", type=int)
    sp.add_argument("--D", type=int, help="reverse steps (default diffusion.D_train)")
    sp.add_argument("--json", help="write plan and cost report here")
    sp = add("train", "train the shifting denoiser")
    sp.add_argument("--resume", help="checkpoint directory to resume from")
    sp = add("sample", "sample one segment's forecast")
    sp.add_argument("--checkpoint")
    sp.add_argument("--sampler", default="tree", choices=SAMPLER_NAMES)
    sp.add_argument("--split", default="test")
    sp.add_argument("--segment", type=int, default=0, help="segment position within the split")
    sp = add("evaluate", "quality and efficiency metrics over a split")
    sp.add_argument("--checkpoint")
    sp.add_argument("--samplers", default="tree,independent")
    sp.add_argument("--split", default="test")
    sp.add_argument("--max-segments", type=int)
    sp.add_argument("--png", action="store_true", help="also save heatmaps for the first segment")
    sp = add("bench", "wall time against reverse step count")
    sp.add_argument("--checkpoint")
    sp.add_argument("--untrained", action="store_true", help="benchmark freshly initialised weights")
    sp.add_argument("--samplers", default="tree,independent")
    sp.add_argument("--steps", default="10,20,50,100")
    sp.add_argument("--repeats", type=int, default=3)
    sp = add("render", "PNG heatmaps of stored maps")
    sp.add_argument("inputs", nargs="+", help=".f32 files or directories of them")
    sp.add_argument("--out")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        rest, overrides = _split_overrides(argv)
        args = parser.parse_args(rest)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _load(args, overrides)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CheckpointError, NonFiniteLossError, RuntimeError, FloatingPointError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
