from __future__ import annotations

import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ntdiff.dataset import load_dataset
from ntdiff.evaluate import (bench_scaling, count_module_flops, efficiency, flops_estimate, flops_per_call,
                             kl_divergence, linear_r2, make_synthetic_dataset, mean_quality, quality,
                             synthetic_segment)
from ntdiff.ingest import check_no_leakage
from ntdiff.model import ConditioningContext, DenoiserConfig, ShiftingDenoiser
from ntdiff.rng import numpy_rng
from ntdiff.sample import run_independent
from ntdiff.schedule import make_linear_schedule, subsample_levels

maps = arrays(np.float64, (2, 4, 4), elements=st.floats(0.0, 1.0))


def test_identity_gives_zero_errors():
    x = np.random.default_rng(0).random((3, 8, 8))
    q = quality(x, x)
    assert q.rmse == 0.0 and q.mae == 0.0 and q.kl == pytest.approx(0.0, abs=1e-12)


def test_constant_offset():
    x = np.random.default_rng(0).random((3, 8, 8))
    q = quality(x + 0.1, x)
    assert q.rmse == pytest.approx(0.1, abs=1e-12) and q.mae == pytest.approx(0.1, abs=1e-12)


def test_kl_hand_value_and_asymmetry():
    p = np.array([[0.4, 0.3], [0.2, 0.1]])
    u = np.full((2, 2), 0.25)
    expected = sum(v * math.log(v / 0.25) for v in (0.4, 0.3, 0.2, 0.1))
    assert kl_divergence(p, u) == pytest.approx(expected, abs=1e-7)
    assert kl_divergence(p, u) != pytest.approx(kl_divergence(u, p), abs=1e-6)
    # scale invariance: both maps are renormalized
    assert kl_divergence(3 * p, 5 * u) == pytest.approx(kl_divergence(p, u), abs=1e-7)
    with pytest.raises(ValueError):
        kl_divergence(-p, u)


def test_quality_input_checks():
    with pytest.raises(ValueError):
        quality(np.zeros((2, 4, 4)), np.zeros((2, 4, 5)))
    bad = np.zeros((2, 4, 4))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        quality(bad, np.zeros((2, 4, 4)))


@settings(max_examples=50, deadline=None)
@given(a=maps, b=maps)
def test_metric_properties(a, b):
    q, r = quality(a, b), quality(b, a)
    assert q.rmse >= q.mae - 1e-12 >= -1e-12
    assert q.rmse == pytest.approx(r.rmse) and q.mae == pytest.approx(r.mae)
    assert q.kl >= -1e-12


def test_mean_quality():
    from ntdiff.evaluate import QualityMetrics
    m = mean_quality([QualityMetrics(1.0, 2.0, 3.0), QualityMetrics(3.0, 4.0, 5.0)])
    assert (m.rmse, m.mae, m.kl) == (2.0, 3.0, 4.0)


def test_conv_flops_hand_count():
    conv = nn.Conv2d(1, 1, 1)
    assert count_module_flops(conv, torch.zeros(1, 1, 4, 4)) == 32
    conv3 = nn.Conv2d(2, 4, 3, padding=1)
    assert count_module_flops(conv3, torch.zeros(1, 2, 4, 4)) == 2 * (4 * 16) * 9 * 2
    lin = nn.Linear(5, 3)
    assert count_module_flops(lin, torch.zeros(2, 5)) == 2 * 6 * 5


def test_flops_linear_in_calls():
    cfg = DenoiserConfig(resolution=(8, 8), base_channels=4, depth=2, embed_dim=8, horizons=9, max_level=50)
    assert flops_estimate(cfg, 0) == 0
    one = flops_estimate(cfg, 1)
    assert one > 0 and flops_estimate(cfg, 84) == pytest.approx(84 * one)
    assert flops_per_call(cfg) == pytest.approx(one * 1e9)
    with pytest.raises(ValueError):
        flops_estimate(cfg, -1)


def test_efficiency_report(tiny_model, schedule50):
    ctx = ConditioningContext(torch.zeros(8, 8))
    runs = [run_independent(tiny_model, 2, subsample_levels(50, 3), ctx, schedule50) for _ in range(3)]
    rep = efficiency(tiny_model, runs)
    assert rep.calls == 6 and rep.wall_time_std_ms is not None and rep.params_m > 0


def test_linear_r2():
    assert linear_r2([1, 2, 3, 4], [2, 4, 6, 8]) == pytest.approx(1.0)
    assert linear_r2([1, 2, 3, 4], [1, 4, 9, 16]) < 1.0


def test_bench_needs_three_repeats(tiny_model, schedule50):
    ctx = ConditioningContext(torch.zeros(8, 8))
    with pytest.raises(ValueError):
        bench_scaling(tiny_model, ctx, schedule50, ["tree"], [6], repeats=2)
    res = bench_scaling(tiny_model, ctx, schedule50, ["tree", "independent"], [6, 12], repeats=3, L=3, warmup=0)
    assert len(res.rows) == 4 and set(res.ordering) == {6, 12}
    assert set(res.r_squared) == {"tree", "independent"}
    assert all(r.calls == r.expected_calls for r in res.rows)


def test_synthetic_zero_velocity_and_mass():
    rng = numpy_rng(0, "t")
    frames = synthetic_segment(5, (32, 32), rng, velocity=(0.0, 0.0))
    for f in frames[1:]:
        np.testing.assert_array_equal(f, frames[0])
    for f in synthetic_segment(5, (32, 32), rng):
        assert 0.99 <= f.sum() <= 1.01
    with pytest.raises(ValueError):
        synthetic_segment(5, (8, 8), rng)
    with pytest.raises(ValueError):
        synthetic_segment(5, (16, 16), rng, motion="spiral")


def test_synthetic_through_center_motion():
    frames = synthetic_segment(4, (32, 32), numpy_rng(1, "t"))
    peaks = [np.array(np.unravel_index(np.argmax(f), f.shape)) for f in frames]
    steps = np.diff(peaks, axis=0)
    # constant velocity up to pixel rounding
    assert np.abs(steps - steps.mean(axis=0)).max() <= 1


def test_synthetic_dataset_deterministic_and_leak_free(tmp_path):
    a = make_synthetic_dataset(tmp_path / "a", 10, 4, seed=7)
    b = make_synthetic_dataset(tmp_path / "b", 10, 4, seed=7)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()
    ds = load_dataset(a)
    assert ds.horizons == 4 and len(ds.starts("train")) == 7
    check_no_leakage(ds.index, 50)
    cond, targets = ds.segment(ds.starts("test")[0])
    assert cond.shape == (16, 16) and targets.shape == (4, 16, 16)
    assert 0.0 <= targets.min() and targets.max() <= 1.0
