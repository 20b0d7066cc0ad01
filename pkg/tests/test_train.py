from __future__ import annotations

import json
import math

import numpy as np
import pytest
import torch

from ntdiff.dataset import load_dataset
from ntdiff.errors import CheckpointError, NonFiniteLossError
from ntdiff.evaluate import make_synthetic_dataset
from ntdiff.model import DenoiserConfig, ShiftingDenoiser, load_checkpoint
from ntdiff.rng import numpy_rng
from ntdiff.schedule import NoiseSchedule, forward_noise, make_linear_schedule
from ntdiff.train import (TrainBatch, TrainConfig, dpsl_losses, dpsl_step, loss_shifted, loss_standard,
                          make_batch, sample_pair, train_loop)
from ntdiff.treeplan import build_plan


class Oracle(torch.nn.Module):
    """Returns a fixed tensor regardless of input."""

    def __init__(self, out):
        super().__init__()
        self.out = out
        self.w = torch.nn.Parameter(torch.zeros(()))

    def forward(self, noisy, cond, s, t, dt):
        return self.out + 0 * self.w


def _batch(B=2, H=4, dtype=torch.float64, same=False, seed=0):
    g = torch.Generator().manual_seed(seed)
    xi = torch.rand(B, 1, H, H, generator=g, dtype=dtype)
    xj = xi.clone() if same else torch.rand(B, 1, H, H, generator=g, dtype=dtype)
    ti = torch.randint(0, 5, (B,), generator=g)
    tj = ti.clone() if same else torch.randint(0, 5, (B,), generator=g)
    eps_i = torch.randn(B, 1, H, H, generator=g, dtype=dtype)
    return TrainBatch(cond=torch.rand(B, 1, H, H, generator=g, dtype=dtype), t_i=ti, t_j=tj, x_i=xi, x_j=xj,
                      s=torch.randint(1, 51, (B,), generator=g), eps_i=eps_i,
                      eps_j=eps_i.clone() if same else torch.randn(B, 1, H, H, generator=g, dtype=dtype))


def test_standard_loss_oracle_and_zero_predictor(schedule50):
    b = _batch()
    assert loss_standard(Oracle(b.eps_i), b, schedule50).item() == pytest.approx(0.0, abs=1e-20)
    big = _batch(B=1, H=256)
    val = loss_standard(Oracle(torch.zeros(1)), big, schedule50).item()
    assert val == pytest.approx(torch.mean(big.eps_i ** 2).item(), rel=1e-9)
    assert abs(val - 1.0) < 0.02


def test_standard_loss_hand_case():
    sch = NoiseSchedule.from_betas([0.25])
    eps = torch.tensor([[[[1.0, -1.0], [0.5, 0.0]]]], dtype=torch.float64)
    pred = torch.tensor([[[[0.5, -1.0], [0.0, 1.0]]]], dtype=torch.float64)
    x = torch.tensor([[[[0.2, 0.4], [0.6, 0.8]]]], dtype=torch.float64)
    b = TrainBatch(cond=x, t_i=torch.tensor([0]), t_j=torch.tensor([0]), x_i=x, x_j=x, s=torch.tensor([1]),
                   eps_i=eps, eps_j=eps)
    expected = (0.5**2 + 0 + 0.5**2 + 1.0) / 4
    assert loss_standard(Oracle(pred), b, sch).item() == pytest.approx(expected, abs=1e-12)


def test_shifted_loss_hand_case():
    sch = NoiseSchedule.from_betas([0.25])  # alpha_bar = 0.75
    xi = torch.tensor([[[[0.2, 0.4], [0.6, 0.8]]]], dtype=torch.float64)
    xj = torch.tensor([[[[1.0, 0.0], [0.5, 0.25]]]], dtype=torch.float64)
    eps = torch.tensor([[[[1.0, -1.0], [0.5, 0.0]]]], dtype=torch.float64)
    b = TrainBatch(cond=xi, t_i=torch.tensor([0]), t_j=torch.tensor([2]), x_i=xi, x_j=xj, s=torch.tensor([1]),
                   eps_i=eps, eps_j=eps)
    # independent arithmetic: noisy = sqrt(.75) xi + .5 eps; target = (noisy - sqrt(.75) xj) / .5
    a = math.sqrt(0.75)
    xi_l, xj_l, e_l = [0.2, 0.4, 0.6, 0.8], [1.0, 0.0, 0.5, 0.25], [1.0, -1.0, 0.5, 0.0]
    target = [((a * p + 0.5 * e) - a * q) / 0.5 for p, q, e in zip(xi_l, xj_l, e_l)]
    expected = sum(v * v for v in target) / 4
    assert loss_shifted(Oracle(torch.zeros(1)), b, sch, "ij").item() == pytest.approx(expected, abs=1e-6)
    # x_j = 0 reduces the target to noisy / sqrt(1 - alpha_bar)
    b0 = TrainBatch(**{**b.__dict__, "x_j": torch.zeros_like(xj)})
    noisy = forward_noise(xi, b.s, sch, eps)
    assert loss_shifted(Oracle(torch.zeros(1)), b0, sch).item() == pytest.approx(
        torch.mean((noisy / 0.5) ** 2).item(), abs=1e-12)


def test_shifted_conditions_on_target_horizon_and_offset():
    seen = {}

    class Spy(Oracle):
        def forward(self, noisy, cond, s, t, dt):
            seen.update(t=t.clone(), dt=dt.clone())
            return super().forward(noisy, cond, s, t, dt)

    b = _batch()
    loss_shifted(Spy(torch.zeros(1)), b, make_linear_schedule(50), "ij")
    assert torch.equal(seen["t"], b.t_j) and torch.equal(seen["dt"], b.t_j - b.t_i)
    loss_shifted(Spy(torch.zeros(1)), b, make_linear_schedule(50), "ji")
    assert torch.equal(seen["t"], b.t_i) and torch.equal(seen["dt"], b.t_i - b.t_j)
    with pytest.raises(ValueError):
        loss_shifted(Spy(torch.zeros(1)), b, make_linear_schedule(50), "sideways")


def test_degenerate_pair_float64_bitwise(tiny_config, schedule50):
    torch.manual_seed(0)
    m = ShiftingDenoiser(tiny_config).double()
    for k in range(10):
        b = _batch(H=8, same=True, seed=k)
        with torch.no_grad():
            assert loss_shifted(m, b, schedule50).item() == loss_standard(m, b, schedule50).item()
            total, parts = dpsl_losses(m, b, schedule50)
        assert parts.l1_i == parts.l1_j == parts.l2_ij == parts.l2_ji
        assert parts.total == pytest.approx(4 * parts.l1_i, rel=1e-15)


def test_breakdown_sums_and_nonnegative(tiny_model, schedule50):
    b = _batch(H=8, dtype=torch.float32)
    _, parts = dpsl_losses(tiny_model, b, schedule50)
    assert min(parts.l1_i, parts.l1_j, parts.l2_ij, parts.l2_ji) >= 0
    assert parts.total == pytest.approx(parts.l1_i + parts.l1_j + parts.l2_ij + parts.l2_ji, rel=1e-6)
    # the stacked pass matches the four separate calls
    sep = [loss_standard(tiny_model, b, schedule50).item(),
           loss_standard(tiny_model, TrainBatch(**{**b.__dict__, "x_i": b.x_j, "t_i": b.t_j, "eps_i": b.eps_j}),
                         schedule50).item(),
           loss_shifted(tiny_model, b, schedule50, "ij").item(), loss_shifted(tiny_model, b, schedule50, "ji").item()]
    np.testing.assert_allclose([parts.l1_i, parts.l1_j, parts.l2_ij, parts.l2_ji], sep, rtol=1e-5)


def test_step_updates_and_gradients_reach_film_and_shift(tiny_model, schedule50):
    opt = torch.optim.AdamW(tiny_model.parameters(), lr=1e-3)
    b = _batch(H=8, dtype=torch.float32)
    b = TrainBatch(**{**b.__dict__, "t_j": (b.t_i + 1) % 5})
    before = tiny_model.film.weight.detach().clone()
    dpsl_step(tiny_model, opt, b, schedule50)
    assert tiny_model.film.weight.grad.abs().sum() > 0
    assert tiny_model.shift_embed.mlp[0].weight.grad.abs().sum() > 0
    assert not torch.equal(before, tiny_model.film.weight)


def test_identical_batch_gives_identical_breakdown(tiny_model, schedule50):
    b = _batch(H=8, dtype=torch.float32)
    with torch.no_grad():
        assert dpsl_losses(tiny_model, b, schedule50)[1] == dpsl_losses(tiny_model, b, schedule50)[1]


def test_nonfinite_loss_aborts(tiny_model, schedule50):
    opt = torch.optim.SGD(tiny_model.parameters(), lr=0.1)
    b = _batch(H=8, dtype=torch.float32)
    b.x_i[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as info:
        dpsl_step(tiny_model, opt, b, schedule50)
    assert "t_i" in info.value.metadata


def test_sample_pair_offsets():
    plan = build_plan(27, 4, 1000)
    rng = numpy_rng(0, "t")
    offsets = set()
    for _ in range(3000):
        a, b = sample_pair(plan, rng)
        if a != b:
            offsets.add(b - a)
    assert offsets <= {1, 2, 3, 6, 9, 18} and offsets
    assert all(a == b for a, b in (sample_pair(plan, rng, p_tree=0.0) for _ in range(200)))
    chain = build_plan(1, 2, 10)
    assert all(sample_pair(chain, rng) == (0, 0) for _ in range(50))


@pytest.fixture(scope="module")
def toy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    make_synthetic_dataset(root, num_segments=20, horizons=4, resolution=(16, 16), seed=3)
    return load_dataset(root)


def _toy_cfgs(ds):
    mc = DenoiserConfig(resolution=ds.resolution, base_channels=4, depth=2, embed_dim=8, horizons=ds.horizons,
                        max_level=20)
    return mc, make_linear_schedule(20, 1e-3, 0.3)


def test_train_loop_writes_checkpoints_and_metrics(tmp_path, toy_dataset):
    mc, sch = _toy_cfgs(toy_dataset)
    cfg = TrainConfig(epochs=1, batch_size=4, L=3, branching=[2, 2], D_test=4, checkpoint_interval=2)
    res = train_loop(toy_dataset, mc, sch, cfg, tmp_path)
    assert res.steps == 4
    assert (tmp_path / "last" / "manifest.json").exists() and (tmp_path / "step_0000002").exists()
    man = json.loads((tmp_path / "last" / "manifest.json").read_text())
    assert man["training_step"] == 4 and man["tree_params"]["branching"] == [2, 2]
    rows = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [1, 2, 3, 4]
    assert set(rows[0]) == {"step", "l1_i", "l1_j", "l2_ij", "l2_ji", "total", "lr"}
    assert res.best_val_rmse is not None and (tmp_path / "best").exists()


def test_train_loop_seeded_determinism_and_resume(tmp_path, toy_dataset):
    mc, sch = _toy_cfgs(toy_dataset)
    cfg = TrainConfig(epochs=3, batch_size=4, L=3, D_test=4, checkpoint_interval=5, val_interval=0)
    a = train_loop(toy_dataset, mc, sch, cfg, tmp_path / "a")
    b = train_loop(toy_dataset, mc, sch, cfg, tmp_path / "b")
    assert [r["total"] for r in a.history] == [r["total"] for r in b.history]
    # resume from step 5 reproduces the uninterrupted run
    c = train_loop(toy_dataset, mc, sch, cfg, tmp_path / "c", resume_from=tmp_path / "a" / "step_0000005")
    assert [r["total"] for r in c.history] == [r["total"] for r in a.history[5:]]
    ma, _, _ = load_checkpoint(tmp_path / "a" / "last")
    mc_, _, _ = load_checkpoint(tmp_path / "c" / "last")
    for p, q in zip(ma.state_dict().values(), mc_.state_dict().values()):
        assert torch.equal(p, q)


def test_resume_from_corrupted_checkpoint(tmp_path, toy_dataset):
    mc, sch = _toy_cfgs(toy_dataset)
    cfg = TrainConfig(epochs=1, batch_size=4, L=3, D_test=4)
    train_loop(toy_dataset, mc, sch, cfg, tmp_path / "a")
    (tmp_path / "a" / "last" / "state.pt").write_bytes(b"\x00" * 10)
    with pytest.raises(CheckpointError):
        train_loop(toy_dataset, mc, sch, cfg, tmp_path / "b", resume_from=tmp_path / "a" / "last")


def test_overfit_two_segments(tmp_path):
    make_synthetic_dataset(tmp_path / "d", num_segments=3, horizons=4, resolution=(16, 16), seed=0,
                           ratios=(2 / 3, 1 / 3, 0.0))
    ds = load_dataset(tmp_path / "d")
    assert len(ds.starts("train")) == 2
    mc = DenoiserConfig(resolution=(16, 16), base_channels=8, depth=2, embed_dim=16, horizons=4, max_level=20)
    sch = make_linear_schedule(20, 1e-3, 0.3)
    cfg = TrainConfig(epochs=200, batch_size=2, lr_max=3e-3, lr_min=1e-4, L=3, D_test=4, val_interval=0)
    res = train_loop(ds, mc, sch, cfg, tmp_path / "ck")
    first = np.mean([r["total"] for r in res.history[:20]])
    last = np.mean([r["total"] for r in res.history[-20:]])
    assert last < 0.5 * first


def test_p_tree_zero_gives_degenerate_pairs(toy_dataset):
    _, sch = _toy_cfgs(toy_dataset)
    plan = build_plan(toy_dataset.horizons, 3, sch.D)
    starts = toy_dataset.starts("train")[:4]
    for step in range(5):
        b = make_batch(toy_dataset, starts, plan, sch, 0, step, 0.0)
        assert torch.equal(b.t_i, b.t_j) and torch.equal(b.x_i, b.x_j)
    again = make_batch(toy_dataset, starts, plan, sch, 0, 4, 0.0)
    assert torch.equal(again.eps_i, b.eps_i) and torch.equal(again.s, b.s)
