import dataclasses

import numpy as np
import pytest
import torch

from recfusion import checkpoint as ckpt
from recfusion.data import make_synthetic_dataset, sample_patch_batch
from recfusion.errors import ContractError, DatasetError, TrainingError
from recfusion.gradcheck import tiny_batches, tiny_params, toy_meta_gradient
from recfusion.trainer import (
    TrainConfig,
    fusion_losses,
    fusion_update,
    init_state,
    inner_update,
    load_state,
    lookahead,
    meta_gradient,
    meta_gradient_oracle,
    outer_update,
    save_state,
    train,
    write_history,
)

from conftest import TINY

F64 = dict(dtype="float64", clip_norm=None)


def stage_counts(history):
    out = {}
    for r in history:
        out[r["stage"]] = out.get(r["stage"], 0) + 1
    return out


def same_history(h1, h2):
    def key(r):
        return tuple(None if isinstance(v, float) and np.isnan(v) else v for v in r.values())
    return [key(r) for r in h1] == [key(r) for r in h2]


def test_train_config_validation():
    TrainConfig(inner_lr_eta_Fprime=0.0)
    for bad in (dict(outer_lr_eta_P=0.0), dict(fusion_lr_eta_F=-1.0), dict(inner_lr_eta_Rprime=-1e-3),
                dict(epochs_L=0), dict(batch_size=0), dict(dtype="float16"), dict(meta_steps_M=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    d = TrainConfig()
    assert (d.epochs_L, d.meta_steps_M, d.fusion_steps_N, d.batch_size, d.patch_size) == (50, 600, 1622, 4, 128)
    assert d.outer_lr_eta_P == d.fusion_lr_eta_F == d.recon_lr_eta_R == 1e-4


def test_toy_lookahead_step():
    f = torch.tensor(1.0, dtype=torch.float64, requires_grad=True)
    (f_new,) = lookahead([f], f ** 2, 0.1)
    assert float(f_new.detach()) == pytest.approx(0.8, abs=1e-15)


def test_toy_meta_gradient():
    f_new, analytic, numeric = toy_meta_gradient()
    assert f_new == pytest.approx(0.1, abs=1e-15)
    assert abs(analytic - 0.09) <= 1e-6
    assert abs(numeric - 0.09) <= 1e-6


def test_zero_inner_step_is_identity():
    theta_F, theta_R, theta_P = tiny_params(0)
    mtr, _ = tiny_batches(0)
    cfg = TrainConfig(inner_lr_eta_Fprime=0.0, inner_lr_eta_Rprime=0.0, **F64)
    step = inner_update(theta_F, theta_R, theta_P, mtr, cfg)
    assert step.theta_Fp.detach().equal(theta_F) and step.theta_Rp.detach().equal(theta_R)


def test_zero_inner_step_meta_gradient_vanishes():
    theta_F, theta_R, theta_P = tiny_params(0)
    mtr, mts = tiny_batches(0)
    cfg = TrainConfig(inner_lr_eta_Fprime=0.0, inner_lr_eta_Rprime=0.0, **F64)
    p = theta_P.requires_grad_()
    step = inner_update(theta_F, theta_R, p, mtr, cfg)
    grads, _ = meta_gradient(p, step.theta_Fp, step.theta_Rp, mts, cfg)
    assert all(torch.count_nonzero(g) == 0 for g in grads)
    assert abs(meta_gradient_oracle(theta_F, theta_R, theta_P, mtr, mts, cfg, 3)) <= 1e-8


def test_inner_step_matches_plain_gradient():
    theta_F, theta_R, theta_P = tiny_params(1)
    mtr, _ = tiny_batches(1)
    cfg = TrainConfig(inner_lr_eta_Fprime=0.3, inner_lr_eta_Rprime=0.2, **F64)
    step = inner_update(theta_F, theta_R, theta_P.requires_grad_(), mtr, cfg)
    assert step.theta_Fp.flatten().requires_grad
    # theta_R' carries no proposal dependency unless asked for
    assert not step.theta_Rp.flatten().requires_grad
    cfg_r = dataclasses.replace(cfg, include_recon_path=True)
    assert inner_update(theta_F, theta_R, theta_P.requires_grad_(), mtr, cfg_r).theta_Rp.flatten().requires_grad


def test_meta_gradient_needs_retained_dependency():
    theta_F, theta_R, theta_P = tiny_params(0)
    mtr, mts = tiny_batches(0)
    cfg = TrainConfig(inner_lr_eta_Fprime=0.5, **F64)
    step = inner_update(theta_F, theta_R, theta_P.detach(), mtr, cfg)
    with pytest.raises(ContractError):
        meta_gradient(theta_P.requires_grad_(), step.theta_Fp, step.theta_Rp, mts, cfg)
    with pytest.raises(ContractError):
        meta_gradient(theta_P.requires_grad_(), step.theta_Fp, step.theta_Rp, mtr, cfg)


def test_batch_roles_enforced():
    theta_F, theta_R, theta_P = tiny_params(0)
    mtr, mts = tiny_batches(0)
    cfg = TrainConfig(**F64)
    with pytest.raises(ContractError):
        inner_update(theta_F, theta_R, theta_P, mts, cfg)
    state = init_state(cfg, TINY)
    with pytest.raises(ContractError):
        fusion_update(state, mtr, cfg)


def test_meta_gradient_small_step_rate():
    # both modes' meta-gradients shrink linearly as the lookahead step -> 0
    theta_F, theta_R, theta_P = tiny_params(2)
    mtr, mts = tiny_batches(2)
    for first_order in (False, True):
        norms = []
        for eta in (1e-2, 1e-3):
            cfg = TrainConfig(inner_lr_eta_Fprime=eta, first_order_only=first_order, **F64)
            p = theta_P.requires_grad_()
            step = inner_update(theta_F, theta_R, p, mtr, cfg)
            grads, _ = meta_gradient(p, step.theta_Fp, step.theta_Rp, mts, cfg)
            norms.append(float(torch.cat([g.reshape(-1) for g in grads]).norm()))
        assert norms[1] / norms[0] == pytest.approx(0.1, rel=0.05)


def test_outer_update_moves_only_proposal():
    cfg = TrainConfig(inner_lr_eta_Fprime=0.5, outer_lr_eta_P=1e-2, **F64)
    state = init_state(cfg, TINY)
    _, _, theta_P = tiny_params(0)
    state.theta_P = theta_P.requires_grad_()
    state.opt_P = torch.optim.Adam(state.theta_P.values(), lr=1e-2)
    mtr, mts = tiny_batches(0)
    before = [pc.clone() for pc in (state.theta_F, state.theta_R, state.theta_P)]
    step = inner_update(state.theta_F, state.theta_R, state.theta_P, mtr, cfg)
    outer_update(state, step.theta_Fp, step.theta_Rp, mts, cfg)
    assert state.theta_F.detach().equal(before[0]) and state.theta_R.detach().equal(before[1])
    assert not state.theta_P.detach().equal(before[2])
    assert state.history[-1]["stage"] == "outer"


def test_fusion_update_routing_and_frozen_proposal():
    cfg = TrainConfig(fusion_lr_eta_F=1e-3, recon_lr_eta_R=1e-3, **F64)
    state = init_state(cfg, TINY)
    ds = make_synthetic_dataset("multifocus", 2, 16, 0)
    batch = sample_patch_batch(ds, 2, 8, np.random.default_rng(0), dtype=torch.float64)
    p_before = state.theta_P.clone()
    taps = {}
    fusion_update(state, batch, cfg, taps=taps)
    assert taps[("L_r", "F")] == 0.0
    assert taps[("L_f", "P")] == 0.0 and taps[("L_r", "P")] == 0.0
    assert taps[("L_f", "F")] > 0 and taps[("L_r", "R")] > 0
    assert state.theta_P.detach().equal(p_before)


def test_fusion_update_equals_fusion_loss_only_step():
    cfg = TrainConfig(fusion_lr_eta_F=1e-3, **F64)
    ds = make_synthetic_dataset("multifocus", 2, 16, 0)
    batch = sample_patch_batch(ds, 2, 8, np.random.default_rng(0), dtype=torch.float64)
    s1, s2 = init_state(cfg, TINY), init_state(cfg, TINY)
    fusion_update(s1, batch, cfg)
    loss_f, _ = fusion_losses(s2, batch, cfg)
    for p, g in zip(s2.theta_F.values(), torch.autograd.grad(loss_f, s2.theta_F.values())):
        p.grad = g
    s2.opt_F.step()
    assert s1.theta_F.detach().equal(s2.theta_F.detach())


def test_fusion_update_decreases_loss():
    cfg = TrainConfig(fusion_lr_eta_F=1e-4, recon_lr_eta_R=1e-4, **F64)
    state = init_state(cfg, TINY)
    ds = make_synthetic_dataset("multifocus", 2, 16, 0)
    batch = sample_patch_batch(ds, 4, 16, np.random.default_rng(0), dtype=torch.float64)
    losses = []
    for _ in range(21):
        fusion_update(state, batch, cfg)
        losses.append(state.history[-1]["loss_f"])
    rises = sum(b >= a for a, b in zip(losses, losses[1:]))
    assert rises <= 2 and losses[-1] < losses[0]


def test_non_finite_gradient_raises():
    cfg = TrainConfig(**F64)
    state = init_state(cfg, TINY)
    ds = make_synthetic_dataset("multifocus", 1, 8, 0)
    batch = sample_patch_batch(ds, 1, 8, np.random.default_rng(0), dtype=torch.float64)
    bad = batch.images_a.clone()
    bad[0, 0, 0, 0] = float("nan")
    batch = type(batch)(bad, batch.images_b, "fusion_train")
    with pytest.raises(TrainingError):
        fusion_update(state, batch, cfg)


def test_one_of_each_stage():
    ds = make_synthetic_dataset("multifocus", 1, 16, 0)
    cfg = TrainConfig(epochs_L=1, meta_steps_M=1, fusion_steps_N=1, patch_size=8, batch_size=1)
    state = train(ds, cfg, TINY)
    assert stage_counts(state.history) == {"inner": 1, "outer": 1, "fusion": 1}
    assert state.epoch == 1 and state.step == 2


def test_fixed_weights_skips_meta_stages():
    ds = make_synthetic_dataset("multifocus", 4, 16, 0)
    cfg = TrainConfig(epochs_L=2, meta_steps_M=3, fusion_steps_N=2, patch_size=8, batch_size=1, fixed_weights=True)
    state = train(ds, cfg, TINY, holdout=ds)
    assert stage_counts(state.history) == {"fusion": 4, "holdout": 3}


def test_empty_dataset_rejected():
    with pytest.raises(DatasetError):
        train(make_synthetic_dataset("multifocus", 0, 16, 0), TrainConfig(), TINY)


def test_train_deterministic_and_resumable(tmp_path):
    ds = make_synthetic_dataset("multifocus", 4, 16, 0)
    cfg = TrainConfig(epochs_L=2, meta_steps_M=2, fusion_steps_N=2, patch_size=8, batch_size=2,
                      inner_lr_eta_Fprime=1e-2, outer_lr_eta_P=1e-3)
    train(ds, cfg, TINY, holdout=ds, out_dir=tmp_path / "a")
    train(ds, cfg, TINY, holdout=ds, out_dir=tmp_path / "b")
    final = (tmp_path / "a" / "final.ckpt").read_bytes()
    assert final == (tmp_path / "b" / "final.ckpt").read_bytes()
    assert (tmp_path / "a" / "epoch_001.ckpt").exists() and (tmp_path / "a" / "history.csv").exists()
    # resuming from the epoch-1 checkpoint reproduces the final state exactly
    train(ds, cfg, TINY, holdout=ds, out_dir=tmp_path / "c", resume_from=tmp_path / "a" / "epoch_001.ckpt")
    assert (tmp_path / "c" / "final.ckpt").read_bytes() == final


def test_state_roundtrip(tmp_path):
    ds = make_synthetic_dataset("multifocus", 4, 16, 0)
    cfg = TrainConfig(epochs_L=1, meta_steps_M=1, fusion_steps_N=2, patch_size=8, batch_size=2)
    state = train(ds, cfg, TINY)
    save_state(tmp_path / "s.ckpt", state, cfg)
    back, cfg2, _ = load_state(tmp_path / "s.ckpt")
    assert cfg2 == cfg and back.epoch == state.epoch and back.step == state.step
    for a, b in ((back.theta_F, state.theta_F), (back.theta_R, state.theta_R), (back.theta_P, state.theta_P)):
        assert a.detach().equal(b.detach())
    assert same_history(back.history, state.history)
    assert back.rng.integers(0, 2**62) == state.rng.integers(0, 2**62)
    roles = ckpt.load_collections(tmp_path / "s.ckpt")
    assert sorted(roles) == ["F", "P", "R"]
    with pytest.raises(ContractError):
        ckpt.save_params(tmp_path / "p.ckpt", state.theta_F)
        load_state(tmp_path / "p.ckpt")


def test_write_history(tmp_path):
    path = write_history(tmp_path / "h.csv", [{"step": 0, "epoch": 0, "stage": "fusion", "loss_f": 0.5,
                                               "loss_r": float("nan")}])
    lines = path.read_text().splitlines()
    assert lines[0] == "step,epoch,stage,loss_f,loss_r" and lines[1] == "0,0,fusion,0.5,nan"
