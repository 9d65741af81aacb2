"""Finite-difference oracles for the first-order and meta gradients.

Everything here runs in float64 on tiny networks. The analytic side always
comes from the training code itself (``lookahead``/``inner_update`` and
``meta_gradient``); the numerical side only ever calls forward passes.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np
import torch

from recfusion.data import TaskBatch, make_synthetic_dataset, sample_patch_batch
from recfusion.losses import LossConfig, fusion_loss, reconstruction_loss
from recfusion.networks import (
    NetConfig,
    ParameterCollection,
    fusion_forward,
    init_params,
    proposal_forward,
    reconstruction_forward,
)
from recfusion.trainer import TrainConfig, inner_update, lookahead, meta_gradient, meta_gradient_oracle

TINY_NET = NetConfig(base_channels=4, num_blocks=1, attention_heads=1)
FD_STEP = 1e-4
FIRST_ORDER_TOL = 1e-4
SECOND_ORDER_TOL = 1e-3


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """Per-entry |a - n| / max(|a|, |n|, floor).

    The floor keeps entries that are zero on both sides (dead units) from
    dividing by zero; it sits far below any gradient the checks care about.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def central_difference(fn, vec: torch.Tensor, indices, h: float = FD_STEP) -> np.ndarray:
    out = np.empty(len(indices))
    for k, i in enumerate(indices):
        plus, minus = vec.clone(), vec.clone()
        plus[i] += h
        minus[i] -= h
        out[k] = (float(fn(plus)) - float(fn(minus))) / (2 * h)
    return out


def _randomize(pc: ParameterCollection, seed: int, scale: float = 0.3) -> ParameterCollection:
    # the proposal head starts at zero, which would make every upstream
    # meta-gradient entry vanish; a random draw exercises all of them
    gen = torch.Generator().manual_seed(seed)
    return pc.map(lambda t: t + scale * torch.randn(t.shape, generator=gen, dtype=t.dtype))


def tiny_batches(seed: int, size: int = 8, batch: int = 2):
    ds = make_synthetic_dataset("multifocus", 4, 16, seed=seed)
    rng = np.random.default_rng(seed)
    mtr = sample_patch_batch(ds, batch, size, rng, "meta_train", torch.float64)
    mts = sample_patch_batch(ds, batch, size, rng, "meta_test", torch.float64)
    return mtr, mts


def tiny_params(seed: int, net_cfg: NetConfig = TINY_NET):
    theta_F = init_params("F", net_cfg, seed).to(torch.float64)
    theta_R = init_params("R", net_cfg, seed + 1).to(torch.float64)
    theta_P = _randomize(init_params("P", net_cfg, seed + 2).to(torch.float64), seed + 3)
    return theta_F, theta_R, theta_P


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float
    entries: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel err {self.max_rel_err:.3e} "
                f"(tol {self.tolerance:.0e}, {self.entries} entries, {self.seconds:.1f}s)")


def check_fusion_gradient(seed: int = 0, net_cfg: NetConfig = TINY_NET, loss_cfg: LossConfig = LossConfig(),
                          tol: float = FIRST_ORDER_TOL) -> CheckResult:
    """(theta_F - theta_F') / eta from the inner step against central differences of L_f."""
    t0 = time.perf_counter()
    theta_F, _, theta_P = tiny_params(seed, net_cfg)
    batch, _ = tiny_batches(seed)
    a, b = batch.images_a, batch.images_b
    with torch.no_grad():
        maps = proposal_forward(theta_P, a, b)
    eta = 0.5

    theta = theta_F.requires_grad_()
    loss = fusion_loss(a, b, fusion_forward(theta, a, b), maps, loss_cfg)
    stepped = theta.with_values(lookahead(theta.values(), loss, eta))
    analytic = ((theta.detach().flatten() - stepped.detach().flatten()) / eta).numpy()

    base = theta_F.detach().flatten()

    def loss_at(vec):
        with torch.no_grad():
            return fusion_loss(a, b, fusion_forward(theta_F.unflatten(vec), a, b), maps, loss_cfg)

    numeric = central_difference(loss_at, base, range(base.numel()))
    err = relative_error(analytic, numeric)
    return CheckResult("dL_f/dtheta_F", float(err.max()), tol, base.numel(), time.perf_counter() - t0)


def check_reconstruction_gradient(seed: int = 0, net_cfg: NetConfig = TINY_NET,
                                  loss_cfg: LossConfig = LossConfig(), tol: float = FIRST_ORDER_TOL) -> CheckResult:
    t0 = time.perf_counter()
    theta_F, theta_R, _ = tiny_params(seed, net_cfg)
    batch, _ = tiny_batches(seed)
    a, b = batch.images_a, batch.images_b
    with torch.no_grad():
        fused = fusion_forward(theta_F, a, b)
    eta = 0.5

    theta = theta_R.requires_grad_()
    loss = reconstruction_loss(a, b, *reconstruction_forward(theta, fused), loss_cfg)
    stepped = lookahead(theta.values(), loss, eta)
    analytic = ((theta.detach().flatten() - theta.with_values(stepped).detach().flatten()) / eta).numpy()

    base = theta_R.detach().flatten()

    def loss_at(vec):
        with torch.no_grad():
            return reconstruction_loss(a, b, *reconstruction_forward(theta_R.unflatten(vec), fused), loss_cfg)

    numeric = central_difference(loss_at, base, range(base.numel()))
    err = relative_error(analytic, numeric)
    return CheckResult("dL_r/dtheta_R", float(err.max()), tol, base.numel(), time.perf_counter() - t0)


def meta_cfg(first_order_only: bool = False, eta: float = 0.5, include_recon_path: bool = False) -> TrainConfig:
    # a large lookahead step makes the second-order signal well above
    # finite-difference noise; clipping is off so the map stays smooth
    return TrainConfig(inner_lr_eta_Fprime=eta, inner_lr_eta_Rprime=eta, clip_norm=None, dtype="float64",
                       first_order_only=first_order_only, include_recon_path=include_recon_path)


def analytic_meta_gradient(theta_F, theta_R, theta_P, mtr: TaskBatch, mts: TaskBatch, cfg: TrainConfig,
                           loss_cfg: LossConfig = LossConfig()) -> np.ndarray:
    theta_P = theta_P.detach().requires_grad_()
    step = inner_update(theta_F, theta_R, theta_P, mtr, cfg, loss_cfg)
    grads, _ = meta_gradient(theta_P, step.theta_Fp, step.theta_Rp, mts, cfg, loss_cfg)
    return torch.cat([g.reshape(-1) for g in grads]).detach().numpy()


def check_meta_gradient(seed: int = 0, net_cfg: NetConfig = TINY_NET, loss_cfg: LossConfig = LossConfig(),
                        tol: float = SECOND_ORDER_TOL, cfg: TrainConfig | None = None,
                        max_entries: int | None = None) -> CheckResult:
    """Second-order meta-gradient against the end-to-end finite-difference oracle."""
    t0 = time.perf_counter()
    cfg = cfg or meta_cfg()
    theta_F, theta_R, theta_P = tiny_params(seed, net_cfg)
    mtr, mts = tiny_batches(seed)
    analytic = analytic_meta_gradient(theta_F, theta_R, theta_P, mtr, mts, cfg, loss_cfg)
    n = theta_P.numel()
    idx = np.arange(n)
    if max_entries is not None and max_entries < n:
        idx = np.sort(np.random.default_rng(seed).choice(n, max_entries, replace=False))
    numeric = np.array([meta_gradient_oracle(theta_F, theta_R, theta_P, mtr, mts, cfg, int(i), loss_cfg, FD_STEP)
                        for i in idx])
    err = relative_error(analytic[idx], numeric)
    return CheckResult("dL_r(meta-test)/dtheta_P", float(err.max()), tol, len(idx), time.perf_counter() - t0)


def first_order_gap(seed: int = 0, net_cfg: NetConfig = TINY_NET, loss_cfg: LossConfig = LossConfig(),
                    eta: float = 0.5) -> dict:
    """How far the first-order surrogate's meta-gradient is from the full one."""
    theta_F, theta_R, theta_P = tiny_params(seed, net_cfg)
    mtr, mts = tiny_batches(seed)
    full = analytic_meta_gradient(theta_F, theta_R, theta_P, mtr, mts, meta_cfg(False, eta), loss_cfg)
    approx = analytic_meta_gradient(theta_F, theta_R, theta_P, mtr, mts, meta_cfg(True, eta), loss_cfg)
    denom = max(np.linalg.norm(full), 1e-30)
    cos = float(full @ approx / (denom * max(np.linalg.norm(approx), 1e-30)))
    return {"relative_gap": float(np.linalg.norm(full - approx) / denom), "cosine": cos,
            "norm_full": float(np.linalg.norm(full)), "norm_first_order": float(np.linalg.norm(approx))}


# -- the scalar toy -------------------------------------------------------------

def toy_meta_gradient(theta_F: float = 0.0, theta_P: float = 0.0, a: float = 0.0, b: float = 1.0,
                      eta: float = 0.1, target: float = 1.0):
    """Scalar stand-in for the bilevel problem.

    The "fused image" is theta_F itself, w = sigmoid(theta_P) weights the two
    sources in L_f = w (theta_F - a)^2 + (1 - w)(theta_F - b)^2, and the outer
    loss is (theta_F' - target)^2 after one lookahead step. Returns
    ``(theta_F', analytic dLoss/dtheta_P, central-difference estimate)``.
    """
    def outer(p, keep):
        f = torch.tensor(theta_F, dtype=torch.float64, requires_grad=True)
        w = torch.sigmoid(p)
        inner = w * (f - a) ** 2 + (1 - w) * (f - b) ** 2
        (f_new,) = lookahead([f], inner, eta, create_graph=keep)
        return f_new, (f_new - target) ** 2

    p = torch.tensor(theta_P, dtype=torch.float64, requires_grad=True)
    f_new, loss = outer(p, True)
    (grad,) = torch.autograd.grad(loss, p)

    def loss_at(vec):
        return outer(vec[0], False)[1].detach()

    numeric = central_difference(loss_at, torch.tensor([theta_P], dtype=torch.float64), [0])[0]
    return float(f_new.detach()), float(grad), float(numeric)


def run_all(seed: int = 0, net_cfg: NetConfig = TINY_NET, loss_cfg: LossConfig = LossConfig(),
            first_order_tol: float = FIRST_ORDER_TOL, second_order_tol: float = SECOND_ORDER_TOL,
            eta: float = 0.5, include_recon_path: bool = False, max_meta_entries: int | None = None):
    cfg = meta_cfg(False, eta, include_recon_path)
    return [
        check_fusion_gradient(seed, net_cfg, loss_cfg, first_order_tol),
        check_reconstruction_gradient(seed, net_cfg, loss_cfg, first_order_tol),
        check_meta_gradient(seed, net_cfg, loss_cfg, second_order_tol, cfg, max_meta_entries),
    ]


def net_config_for_check(**overrides) -> NetConfig:
    return dataclasses.replace(TINY_NET, **overrides)
