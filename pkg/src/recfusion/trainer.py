"""Alternating inner / outer / fusion updates.

Per epoch: ``M`` rounds of (inner update on a meta-train batch, outer update of
the proposal network on a meta-test batch), then ``N`` fusion updates of the
fusion and reconstruction networks on the full training set.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from recfusion import checkpoint as ckpt
from recfusion.data import PairDataset, TaskBatch, full_batch, sample_patch_batch, split_meta
from recfusion.errors import ContractError, DatasetError, TrainingError
from recfusion.losses import LossConfig, WeightMaps, fusion_loss, reconstruction_loss
from recfusion.networks import (
    NetConfig,
    ParameterCollection,
    clip_scale,
    fusion_forward,
    global_norm,
    init_params,
    proposal_forward,
    reconstruction_forward,
)

log = logging.getLogger(__name__)

STAGES = ("inner", "outer", "fusion", "holdout")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    epochs_L: int = 50
    meta_steps_M: int = 600
    fusion_steps_N: int = 1622
    inner_lr_eta_Fprime: float = 1e-4
    inner_lr_eta_Rprime: float = 1e-4
    outer_lr_eta_P: float = 1e-4
    fusion_lr_eta_F: float = 1e-4
    recon_lr_eta_R: float = 1e-4
    batch_size: int = 4
    patch_size: int = 128
    seed: int = 0
    first_order_only: bool = False
    # fix W = V = 1/2 and skip the inner/outer stages
    fixed_weights: bool = False
    # also differentiate the reconstruction lookahead w.r.t. the proposal network
    include_recon_path: bool = False
    clip_norm: float | None = 10.0
    dtype: str = "float32"

    def __post_init__(self):
        if min(self.epochs_L, self.batch_size, self.patch_size) < 1:
            raise ValueError("epochs_L, batch_size and patch_size must be positive")
        if min(self.meta_steps_M, self.fusion_steps_N) < 0:
            raise ValueError("step counts must be nonnegative")
        if min(self.outer_lr_eta_P, self.fusion_lr_eta_F, self.recon_lr_eta_R) <= 0:
            raise ValueError("optimizer learning rates must be positive")
        # a zero lookahead step is allowed: it is the limit the meta-gradient vanishes in
        if min(self.inner_lr_eta_Fprime, self.inner_lr_eta_Rprime) < 0:
            raise ValueError("inner step sizes must be nonnegative")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]


@dataclass
class TrainState:
    theta_F: ParameterCollection
    theta_R: ParameterCollection
    theta_P: ParameterCollection
    opt_F: torch.optim.Adam
    opt_R: torch.optim.Adam
    opt_P: torch.optim.Adam
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)

    def record(self, stage, loss_f=math.nan, loss_r=math.nan):
        self.history.append({
            "step": self.step, "epoch": self.epoch, "stage": stage,
            "loss_f": float(loss_f), "loss_r": float(loss_r),
        })


class InnerStep(NamedTuple):
    theta_Fp: ParameterCollection
    theta_Rp: ParameterCollection
    loss_f: torch.Tensor
    loss_r: torch.Tensor


def _adam(pc: ParameterCollection, lr):
    return torch.optim.Adam(pc.values(), lr=lr, foreach=False)


def init_state(cfg: TrainConfig, net_cfg: NetConfig = NetConfig()) -> TrainState:
    dtype = cfg.torch_dtype
    theta_F = init_params("F", net_cfg, cfg.seed).to(dtype).requires_grad_()
    theta_R = init_params("R", dataclasses.replace(net_cfg, ablation="full"), cfg.seed + 1).to(dtype).requires_grad_()
    theta_P = init_params("P", dataclasses.replace(net_cfg, ablation="full"), cfg.seed + 2).to(dtype).requires_grad_()
    return TrainState(
        theta_F, theta_R, theta_P,
        _adam(theta_F, cfg.fusion_lr_eta_F),
        _adam(theta_R, cfg.recon_lr_eta_R),
        _adam(theta_P, cfg.outer_lr_eta_P),
        np.random.default_rng(cfg.seed),
    )


def _check_finite(what, tensors):
    for t in tensors:
        if t is not None and not torch.isfinite(t).all():
            raise TrainingError(f"non-finite values in {what}")


def _require_role(batch: TaskBatch, role):
    if batch.role != role:
        raise ContractError(f"expected a {role} batch, got {batch.role}")


def fixed_maps(like) -> WeightMaps:
    half = torch.full_like(like, 0.5)
    return WeightMaps(half, half, half, half)


def lookahead(params, loss, eta, clip_norm=None, create_graph=False):
    """One plain gradient-descent step ``p - eta * grad``, optionally kept differentiable."""
    grads = torch.autograd.grad(loss, params, create_graph=create_graph)
    _check_finite("lookahead gradient", grads)
    scale = clip_scale(global_norm(grads), clip_norm)
    return [p - eta * scale * g for p, g in zip(params, grads)]


def _leaves(pc: ParameterCollection):
    if all(t.requires_grad for t in pc.values()):
        return pc
    return pc.requires_grad_()


def _tracks(pc: ParameterCollection):
    return any(t.requires_grad for t in pc.values())


def inner_update(theta_F, theta_R, theta_P, batch_mtr: TaskBatch, cfg: TrainConfig,
                 loss_cfg: LossConfig = LossConfig()) -> InnerStep:
    """Interim parameters one SGD step ahead under the currently proposed loss.

    The fusion step stays a differentiable function of ``theta_P`` (unless
    ``first_order_only`` or ``theta_P`` carries no grad), which is what the
    outer update differentiates through.
    """
    _require_role(batch_mtr, "meta_train")
    a, b = batch_mtr.images_a, batch_mtr.images_b
    theta_F, theta_R = _leaves(theta_F), _leaves(theta_R)
    keep_graph = not cfg.first_order_only and _tracks(theta_P)

    maps = proposal_forward(theta_P, a, b)
    if not keep_graph:
        maps = WeightMaps(*(m.detach() for m in maps))
    fused = fusion_forward(theta_F, a, b)
    loss_f = fusion_loss(a, b, fused, maps, loss_cfg)
    new_f = lookahead(theta_F.values(), loss_f, cfg.inner_lr_eta_Fprime, cfg.clip_norm, keep_graph)
    theta_Fp = theta_F.with_values(new_f)

    # the forward values must not depend on whether a graph is kept, or the
    # finite-difference oracle would be differentiating another function
    recon_graph = keep_graph and cfg.include_recon_path
    if cfg.include_recon_path:
        fused_r = fusion_forward(theta_Fp if recon_graph else theta_Fp.detach(), a, b)
        if not recon_graph:
            fused_r = fused_r.detach()
    else:
        fused_r = fused.detach()
    ra, rb = reconstruction_forward(theta_R, fused_r)
    loss_r = reconstruction_loss(a, b, ra, rb, loss_cfg)
    new_r = lookahead(theta_R.values(), loss_r, cfg.inner_lr_eta_Rprime, cfg.clip_norm, recon_graph)
    theta_Rp = theta_R.with_values(new_r)

    if not keep_graph:
        theta_Fp = theta_Fp.detach()
    if not recon_graph:
        theta_Rp = theta_Rp.detach()
    return InnerStep(theta_Fp, theta_Rp, loss_f.detach(), loss_r.detach())


def meta_test_loss(theta_Fp, theta_Rp, batch_mts: TaskBatch, loss_cfg: LossConfig = LossConfig()):
    a, b = batch_mts.images_a, batch_mts.images_b
    ra, rb = reconstruction_forward(theta_Rp, fusion_forward(theta_Fp, a, b))
    return reconstruction_loss(a, b, ra, rb, loss_cfg)


def _first_order_meta_loss(theta_P, theta_Fp, theta_Rp, batch_mts, cfg, loss_cfg):
    # Surrogate without the parameter-space second derivative: the interim
    # fused image takes one pixel-space step along -dL_f/dI_f, with (W, V)
    # proposed for the meta-test pair itself.
    a, b = batch_mts.images_a, batch_mts.images_b
    fused0 = fusion_forward(theta_Fp.detach(), a, b).detach().requires_grad_()
    maps = proposal_forward(theta_P, a, b)
    loss_f = fusion_loss(a, b, fused0, maps, loss_cfg)
    (g_pix,) = torch.autograd.grad(loss_f, fused0, create_graph=True)
    fused = fused0.detach() - cfg.inner_lr_eta_Fprime * g_pix
    ra, rb = reconstruction_forward(theta_Rp.detach(), fused)
    return reconstruction_loss(a, b, ra, rb, loss_cfg)


def meta_gradient(theta_P, theta_Fp, theta_Rp, batch_mts: TaskBatch, cfg: TrainConfig,
                  loss_cfg: LossConfig = LossConfig()):
    """(d L_r(meta-test) / d theta_P as a list of tensors, the meta-test loss)."""
    _require_role(batch_mts, "meta_test")
    if cfg.first_order_only:
        loss = _first_order_meta_loss(theta_P, theta_Fp, theta_Rp, batch_mts, cfg, loss_cfg)
    else:
        loss = meta_test_loss(theta_Fp, theta_Rp, batch_mts, loss_cfg)
    if not loss.requires_grad:
        raise ContractError("meta-test loss has no dependency on the proposal parameters")
    grads = torch.autograd.grad(loss, theta_P.values(), allow_unused=True)
    if all(g is None for g in grads):
        raise ContractError("interim fusion parameters carry no dependency on theta_P; "
                            "run inner_update with theta_P requiring grad")
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(theta_P.values(), grads)]
    _check_finite("meta-gradient", grads)
    return grads, loss.detach()


def _optimizer_step(opt, pc: ParameterCollection, grads, clip_norm):
    scale = clip_scale(global_norm(grads), clip_norm)
    for p, g in zip(pc.values(), grads):
        p.grad = (g * scale).detach()
    opt.step()
    for p in pc.values():
        p.grad = None


def outer_update(state: TrainState, theta_Fp, theta_Rp, batch_mts: TaskBatch, cfg: TrainConfig,
                 loss_cfg: LossConfig = LossConfig()) -> TrainState:
    grads, loss = meta_gradient(state.theta_P, theta_Fp, theta_Rp, batch_mts, cfg, loss_cfg)
    _optimizer_step(state.opt_P, state.theta_P, grads, cfg.clip_norm)
    state.record("outer", loss_r=loss)
    return state


def tap_gradients(losses: dict, groups: dict) -> dict:
    """Gradient norm each loss sends to each parameter group (0.0 when unconnected)."""
    out = {}
    for lname, loss in losses.items():
        for gname, pc in groups.items():
            grads = torch.autograd.grad(loss, pc.values(), allow_unused=True, retain_graph=True)
            out[(lname, gname)] = sum(0.0 if g is None else float(g.norm()) for g in grads)
    return out


def fusion_losses(state: TrainState, batch: TaskBatch, cfg: TrainConfig, loss_cfg: LossConfig = LossConfig()):
    """Fusion loss under frozen proposals and reconstruction loss on the detached fused image."""
    a, b = batch.images_a, batch.images_b
    with torch.no_grad():
        maps = fixed_maps(a) if cfg.fixed_weights else proposal_forward(state.theta_P, a, b)
    fused = fusion_forward(state.theta_F, a, b)
    loss_f = fusion_loss(a, b, fused, maps, loss_cfg)
    # the reconstruction loss must never reach the fusion parameters
    ra, rb = reconstruction_forward(state.theta_R, fused.detach())
    loss_r = reconstruction_loss(a, b, ra, rb, loss_cfg)
    return loss_f, loss_r


def fusion_update(state: TrainState, batch_ftr: TaskBatch, cfg: TrainConfig,
                  loss_cfg: LossConfig = LossConfig(), taps: dict | None = None) -> TrainState:
    _require_role(batch_ftr, "fusion_train")
    loss_f, loss_r = fusion_losses(state, batch_ftr, cfg, loss_cfg)
    if taps is not None:
        taps.update(tap_gradients(
            {"L_f": loss_f, "L_r": loss_r},
            {"F": state.theta_F, "R": state.theta_R, "P": state.theta_P},
        ))
    grads_f = torch.autograd.grad(loss_f, state.theta_F.values())
    grads_r = torch.autograd.grad(loss_r, state.theta_R.values())
    _check_finite("fusion gradient", grads_f)
    _check_finite("reconstruction gradient", grads_r)
    _optimizer_step(state.opt_F, state.theta_F, grads_f, cfg.clip_norm)
    _optimizer_step(state.opt_R, state.theta_R, grads_r, cfg.clip_norm)
    state.record("fusion", loss_f.detach(), loss_r.detach())
    return state


def meta_gradient_oracle(theta_F, theta_R, theta_P, batch_mtr, batch_mts, cfg: TrainConfig,
                         entry_index: int, loss_cfg: LossConfig = LossConfig(), h: float = 1e-4) -> float:
    """Central difference of the meta-test reconstruction loss in one proposal entry.

    Each evaluation reruns the whole inner update from scratch, so nothing
    here shares code paths with the analytic second-order gradient beyond the
    forward passes themselves.
    """
    base = theta_P.detach().flatten()

    def composed(offset):
        vec = base.clone()
        vec[entry_index] += offset
        step = inner_update(theta_F, theta_R, theta_P.unflatten(vec), batch_mtr, cfg, loss_cfg)
        with torch.no_grad():
            loss = meta_test_loss(step.theta_Fp, step.theta_Rp, batch_mts, loss_cfg)
        if not torch.isfinite(loss):
            raise TrainingError("non-finite loss at a perturbed point")
        return float(loss)

    return (composed(h) - composed(-h)) / (2 * h)


# -- evaluation -------------------------------------------------------------

@torch.no_grad()
def evaluate_holdout(state: TrainState, batch: TaskBatch, cfg: TrainConfig, loss_cfg: LossConfig = LossConfig()):
    a, b = batch.images_a, batch.images_b
    maps = fixed_maps(a) if cfg.fixed_weights else proposal_forward(state.theta_P, a, b)
    fused = fusion_forward(state.theta_F, a, b)
    ra, rb = reconstruction_forward(state.theta_R, fused)
    return float(fusion_loss(a, b, fused, maps, loss_cfg)), float(reconstruction_loss(a, b, ra, rb, loss_cfg))


@torch.no_grad()
def focus_agreement(theta_P: ParameterCollection, batch: TaskBatch) -> float:
    """Fraction of pixels where (W_a > 0.5) matches the oracle mask of source a."""
    if batch.oracle_mask is None:
        raise DatasetError("batch has no oracle mask")
    maps = proposal_forward(theta_P, batch.images_a, batch.images_b)
    pred = maps.w_a > 0.5
    return float((pred == (batch.oracle_mask > 0.5)).double().mean())


# -- state persistence --------------------------------------------------------

def _optimizer_arrays(prefix, opt):
    sd = opt.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            arrays[f"{prefix}/{idx}/{key}"] = torch.as_tensor(val).detach().numpy()
    return arrays


def _load_optimizer(opt, prefix, arrays):
    sd = opt.state_dict()
    state = {}
    for idx in range(len(sd["param_groups"][0]["params"])):
        keys = [k for k in arrays if k.startswith(f"{prefix}/{idx}/")]
        if keys:
            state[idx] = {k.rsplit("/", 1)[1]: torch.from_numpy(arrays[k].copy()) for k in keys}
    sd["state"] = state
    opt.load_state_dict(sd)


HISTORY_FIELDS = ("step", "epoch", "stage", "loss_f", "loss_r")


def save_state(path, state: TrainState, cfg: TrainConfig, loss_cfg: LossConfig = LossConfig()):
    arrays = {}
    headers = []
    for pc in (state.theta_F, state.theta_R, state.theta_P):
        arrays.update(ckpt.params_to_arrays(pc, prefix=f"{pc.role}/"))
        headers.append(ckpt.params_header(pc))
    for role, opt in (("F", state.opt_F), ("R", state.opt_R), ("P", state.opt_P)):
        arrays.update(_optimizer_arrays(f"optim/{role}", opt))
    hist = state.history
    arrays["history/step"] = np.array([r["step"] for r in hist], dtype=np.int64)
    arrays["history/epoch"] = np.array([r["epoch"] for r in hist], dtype=np.int64)
    arrays["history/stage"] = np.array([STAGES.index(r["stage"]) for r in hist], dtype=np.int64)
    arrays["history/loss_f"] = np.array([r["loss_f"] for r in hist], dtype=np.float64)
    arrays["history/loss_r"] = np.array([r["loss_r"] for r in hist], dtype=np.float64)
    header = {
        "kind": "train_state",
        "collections": headers,
        "train_config": dataclasses.asdict(cfg),
        "loss_config": dataclasses.asdict(loss_cfg),
        "epoch": state.epoch,
        "step": state.step,
        "rng": state.rng.bit_generator.state,
    }
    return ckpt.write_archive(path, arrays, header)


def load_state(path) -> tuple[TrainState, TrainConfig, LossConfig]:
    arrays, header = ckpt.read_archive(path)
    if header.get("kind") != "train_state":
        raise ContractError(f"{path} is not a training-state checkpoint")
    cfg = TrainConfig(**header["train_config"])
    loss_cfg = LossConfig(**header["loss_config"])
    pcs = {h["role"]: ckpt.params_from_arrays(arrays, h, prefix=f"{h['role']}/").requires_grad_()
           for h in header["collections"]}
    state = TrainState(
        pcs["F"], pcs["R"], pcs["P"],
        _adam(pcs["F"], cfg.fusion_lr_eta_F),
        _adam(pcs["R"], cfg.recon_lr_eta_R),
        _adam(pcs["P"], cfg.outer_lr_eta_P),
        np.random.default_rng(),
        epoch=header["epoch"], step=header["step"],
    )
    state.rng.bit_generator.state = header["rng"]
    for role, opt in (("F", state.opt_F), ("R", state.opt_R), ("P", state.opt_P)):
        _load_optimizer(opt, f"optim/{role}", arrays)
    state.history = [
        {"step": int(s), "epoch": int(e), "stage": STAGES[int(g)], "loss_f": float(lf), "loss_r": float(lr)}
        for s, e, g, lf, lr in zip(arrays["history/step"], arrays["history/epoch"], arrays["history/stage"],
                                   arrays["history/loss_f"], arrays["history/loss_r"])
    ]
    return state, cfg, loss_cfg


def write_history(path, history):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for rec in history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.items()})
    return path


# -- the loop -------------------------------------------------------------------

def _split_seed(seed, epoch):
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train(fusion_train: PairDataset, cfg: TrainConfig, net_cfg: NetConfig = NetConfig(),
          loss_cfg: LossConfig = LossConfig(), *, holdout: PairDataset | None = None,
          out_dir=None, resume_from=None, meta_split=None) -> TrainState:
    """Run the alternating schedule for ``cfg.epochs_L`` epochs.

    The meta-train / meta-test split is redrawn every epoch unless
    ``meta_split`` pins it. With ``out_dir`` a checkpoint is written after
    every epoch (``epoch_XXX.ckpt``) plus ``final.ckpt`` and ``history.csv``.
    """
    if len(fusion_train) == 0:
        raise DatasetError("fusion training set is empty")
    if not cfg.fixed_weights and cfg.meta_steps_M > 0 and meta_split is None and len(fusion_train) < 2:
        # a single pair cannot be split; it then plays both meta roles
        log.warning("one training pair: using it for both meta-train and meta-test")
        meta_split = (fusion_train, fusion_train)
    dtype = cfg.torch_dtype
    if resume_from is not None:
        state, _, _ = load_state(resume_from)
    else:
        state = init_state(cfg, net_cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    hold = full_batch(holdout, "meta_test", dtype) if holdout is not None else None

    if hold is not None and state.epoch == 0 and not any(r["stage"] == "holdout" for r in state.history):
        state.record("holdout", *evaluate_holdout(state, hold, cfg, loss_cfg))

    while state.epoch < cfg.epochs_L:
        if not cfg.fixed_weights and cfg.meta_steps_M > 0:
            mtr, mts = meta_split or split_meta(fusion_train, _split_seed(cfg.seed, state.epoch))
            for _ in range(cfg.meta_steps_M):
                batch = sample_patch_batch(mtr, cfg.batch_size, cfg.patch_size, state.rng, "meta_train", dtype)
                step = inner_update(state.theta_F, state.theta_R, state.theta_P, batch, cfg, loss_cfg)
                state.record("inner", step.loss_f, step.loss_r)
                batch = sample_patch_batch(mts, cfg.batch_size, cfg.patch_size, state.rng, "meta_test", dtype)
                outer_update(state, step.theta_Fp, step.theta_Rp, batch, cfg, loss_cfg)
                state.step += 1
        for _ in range(cfg.fusion_steps_N):
            batch = sample_patch_batch(fusion_train, cfg.batch_size, cfg.patch_size, state.rng, "fusion_train", dtype)
            fusion_update(state, batch, cfg, loss_cfg)
            state.step += 1
        state.epoch += 1
        if hold is not None:
            state.record("holdout", *evaluate_holdout(state, hold, cfg, loss_cfg))
        last = state.history[-1]
        log.info("epoch %d/%d done: L_f=%.5f L_r=%.5f", state.epoch, cfg.epochs_L, last["loss_f"], last["loss_r"])
        if out_dir is not None:
            save_state(out_dir / f"epoch_{state.epoch:03d}.ckpt", state, cfg, loss_cfg)

    if out_dir is not None:
        save_state(out_dir / "final.ckpt", state, cfg, loss_cfg)
        write_history(out_dir / "history.csv", state.history)
    return state
