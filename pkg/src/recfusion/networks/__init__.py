"""Functional forward passes over explicit parameter collections.

Modules are only used as templates: parameters always come from the
``ParameterCollection`` argument, so interim parameters (one gradient step
ahead) can be evaluated next to the originals without mutating either.
"""

import threading

import torch
from torch.func import functional_call

from recfusion.errors import DimensionError, RoleError
from recfusion.losses import GradientField, WeightMaps, sobel_gradient
from recfusion.networks.models import build, count_parameters
from recfusion.networks.params import (
    ABLATIONS,
    ROLES,
    NetConfig,
    ParameterCollection,
    clip_scale,
    global_norm,
)

__all__ = [
    "ABLATIONS",
    "ROLES",
    "NetConfig",
    "ParameterCollection",
    "build",
    "clip_scale",
    "count_parameters",
    "decision_fusion_forward",
    "decision_weights",
    "fusion_forward",
    "global_norm",
    "init_params",
    "proposal_forward",
    "proposal_inputs",
    "reconstruction_forward",
]

# functional_call swaps tensors into the template module while it runs, so
# each thread gets its own templates.
_local = threading.local()


def _template(role, cfg):
    cache = getattr(_local, "templates", None)
    if cache is None:
        cache = _local.templates = {}
    key = (role, cfg)
    if key not in cache:
        cache[key] = build(role, cfg)
    return cache[key]


def init_params(role: str, cfg: NetConfig = NetConfig(), seed: int = 0) -> ParameterCollection:
    """Deterministic initialization; the proposal head starts at zero (uniform maps)."""
    cfg.validate_for(role)
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        module = build(role, cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    entries = [(name, p.detach().clone()) for name, p in module.named_parameters()]
    return ParameterCollection(role, entries, cfg, seed)


def _check_role(theta, role):
    if not isinstance(theta, ParameterCollection):
        raise TypeError(f"expected a ParameterCollection, got {type(theta).__name__}")
    if theta.role != role:
        raise RoleError(f"expected role {role} parameters, got role {theta.role}")


def _as_nchw(x):
    """(H,W) -> (1,1,H,W); (B,H,W) -> (B,1,H,W); (B,1,H,W) unchanged."""
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    if x.dim() == 4 and x.shape[1] == 1:
        return x
    raise DimensionError(f"expected a single-channel image or batch, got shape {tuple(x.shape)}")


def _restore(y, like):
    return y.reshape(like.shape)


def _pair(ia, ib):
    if ia.shape != ib.shape:
        raise DimensionError(f"source shapes differ: {tuple(ia.shape)} vs {tuple(ib.shape)}")
    return _as_nchw(ia), _as_nchw(ib)


def fusion_forward(theta_f: ParameterCollection, ia, ib, cfg: NetConfig | None = None):
    """Fused image in [0, 1], same shape as the sources."""
    _check_role(theta_f, "F")
    cfg = cfg or theta_f.cfg
    if cfg != theta_f.cfg:
        raise RoleError("NetConfig does not match the one the parameters were built for")
    if cfg.ablation == "decision_level":
        return decision_fusion_forward(theta_f, ia, ib)
    a, b = _pair(ia, ib)
    out = functional_call(_template("F", cfg), theta_f.as_dict(), (a, b))
    return _restore(torch.sigmoid(out), ia)


def decision_weights(theta_f: ParameterCollection, ia, ib):
    """Per-pixel (w_a, w_b) from a two-way softmax over the decoder logits."""
    _check_role(theta_f, "F")
    if theta_f.cfg.ablation != "decision_level":
        raise RoleError("decision weights need a decision_level fusion network")
    a, b = _pair(ia, ib)
    logits = functional_call(_template("F", theta_f.cfg), theta_f.as_dict(), (a, b))
    w = torch.softmax(logits, dim=1)
    return _restore(w[:, 0:1], ia), _restore(w[:, 1:2], ia)


def decision_fusion_forward(theta_f: ParameterCollection, ia, ib):
    w_a, w_b = decision_weights(theta_f, ia, ib)
    return w_a * ia + w_b * ib


def reconstruction_forward(theta_r: ParameterCollection, ifused):
    _check_role(theta_r, "R")
    x = _as_nchw(ifused)
    ra, rb = functional_call(_template("R", theta_r.cfg), theta_r.as_dict(), (x,))
    return _restore(torch.sigmoid(ra), ifused), _restore(torch.sigmoid(rb), ifused)


def proposal_inputs(ia, ib, ga: GradientField, gb: GradientField):
    a, b = _pair(ia, ib)
    mag_a = _as_nchw(ga.gx.abs() + ga.gy.abs())
    mag_b = _as_nchw(gb.gx.abs() + gb.gy.abs())
    if mag_a.shape != a.shape or mag_b.shape != a.shape:
        raise DimensionError("gradient fields must match the source images")
    return torch.cat([a, b, mag_a, mag_b], dim=1)


def proposal_logits(theta_p: ParameterCollection, ia, ib, ga=None, gb=None):
    _check_role(theta_p, "P")
    ga = ga if ga is not None else sobel_gradient(ia)
    gb = gb if gb is not None else sobel_gradient(ib)
    x = proposal_inputs(ia, ib, ga, gb)
    return functional_call(_template("P", theta_p.cfg), theta_p.as_dict(), (x,))


# Bound on the pairwise logit difference: sigmoid(16) still rounds below 1 in
# float32, so every map stays strictly inside (0, 1) whatever the parameters.
LOGIT_BOUND = 16.0


def _pair_softmax(l0, l1):
    # two-way softmax of (l0, l1) is sigmoid(l0 - l1); squashing the difference
    # keeps shift invariance while ruling out saturation to exactly 0 or 1
    d = LOGIT_BOUND * torch.tanh((l0 - l1) / LOGIT_BOUND)
    return torch.sigmoid(d), torch.sigmoid(-d)


def maps_from_logits(logits, like) -> WeightMaps:
    w_a, w_b = _pair_softmax(logits[:, 0:1], logits[:, 1:2])
    v_a, v_b = _pair_softmax(logits[:, 2:3], logits[:, 3:4])
    return WeightMaps(*(_restore(t, like) for t in (w_a, w_b, v_a, v_b)))


def proposal_forward(theta_p: ParameterCollection, ia, ib, ga=None, gb=None) -> WeightMaps:
    """Weight maps whose pairs sum to one by construction.

    ``ga``/``gb`` default to the Sobel responses of the sources.
    """
    return maps_from_logits(proposal_logits(theta_p, ia, ib, ga, gb), ia)
