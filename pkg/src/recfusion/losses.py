"""Sobel operator, learnable weighted fusion loss and max-reconstruction loss.

All functions act on the last two axes of their inputs (H, W); any leading
axes (batch, channel) are averaged, so a color image contributes the mean of
its per-channel losses.
"""

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F

from recfusion.errors import ConstraintError, DimensionError

SOBEL_X = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))
SOBEL_Y = ((-1.0, -2.0, -1.0), (0.0, 0.0, 0.0), (1.0, 2.0, 1.0))

WEIGHT_TOL = 1e-6


@dataclass(frozen=True)
class LossConfig:
    alpha1: float = 1.0  # gradient term weight in the fusion loss
    alpha2: float = 1.0  # gradient term weight in the reconstruction loss

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("loss weights must be nonnegative")


class GradientField(NamedTuple):
    gx: torch.Tensor
    gy: torch.Tensor


class WeightMaps(NamedTuple):
    w_a: torch.Tensor
    w_b: torch.Tensor
    v_a: torch.Tensor
    v_b: torch.Tensor


def sobel_gradient(img: torch.Tensor) -> GradientField:
    """Horizontal and vertical Sobel responses with replicate padding.

    Output has the same shape as ``img``. Differentiable to any order.
    """
    if img.dim() < 2:
        raise DimensionError(f"expected at least 2 dims, got shape {tuple(img.shape)}")
    h, w = img.shape[-2:]
    if h < 3 or w < 3:
        raise DimensionError(f"image must be at least 3x3, got {h}x{w}")
    lead = img.shape[:-2]
    x = img.reshape(-1, 1, h, w)
    x = F.pad(x, (1, 1, 1, 1), mode="replicate")
    kernel = torch.tensor((SOBEL_X, SOBEL_Y), dtype=img.dtype, device=img.device)
    # conv2d is cross-correlation, which is what the kernel layout above assumes
    out = F.conv2d(x, kernel.unsqueeze(1))
    gx = out[:, 0].reshape(*lead, h, w)
    gy = out[:, 1].reshape(*lead, h, w)
    return GradientField(gx, gy)


def gradient_magnitude_l1(img: torch.Tensor) -> torch.Tensor:
    g = sobel_gradient(img)
    return g.gx.abs() + g.gy.abs()


def _check_same_shape(*tensors):
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise DimensionError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def check_weight_maps(w: WeightMaps, tol: float = WEIGHT_TOL):
    with torch.no_grad():
        err_w = (w.w_a + w.w_b - 1).abs().max().item()
        err_v = (w.v_a + w.v_b - 1).abs().max().item()
    if err_w > tol or err_v > tol:
        raise ConstraintError(
            f"weight maps must sum to one pairwise (max violation W={err_w:.3g}, V={err_v:.3g})"
        )


def _spatial_mean(x: torch.Tensor) -> torch.Tensor:
    # 1/(HW) sum over pixels, then average over batch and channel axes
    return x.mean()


def fusion_loss(ia, ib, ifused, w: WeightMaps, cfg: LossConfig = LossConfig()):
    """Per-pixel weighted intensity + gradient distance of the fused image to both sources.

    The weight maps broadcast against the images, so a (B,1,H,W) map can weight
    a (B,C,H,W) color batch.
    """
    _check_same_shape(ia, ib, ifused)
    check_weight_maps(w)
    intensity = w.w_a * (ia - ifused) ** 2 + w.w_b * (ib - ifused) ** 2
    loss = _spatial_mean(intensity)
    if cfg.alpha1 == 0:
        return loss
    ga, gb, gf = sobel_gradient(ia), sobel_gradient(ib), sobel_gradient(ifused)
    grad = (
        w.v_a * ((ga.gx - gf.gx) ** 2 + (ga.gy - gf.gy) ** 2)
        + w.v_b * ((gb.gx - gf.gx) ** 2 + (gb.gy - gf.gy) ** 2)
    )
    return loss + cfg.alpha1 * _spatial_mean(grad)


def _pixel_max(ea, eb):
    # ties resolve to the first branch, both for the value and the subgradient
    return torch.where(ea >= eb, ea, eb)


def reconstruction_loss(ia, ib, ra, rb, cfg: LossConfig = LossConfig()):
    """Pixel-wise worst-branch squared error on intensities and Sobel responses."""
    _check_same_shape(ia, ib, ra, rb)
    loss = _spatial_mean(_pixel_max((ia - ra) ** 2, (ib - rb) ** 2))
    if cfg.alpha2 == 0:
        return loss
    ga, gb = sobel_gradient(ia), sobel_gradient(ib)
    gra, grb = sobel_gradient(ra), sobel_gradient(rb)
    err_a = (ga.gx - gra.gx) ** 2 + (ga.gy - gra.gy) ** 2
    err_b = (gb.gx - grb.gx) ** 2 + (gb.gy - grb.gy) ** 2
    return loss + cfg.alpha2 * _spatial_mean(_pixel_max(err_a, err_b))
