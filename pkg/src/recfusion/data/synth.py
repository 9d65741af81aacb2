"""Procedural source pairs with known ground truth, standing in for real datasets."""

import math

import numpy as np
from scipy.ndimage import correlate1d

from recfusion.data.io import Pair, PairDataset

TASK_KINDS = ("multifocus", "multiexposure", "multimodal", "medical")


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Sampled Gaussian with radius ceil(3*sigma), renormalized to unit mass."""
    if sigma <= 0:
        raise ValueError(f"blur sigma must be positive, got {sigma}")
    radius = max(math.ceil(3 * sigma), 1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, sigma):
    k = gaussian_kernel1d(sigma)
    out = correlate1d(np.asarray(img, dtype=np.float64), k, axis=0, mode="nearest")
    return correlate1d(out, k, axis=1, mode="nearest")


def _rescale(x, lo=0.05, hi=0.95):
    x = x - x.min()
    span = x.max()
    return lo + (hi - lo) * (x / span if span > 0 else x)


def texture(shape, rng, scales=(0.6, 1.2, 2.5, 5.0)):
    """Multi-octave filtered noise: detail everywhere, so focus is always visible."""
    acc = np.zeros(shape)
    for i, s in enumerate(scales):
        layer = gaussian_blur(rng.standard_normal(shape), s)
        acc += layer / (layer.std() + 1e-12) * (0.8 ** i)
    return _rescale(acc)


def checkerboard(shape, cell):
    yy, xx = np.indices(shape)
    return (((yy // cell) + (xx // cell)) % 2).astype(np.float64)


def random_mask(shape, rng):
    """Balanced binary region map: either a smooth blob field or a random half-plane."""
    if rng.random() < 0.5:
        field = gaussian_blur(rng.standard_normal(shape), max(shape) / 6)
    else:
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.indices(shape, dtype=np.float64)
        field = np.cos(theta) * (xx - shape[1] / 2) + np.sin(theta) * (yy - shape[0] / 2)
    return (field > np.median(field)).astype(np.float64)


def synth_multifocus(sharp, mask, blur_sigma):
    """Source a is in focus where mask == 1, source b where mask == 0."""
    sharp = np.asarray(sharp, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != sharp.shape:
        raise ValueError(f"mask shape {mask.shape} != image shape {sharp.shape}")
    blurred = gaussian_blur(sharp, blur_sigma)
    ia = sharp * mask + blurred * (1 - mask)
    ib = sharp * (1 - mask) + blurred * mask
    return ia, ib, mask


def synth_multiexposure(base, gamma_low, gamma_high):
    """Under- and over-exposed renderings of ``base`` by power-law tone curves."""
    if not gamma_low > 1 or not 0 < gamma_high < 1:
        raise ValueError("need gamma_low > 1 and 0 < gamma_high < 1")
    base = np.clip(np.asarray(base, dtype=np.float64), 0.0, 1.0)
    return base ** gamma_low, base ** gamma_high


def synth_multimodal(base, rng, n_targets=3):
    """'Infrared' source: smooth radiance plus bright targets; 'visible': texture dimmed on targets."""
    h, w = base.shape
    yy, xx = np.indices(base.shape, dtype=np.float64)
    targets = np.zeros(base.shape)
    for _ in range(n_targets):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.05, 0.15) * min(h, w)
        targets = np.maximum(targets, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r)))
    ia = np.clip(0.5 * gaussian_blur(base, 4.0) + 0.5 * targets, 0, 1)
    ib = np.clip(base * (1 - 0.6 * targets), 0, 1)
    return ia, ib


def make_synthetic_dataset(kind, n, size, seed, blur_sigma=2.0):
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}, expected one of {TASK_KINDS}")
    rng = np.random.default_rng(seed)
    shape = (size, size)
    pairs = []
    for i in range(n):
        base = texture(shape, rng)
        name = f"{kind}_{i:04d}"
        if kind == "multifocus":
            ia, ib, mask = synth_multifocus(base, random_mask(shape, rng), blur_sigma)
            pairs.append(Pair(name, ia, ib, mask=mask))
        elif kind == "multiexposure":
            ia, ib = synth_multiexposure(base, rng.uniform(1.8, 3.0), rng.uniform(0.3, 0.55))
            pairs.append(Pair(name, ia, ib))
        else:
            # medical pairs reuse the structural/functional split of the multimodal generator
            ia, ib = synth_multimodal(base, rng)
            pairs.append(Pair(name, ia, ib))
    return PairDataset(pairs)
