"""Fusion quality metrics: EN, SD, SF, AG, SCD, SSIM and VIF.

Inputs are luminance images in [0, 1]; every metric works on the 8-bit scale
(values multiplied by 255). Only EN additionally quantizes to integer levels.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from recfusion.errors import DimensionError

METRICS = ("EN", "SD", "SF", "AG", "SCD", "SSIM", "VIF")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
VIF_SCALES = 4
VIF_NOISE_VAR = 2.0


def _gray255(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError(f"expected a 2-D luminance image, got shape {img.shape}")
    return img * 255.0


def _same_shape(*imgs):
    if len({np.shape(i) for i in imgs}) != 1:
        raise DimensionError(f"shape mismatch: {[np.shape(i) for i in imgs]}")


def entropy_en(img) -> float:
    levels = np.clip(np.round(_gray255(img)), 0, 255).astype(np.int64).ravel()
    p = np.bincount(levels, minlength=256) / levels.size
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum()) + 0.0


def std_sd(img) -> float:
    x = _gray255(img)
    # shift by one pixel first: same statistic, and a constant image gives exactly 0
    return float(np.std(x - x.flat[0]))


def spatial_frequency_sf(img) -> float:
    """sqrt(RF^2 + CF^2); RF from differences along rows, CF along columns."""
    x = _gray255(img)
    rf2 = np.mean((x[:, 1:] - x[:, :-1]) ** 2)
    cf2 = np.mean((x[1:, :] - x[:-1, :]) ** 2)
    return float(np.sqrt(rf2 + cf2))


def average_gradient_ag(img) -> float:
    x = _gray255(img)
    dx = x[:-1, 1:] - x[:-1, :-1]
    dy = x[1:, :-1] - x[:-1, :-1]
    return float(np.mean(np.sqrt((dx ** 2 + dy ** 2) / 2)))


def _corr(u, v):
    u = u.ravel() - u.mean()
    v = v.ravel() - v.mean()
    den = math.sqrt(float((u * u).sum()) * float((v * v).sum()))
    # zero-variance operand: correlation defined as 0
    return 0.0 if den == 0 else float((u * v).sum()) / den


def scd(ia, ib, ifused) -> float:
    _same_shape(ia, ib, ifused)
    a, b, f = _gray255(ia), _gray255(ib), _gray255(ifused)
    return _corr(f - b, a - b) + _corr(f - a, b - a)


def gaussian_window(size, sigma):
    half = (size - 1) / 2
    y, x = np.mgrid[-half:half + 1, -half:half + 1]
    h = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    return h / h.sum()


def _filter_valid(img, win):
    return convolve2d(img, np.rot90(win, 2), mode="valid")


def ssim(x, y) -> float:
    """Mean SSIM over all full 11x11 Gaussian windows (sigma 1.5), dynamic range 255."""
    _same_shape(x, y)
    x, y = _gray255(x), _gray255(y)
    if min(x.shape) < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    mu_x, mu_y = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mu_x ** 2
    syy = _filter_valid(y * y, win) - mu_y ** 2
    sxy = _filter_valid(x * y, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def fusion_ssim(ia, ib, ifused) -> float:
    return 0.5 * (ssim(ifused, ia) + ssim(ifused, ib))


def _vif_windows():
    return [gaussian_window(2 ** (VIF_SCALES - s + 1) + 1, (2 ** (VIF_SCALES - s + 1) + 1) / 5.0)
            for s in range(1, VIF_SCALES + 1)]


def vif_min_size() -> int:
    """Smallest square side for which every pyramid level still has a valid window."""
    wins = _vif_windows()
    n = 1
    while True:
        side, ok = n, True
        for s, win in enumerate(wins):
            k = win.shape[0]
            if s > 0:
                side = side - k + 1
                side = (side + 1) // 2
            if side - k + 1 < 1:
                ok = False
                break
        if ok:
            return n
        n += 1


def vif(ref, dist) -> float:
    """Pixel-domain multi-scale VIF with a Gaussian channel model."""
    _same_shape(ref, dist)
    ref, dist = _gray255(ref), _gray255(dist)
    if min(ref.shape) < vif_min_size():
        raise DimensionError(f"VIF needs images of at least {vif_min_size()} px per side, got {ref.shape}")
    eps = 1e-10
    num = den = 0.0
    for s, win in enumerate(_vif_windows()):
        if s > 0:
            ref = _filter_valid(ref, win)[::2, ::2]
            dist = _filter_valid(dist, win)[::2, ::2]
        mu1, mu2 = _filter_valid(ref, win), _filter_valid(dist, win)
        s1 = np.maximum(_filter_valid(ref * ref, win) - mu1 ** 2, 0)
        s2 = np.maximum(_filter_valid(dist * dist, win) - mu2 ** 2, 0)
        s12 = _filter_valid(ref * dist, win) - mu1 * mu2

        g = s12 / (s1 + eps)
        sv = s2 - g * s12
        flat_ref = s1 < eps
        g[flat_ref] = 0
        sv[flat_ref] = s2[flat_ref]
        s1[flat_ref] = 0
        flat_dist = s2 < eps
        g[flat_dist] = 0
        sv[flat_dist] = 0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0
        sv = np.maximum(sv, eps)

        num += np.sum(np.log10(1 + g * g * s1 / (sv + VIF_NOISE_VAR)))
        den += np.sum(np.log10(1 + s1 / VIF_NOISE_VAR))
    # both sums vanish only for flat references, where nothing can be lost
    return 1.0 if den == 0 else float(num / den)


def fusion_vif(ia, ib, ifused) -> float:
    return 0.5 * (vif(ia, ifused) + vif(ib, ifused))


_SINGLE = {"EN": entropy_en, "SD": std_sd, "SF": spatial_frequency_sf, "AG": average_gradient_ag}
_PAIRED = {"SCD": scd, "SSIM": fusion_ssim, "VIF": fusion_vif}


def compute_metric(name, ia, ib, ifused) -> float:
    if name in _SINGLE:
        return _SINGLE[name](ifused)
    if name in _PAIRED:
        return _PAIRED[name](ia, ib, ifused)
    raise KeyError(f"unknown metric {name!r}")


@dataclass
class MetricsReport:
    ids: list[str]
    metrics: list[str]
    per_image: list[dict[str, float]] = field(default_factory=list)

    @property
    def means(self) -> dict[str, float]:
        return {m: float(np.mean([row[m] for row in self.per_image])) for m in self.metrics}

    def rows(self):
        yield ["image", *self.metrics]
        for name, row in zip(self.ids, self.per_image):
            yield [name, *(row[m] for m in self.metrics)]
        if self.per_image:
            means = self.means
            yield ["mean", *(means[m] for m in self.metrics)]

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(self.rows())
        return path

    def to_json(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {
            "metrics": self.metrics,
            "images": [{"id": i, **row} for i, row in zip(self.ids, self.per_image)],
            "mean": self.means if self.per_image else {},
        }
        path.write_text(json.dumps(doc, indent=2))
        return path


def evaluate(pairs, fused, metric_set=METRICS) -> MetricsReport:
    """Per-image metrics for fused luminance images against their source pairs.

    ``pairs`` is a PairDataset (or any sequence of objects with name/a/b).
    Metrics are listed in the fixed order EN, SD, SF, AG, SCD, SSIM, VIF whatever order was asked.
    """
    fused = list(fused)
    if len(fused) != len(pairs):
        raise ValueError(f"{len(pairs)} pairs but {len(fused)} fused images")
    unknown = set(metric_set) - set(METRICS)
    if unknown:
        raise KeyError(f"unknown metrics {sorted(unknown)}")
    chosen = [m for m in METRICS if m in set(metric_set)]
    report = MetricsReport([p.name for p in pairs], chosen)
    for p, f in zip(pairs, fused):
        report.per_image.append({m: compute_metric(m, p.a, p.b, f) for m in chosen})
    return report
