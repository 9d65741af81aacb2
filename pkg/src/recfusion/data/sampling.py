from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from recfusion.data.io import PairDataset
from recfusion.errors import DatasetError

BATCH_ROLES = ("fusion_train", "meta_train", "meta_test")


@dataclass(frozen=True)
class TaskBatch:
    images_a: torch.Tensor  # (B, 1, H, W)
    images_b: torch.Tensor
    role: str
    oracle_mask: torch.Tensor | None = None

    def __post_init__(self):
        if self.role not in BATCH_ROLES:
            raise ValueError(f"unknown batch role {self.role!r}")
        if self.images_a.shape != self.images_b.shape:
            raise DatasetError(
                f"batch shapes differ: {tuple(self.images_a.shape)} vs {tuple(self.images_b.shape)}"
            )

    def __len__(self):
        return self.images_a.shape[0]

    def to(self, dtype):
        mask = None if self.oracle_mask is None else self.oracle_mask.to(dtype)
        return TaskBatch(self.images_a.to(dtype), self.images_b.to(dtype), self.role, mask)

    def with_role(self, role):
        return TaskBatch(self.images_a, self.images_b, role, self.oracle_mask)


def split_meta(ds: PairDataset, seed: int):
    """Disjoint 50/50 split; with an odd count the meta-train half gets the extra pair."""
    n = len(ds)
    if n < 2:
        raise DatasetError(f"need at least 2 pairs to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = math.ceil(n / 2)
    return ds.subset(sorted(order[:n_train])), ds.subset(sorted(order[n_train:]))


def _stack(arrays, dtype):
    return torch.from_numpy(np.stack(arrays)[:, None]).to(dtype)


def sample_patch_batch(ds: PairDataset, batch: int, patch: int, rng: np.random.Generator,
                       role: str = "fusion_train", dtype=torch.float32) -> TaskBatch:
    """Pairs drawn with replacement, each cropped with one window shared by both sources."""
    if len(ds) == 0:
        raise DatasetError("cannot sample from an empty dataset")
    picks = rng.integers(0, len(ds), size=batch)
    crops_a, crops_b, masks = [], [], []
    for i in picks:
        p = ds[int(i)]
        h, w = p.shape
        if h < patch or w < patch:
            raise DatasetError(f"pair {p.name} is {h}x{w}, smaller than patch {patch}")
        y = int(rng.integers(0, h - patch + 1))
        x = int(rng.integers(0, w - patch + 1))
        win = (slice(y, y + patch), slice(x, x + patch))
        crops_a.append(p.a[win])
        crops_b.append(p.b[win])
        masks.append(None if p.mask is None else p.mask[win])
    mask = None if any(m is None for m in masks) else _stack(masks, dtype)
    return TaskBatch(_stack(crops_a, dtype), _stack(crops_b, dtype), role, mask)


def full_batch(ds: PairDataset, role: str = "meta_test", dtype=torch.float32) -> TaskBatch:
    """Every pair uncropped (all pairs must share one shape)."""
    shapes = {p.shape for p in ds}
    if len(shapes) != 1:
        raise DatasetError(f"pairs have differing shapes {sorted(shapes)}")
    masks = [p.mask for p in ds]
    mask = None if any(m is None for m in masks) else _stack(masks, dtype)
    return TaskBatch(_stack([p.a for p in ds], dtype), _stack([p.b for p in ds], dtype), role, mask)
