from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from recfusion.errors import DatasetError

IMAGE_SUFFIXES = {".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff"}

# ITU-R BT.601 luma weights (R, G, B)
LUMA = (0.299, 0.587, 0.114)


def rgb_to_ycbcr(rgb):
    """Full-range YCbCr with chroma offset to 0.5; exact inverse in ycbcr_to_rgb."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = LUMA[0] * r + LUMA[1] * g + LUMA[2] * b
    cb = (b - y) / (2 * (1 - LUMA[2])) + 0.5
    cr = (r - y) / (2 * (1 - LUMA[0])) + 0.5
    return y, np.stack([cb, cr], axis=-1)


def ycbcr_to_rgb(y, chroma):
    cb, cr = chroma[..., 0] - 0.5, chroma[..., 1] - 0.5
    r = y + 2 * (1 - LUMA[0]) * cr
    b = y + 2 * (1 - LUMA[2]) * cb
    g = (y - LUMA[0] * r - LUMA[2] * b) / LUMA[1]
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def read_image(path) -> np.ndarray:
    """Float64 image in [0, 1]: (H, W) for gray, (H, W, 3) RGB for color."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DatasetError(f"unreadable image: {path}")
    if img.dtype == np.uint8:
        out = img.astype(np.float64) / 255.0
    elif img.dtype == np.uint16:
        out = img.astype(np.float64) / 65535.0
    else:
        raise DatasetError(f"unsupported pixel type {img.dtype} in {path}")
    if out.ndim == 3:
        if out.shape[2] == 4:
            out = out[..., :3]
        if out.shape[2] == 1:
            out = out[..., 0]
        else:
            out = out[..., ::-1]  # BGR -> RGB
    return np.ascontiguousarray(out)


def write_image(path, img, bits=8):
    """Write a [0, 1] gray or RGB image as PNG, clipping and rounding to ``bits``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scale, dtype = (255, np.uint8) if bits == 8 else (65535, np.uint16)
    arr = np.round(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * scale).astype(dtype)
    if arr.ndim == 3:
        arr = arr[..., ::-1]
    if not cv2.imwrite(str(path), np.ascontiguousarray(arr)):
        raise OSError(f"could not write {path}")
    return path


def split_luminance(img):
    """(luminance, chroma-or-None)."""
    if img.ndim == 2:
        return img, None
    return rgb_to_ycbcr(img)


@dataclass
class Pair:
    name: str
    a: np.ndarray
    b: np.ndarray
    chroma_a: np.ndarray | None = None
    chroma_b: np.ndarray | None = None
    mask: np.ndarray | None = None

    @property
    def shape(self):
        return self.a.shape


@dataclass
class PairDataset:
    pairs: list[Pair] = field(default_factory=list)

    def __post_init__(self):
        for p in self.pairs:
            if p.a.shape != p.b.shape:
                raise DatasetError(f"pair {p.name}: shapes {p.a.shape} and {p.b.shape} differ")

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i) -> Pair:
        return self.pairs[i]

    def __iter__(self):
        return iter(self.pairs)

    @property
    def names(self):
        return [p.name for p in self.pairs]

    def subset(self, indices) -> PairDataset:
        return PairDataset([self.pairs[i] for i in indices])


def _image_files(directory: Path):
    return {p.name: p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}


def load_pair_dataset(dir_a, dir_b, mask_dir=None) -> PairDataset:
    """Pairs matched by filename, sorted lexicographically."""
    dir_a, dir_b = Path(dir_a), Path(dir_b)
    for d in (dir_a, dir_b):
        if not d.is_dir():
            raise DatasetError(f"not a directory: {d}")
    files_a, files_b = _image_files(dir_a), _image_files(dir_b)
    unmatched = sorted(set(files_a) ^ set(files_b))
    if unmatched:
        raise DatasetError(f"unmatched filenames between {dir_a} and {dir_b}: {unmatched}")
    pairs = []
    for name in sorted(files_a):
        ya, ca = split_luminance(read_image(files_a[name]))
        yb, cb = split_luminance(read_image(files_b[name]))
        if ya.shape != yb.shape:
            raise DatasetError(f"pair {name}: shapes {ya.shape} and {yb.shape} differ")
        mask = None
        if mask_dir is not None and (Path(mask_dir) / name).exists():
            mask = (read_image(Path(mask_dir) / name) > 0.5).astype(np.float64)
        pairs.append(Pair(Path(name).stem, ya, yb, ca, cb, mask))
    return PairDataset(pairs)


def load_pair_root(root) -> PairDataset:
    """``<root>/a``, ``<root>/b`` and optionally ``<root>/mask``."""
    root = Path(root)
    mask_dir = root / "mask"
    return load_pair_dataset(root / "a", root / "b", mask_dir if mask_dir.is_dir() else None)


def save_pair_root(ds: PairDataset, root):
    root = Path(root)
    for p in ds:
        write_image(root / "a" / f"{p.name}.png", p.a)
        write_image(root / "b" / f"{p.name}.png", p.b)
        if p.mask is not None:
            write_image(root / "mask" / f"{p.name}.png", p.mask)
    return root
