from recfusion.data.io import (
    Pair,
    PairDataset,
    load_pair_dataset,
    load_pair_root,
    read_image,
    rgb_to_ycbcr,
    save_pair_root,
    split_luminance,
    write_image,
    ycbcr_to_rgb,
)
from recfusion.data.sampling import BATCH_ROLES, TaskBatch, full_batch, sample_patch_batch, split_meta
from recfusion.data.synth import (
    TASK_KINDS,
    checkerboard,
    gaussian_blur,
    gaussian_kernel1d,
    make_synthetic_dataset,
    random_mask,
    synth_multiexposure,
    synth_multifocus,
    synth_multimodal,
    texture,
)

__all__ = [
    "BATCH_ROLES",
    "Pair",
    "PairDataset",
    "TASK_KINDS",
    "TaskBatch",
    "checkerboard",
    "full_batch",
    "gaussian_blur",
    "gaussian_kernel1d",
    "load_pair_dataset",
    "load_pair_root",
    "make_synthetic_dataset",
    "random_mask",
    "read_image",
    "rgb_to_ycbcr",
    "sample_patch_batch",
    "save_pair_root",
    "split_luminance",
    "split_meta",
    "synth_multiexposure",
    "synth_multifocus",
    "synth_multimodal",
    "texture",
    "write_image",
    "ycbcr_to_rgb",
]
