import cv2
import numpy as np
import pytest
import torch

from recfusion.data import (
    PairDataset,
    TaskBatch,
    full_batch,
    gaussian_blur,
    gaussian_kernel1d,
    load_pair_dataset,
    load_pair_root,
    make_synthetic_dataset,
    random_mask,
    read_image,
    rgb_to_ycbcr,
    sample_patch_batch,
    save_pair_root,
    split_meta,
    synth_multiexposure,
    synth_multifocus,
    texture,
    write_image,
    ycbcr_to_rgb,
)
from recfusion.data.io import Pair
from recfusion.errors import DatasetError


def small_ds(n, size=16, seed=0):
    return make_synthetic_dataset("multifocus", n, size, seed)


def test_pair_dataset_sorted_and_matched(tmp_path, rng):
    for name in ("c.png", "a.png", "b.png"):
        for side in "ab":
            write_image(tmp_path / side / name, rng.random((6, 5)))
    ds = load_pair_dataset(tmp_path / "a", tmp_path / "b")
    assert ds.names == ["a", "b", "c"]
    assert all(p.a.shape == (6, 5) for p in ds)


def test_unmatched_and_mismatched_pairs(tmp_path, rng):
    write_image(tmp_path / "a" / "x.png", rng.random((4, 4)))
    write_image(tmp_path / "b" / "y.png", rng.random((4, 4)))
    with pytest.raises(DatasetError, match="unmatched"):
        load_pair_dataset(tmp_path / "a", tmp_path / "b")
    (tmp_path / "b" / "y.png").unlink()
    write_image(tmp_path / "b" / "x.png", rng.random((4, 5)))
    with pytest.raises(DatasetError, match="differ"):
        load_pair_dataset(tmp_path / "a", tmp_path / "b")
    with pytest.raises(DatasetError, match="not a directory"):
        load_pair_dataset(tmp_path / "nope", tmp_path / "b")


def test_unreadable_file(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    (tmp_path / "a" / "x.png").write_bytes(b"not a png")
    (tmp_path / "b" / "x.png").write_bytes(b"not a png")
    with pytest.raises((DatasetError, OSError)):
        load_pair_dataset(tmp_path / "a", tmp_path / "b")


def test_eight_and_sixteen_bit_scaling(tmp_path):
    cv2.imwrite(str(tmp_path / "8.png"), np.array([[0, 255]], dtype=np.uint8))
    cv2.imwrite(str(tmp_path / "16.png"), np.array([[0, 65535]], dtype=np.uint16))
    assert read_image(tmp_path / "8.png").tolist() == [[0.0, 1.0]]
    assert read_image(tmp_path / "16.png").tolist() == [[0.0, 1.0]]


def test_sixteen_bit_roundtrip(tmp_path, rng):
    img = rng.random((5, 7))
    write_image(tmp_path / "x.png", img, bits=16)
    np.testing.assert_allclose(read_image(tmp_path / "x.png"), img, atol=0.5 / 65535 + 1e-12)


def test_gray_color_luminance_equals_channel(tmp_path, rng):
    gray = rng.random((6, 6))
    write_image(tmp_path / "a" / "g.png", np.stack([gray] * 3, axis=-1))
    write_image(tmp_path / "b" / "g.png", gray)
    p = load_pair_dataset(tmp_path / "a", tmp_path / "b")[0]
    np.testing.assert_allclose(p.a, p.b, atol=1e-6)
    assert p.chroma_a.shape == (6, 6, 2) and p.chroma_b is None
    np.testing.assert_allclose(p.chroma_a, 0.5, atol=1e-6)


def test_ycbcr_roundtrip(rng):
    rgb = rng.random((5, 4, 3))
    y, chroma = rgb_to_ycbcr(rgb)
    np.testing.assert_allclose(y, rgb @ np.array([0.299, 0.587, 0.114]), atol=1e-12)
    np.testing.assert_allclose(ycbcr_to_rgb(y, chroma), rgb, atol=1e-12)


def test_pair_root_roundtrip(tmp_path):
    ds = small_ds(3)
    save_pair_root(ds, tmp_path)
    back = load_pair_root(tmp_path)
    assert back.names == ds.names
    for p, q in zip(ds, back):
        np.testing.assert_allclose(q.a, p.a, atol=0.5 / 255 + 1e-12)
        np.testing.assert_array_equal(q.mask, p.mask)


def test_split_meta_partition():
    ds = small_ds(4)
    mtr, mts = split_meta(ds, 0)
    assert len(mtr) == len(mts) == 2
    assert set(mtr.names).isdisjoint(mts.names) and set(mtr.names) | set(mts.names) == set(ds.names)
    again = split_meta(ds, 0)
    assert again[0].names == mtr.names and again[1].names == mts.names
    assert tuple(map(len, split_meta(small_ds(5), 3))) == (3, 2)
    with pytest.raises(DatasetError):
        split_meta(small_ds(1), 0)


@pytest.mark.parametrize("n,seed", [(2, 0), (7, 1), (10, 99)])
def test_split_meta_disjoint_exhaustive(n, seed):
    ds = small_ds(n)
    mtr, mts = split_meta(ds, seed)
    assert sorted(mtr.names + mts.names) == ds.names


def test_patch_sampling():
    ds = small_ds(3, size=32)
    b = sample_patch_batch(ds, 4, 32, np.random.default_rng(0))
    assert b.images_a.shape == (4, 1, 32, 32) and b.role == "fusion_train"
    # full-size crops are the images themselves
    for k in range(4):
        assert any(np.array_equal(b.images_a[k, 0].numpy(), p.a.astype(np.float32)) for p in ds)
    b1 = sample_patch_batch(ds, 4, 8, np.random.default_rng(5), "meta_train")
    b2 = sample_patch_batch(ds, 4, 8, np.random.default_rng(5), "meta_train")
    assert torch.equal(b1.images_a, b2.images_a) and torch.equal(b1.oracle_mask, b2.oracle_mask)
    with pytest.raises(DatasetError):
        sample_patch_batch(ds, 1, 33, np.random.default_rng(0))


def test_patch_crops_share_window():
    ds = small_ds(1, size=20)
    p = ds[0]
    b = sample_patch_batch(ds, 6, 7, np.random.default_rng(2), dtype=torch.float64)
    for k in range(6):
        crop_a = b.images_a[k, 0].numpy()
        hits = [(y, x) for y in range(14) for x in range(14) if np.array_equal(p.a[y:y + 7, x:x + 7], crop_a)]
        assert hits
        y, x = hits[0]
        np.testing.assert_array_equal(b.images_b[k, 0].numpy(), p.b[y:y + 7, x:x + 7])


def test_default_training_batch_shape():
    ds = make_synthetic_dataset("multiexposure", 2, 128, 0)
    assert sample_patch_batch(ds, 4, 128, np.random.default_rng(0)).images_a.shape == (4, 1, 128, 128)


def test_task_batch_checks():
    x = torch.zeros(2, 1, 4, 4)
    with pytest.raises(ValueError):
        TaskBatch(x, x, "validation")
    with pytest.raises(DatasetError):
        TaskBatch(x, torch.zeros(2, 1, 4, 5), "meta_test")
    assert full_batch(small_ds(2)).role == "meta_test"
    with pytest.raises(DatasetError):
        full_batch(PairDataset([Pair("x", np.zeros((4, 4)), np.zeros((4, 4))),
                                Pair("y", np.zeros((5, 5)), np.zeros((5, 5)))]))


def test_gaussian_kernel():
    k = gaussian_kernel1d(2.0)
    assert k.size == 13 and k.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(k, k[::-1])
    with pytest.raises(ValueError):
        gaussian_kernel1d(0.0)


def test_multifocus_construction(rng):
    sharp = texture((16, 16), rng)
    ia, ib, _ = synth_multifocus(sharp, np.ones((16, 16)), 2.0)
    np.testing.assert_array_equal(ia, sharp)
    np.testing.assert_allclose(ib, gaussian_blur(sharp, 2.0))
    mask = random_mask((16, 16), rng)
    a1, b1, _ = synth_multifocus(sharp, mask, 1.5)
    a2, b2, _ = synth_multifocus(sharp, 1 - mask, 1.5)
    np.testing.assert_array_equal(a1, b2)
    np.testing.assert_array_equal(b1, a2)
    a, b, _ = synth_multifocus(sharp, mask, 1e-3)
    assert np.abs(a - sharp).max() <= 1e-3 and np.abs(b - sharp).max() <= 1e-3
    with pytest.raises(ValueError):
        synth_multifocus(sharp, mask, 0.0)
    with pytest.raises(ValueError):
        synth_multifocus(sharp, mask[:-1], 1.0)


def test_multiexposure(rng):
    ia, ib = synth_multiexposure(np.full((3, 3), 0.5), 2.0, 0.5)
    np.testing.assert_allclose(ia, 0.25)
    base = rng.random((8, 8))
    ia, ib = synth_multiexposure(base, 1 + 1e-9, 1 - 1e-9)
    np.testing.assert_allclose(ia, base, atol=1e-8)
    np.testing.assert_allclose(ib, base, atol=1e-8)
    for gl, gh in ((1.0, 0.5), (2.0, 1.0), (2.0, 0.0)):
        with pytest.raises(ValueError):
            synth_multiexposure(base, gl, gh)


@pytest.mark.parametrize("kind", ["multifocus", "multiexposure", "multimodal", "medical"])
def test_synthetic_datasets_valid_and_deterministic(kind):
    ds1 = make_synthetic_dataset(kind, 3, 24, 7)
    ds2 = make_synthetic_dataset(kind, 3, 24, 7)
    for p, q in zip(ds1, ds2):
        np.testing.assert_array_equal(p.a, q.a)
        np.testing.assert_array_equal(p.b, q.b)
        for img in (p.a, p.b):
            assert img.shape == (24, 24) and np.isfinite(img).all()
            assert img.min() >= 0 and img.max() <= 1
    assert (ds1[0].mask is not None) == (kind == "multifocus")
    with pytest.raises(ValueError):
        make_synthetic_dataset("thermal", 1, 8, 0)


def test_random_mask_is_balanced(rng):
    for _ in range(10):
        m = random_mask((20, 20), rng)
        assert set(np.unique(m)) <= {0.0, 1.0}
        assert abs(m.mean() - 0.5) <= 0.1
