import numpy as np
import pytest
import torch

from recfusion import checkpoint as ckpt
from recfusion.errors import RoleError
from recfusion.networks import NetConfig, ParameterCollection, clip_scale, global_norm, init_params

from conftest import TINY


def test_names_unique_and_ordered():
    pc = init_params("F", TINY, 0)
    assert len(set(pc.names())) == len(pc.names())
    assert pc.names() == init_params("F", TINY, 1).names()


def test_arithmetic_is_elementwise_and_pure():
    a = init_params("R", TINY, 0)
    b = init_params("R", TINY, 1)
    a0 = a.clone()
    c = a - 0.5 * b
    for k in a:
        torch.testing.assert_close(c[k], a[k] - 0.5 * b[k])
    assert a.equal(a0)
    torch.testing.assert_close((a + b)[a.names()[0]], a[a.names()[0]] + b[b.names()[0]])
    assert (2 * a).equal(a * 2)


def test_clone_is_deep():
    a = init_params("P", TINY, 0)
    b = a.clone()
    b[b.names()[0]].add_(1.0)
    assert not a.equal(b)


def test_flatten_roundtrip_and_locate():
    pc = init_params("F", TINY, 0)
    flat = pc.flatten()
    assert flat.numel() == pc.numel()
    assert pc.unflatten(flat).equal(pc)
    name, idx = pc.locate(pc[pc.names()[0]].numel() + 1)
    assert name == pc.names()[1]
    assert float(pc[name][idx]) == float(flat[pc[pc.names()[0]].numel() + 1])
    with pytest.raises(IndexError):
        pc.locate(pc.numel())
    with pytest.raises(ValueError):
        pc.unflatten(flat[:-1])


def test_layout_mismatch_and_bad_role():
    with pytest.raises(RoleError):
        init_params("F", TINY, 0) + init_params("R", TINY, 0)
    with pytest.raises(RoleError):
        ParameterCollection("X", [], TINY)


def test_requires_grad_gives_fresh_leaves():
    pc = init_params("R", TINY, 0)
    leaves = pc.requires_grad_()
    assert all(t.is_leaf and t.requires_grad for t in leaves.values())
    assert not any(t.requires_grad for t in pc.values())


def test_clip_scale():
    g = [torch.tensor([3.0, 4.0])]
    assert float(global_norm(g)) == 5.0
    assert float(clip_scale(global_norm(g), 10.0)) == 1.0
    assert float(clip_scale(global_norm(g), 1.0)) == pytest.approx(0.2, rel=1e-6)
    assert clip_scale(global_norm(g), None) == 1.0


@pytest.mark.parametrize("role", ["F", "R", "P"])
@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_checkpoint_roundtrip_bit_exact(tmp_path, role, dtype):
    pc = init_params(role, TINY, 3).to(dtype)
    path = ckpt.save_params(tmp_path / "p.ckpt", pc)
    back = ckpt.load_params(path)
    assert back.equal(pc) and back.cfg == pc.cfg and back.seed == 3 and back.dtype == dtype
    assert ckpt.load_params(path, role).equal(pc)
    with pytest.raises(RoleError):
        ckpt.load_params(path, "F" if role != "F" else "R")


def test_checkpoint_bytes_deterministic(tmp_path):
    pc = init_params("F", NetConfig(ablation="no_gating"), 5)
    ckpt.save_params(tmp_path / "a.ckpt", pc)
    ckpt.save_params(tmp_path / "b.ckpt", pc)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert ckpt.file_digest(tmp_path / "a.ckpt") == ckpt.file_digest(tmp_path / "b.ckpt")


def test_archive_header_and_arrays(tmp_path):
    arrays = {"x": np.arange(6, dtype=np.int64).reshape(2, 3), "y/z": np.ones(2)}
    ckpt.write_archive(tmp_path / "a.ckpt", arrays, {"kind": "demo", "n": 1})
    back, header = ckpt.read_archive(tmp_path / "a.ckpt")
    assert header["kind"] == "demo" and "framework" in header
    np.testing.assert_array_equal(back["x"], arrays["x"])
    np.testing.assert_array_equal(back["y/z"], arrays["y/z"])
