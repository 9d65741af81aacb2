"""Checkpoint archives: a zip of ``.npy`` entries plus a JSON header.

The archive is readable with ``numpy.load`` (it is a valid ``.npz``), but is
written with fixed timestamps and a fixed entry order so identical contents
give identical bytes.
"""

import dataclasses
import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from recfusion import __version__
from recfusion.errors import RoleError
from recfusion.networks import NetConfig, ParameterCollection

HEADER_KEY = "__header__"
FORMAT = "recfusion-ckpt/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def write_archive(path, arrays: dict, header: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": FORMAT, "version": __version__, "framework": f"torch {torch.__version__}", **header}
    payload = dict(arrays)
    payload[HEADER_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in payload.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
    tmp.replace(path)
    return path


def read_archive(path):
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        for name in zf.namelist():
            with zf.open(name) as fh:
                arr = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
            arrays[name[:-4] if name.endswith(".npy") else name] = arr
    raw = arrays.pop(HEADER_KEY, None)
    if raw is None:
        raise ValueError(f"{path} is not a checkpoint archive (missing header)")
    return arrays, json.loads(raw.tobytes().decode())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _tensor_to_array(t: torch.Tensor):
    return t.detach().cpu().numpy()


def params_to_arrays(pc: ParameterCollection, prefix=""):
    return {prefix + name: _tensor_to_array(t) for name, t in pc.items()}


def params_header(pc: ParameterCollection):
    return {
        "role": pc.role,
        "net_config": dataclasses.asdict(pc.cfg),
        "seed": pc.seed,
        "names": pc.names(),
    }


def params_from_arrays(arrays, header, prefix=""):
    entries = [(n, torch.from_numpy(arrays[prefix + n].copy())) for n in header["names"]]
    return ParameterCollection(header["role"], entries, NetConfig(**header["net_config"]), header["seed"])


def save_params(path, pc: ParameterCollection):
    return write_archive(path, params_to_arrays(pc), {"kind": "params", "collections": [params_header(pc)]})


def load_collections(path) -> dict[str, ParameterCollection]:
    """All parameter collections stored in an archive, keyed by role."""
    arrays, header = read_archive(path)
    out = {}
    for h in header.get("collections", []):
        prefix = "" if header.get("kind") == "params" else f"{h['role']}/"
        out[h["role"]] = params_from_arrays(arrays, h, prefix)
    return out


def load_params(path, role: str | None = None) -> ParameterCollection:
    collections = load_collections(path)
    if role is None:
        if len(collections) != 1:
            raise RoleError(f"{path} holds roles {sorted(collections)}; pass role=")
        return next(iter(collections.values()))
    if role not in collections:
        raise RoleError(f"{path} has no role {role} parameters (found {sorted(collections)})")
    return collections[role]
