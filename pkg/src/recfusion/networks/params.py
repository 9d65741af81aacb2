from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterator

import torch

from recfusion.errors import RoleError

ROLES = ("F", "R", "P")
ABLATIONS = ("full", "concat_afm", "no_interaction", "no_gating", "decision_level")


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 16
    num_blocks: int = 2
    attention_heads: int = 2
    ablation: str = "full"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}, expected one of {ABLATIONS}")
        if min(self.base_channels, self.num_blocks, self.attention_heads) < 1:
            raise ValueError("base_channels, num_blocks and attention_heads must be positive")
        if self.base_channels % self.attention_heads:
            raise ValueError("base_channels must be divisible by attention_heads")

    def validate_for(self, role: str):
        if role not in ROLES:
            raise RoleError(f"unknown role {role!r}")
        if self.ablation == "decision_level" and role != "F":
            raise RoleError("decision_level ablation only applies to the fusion module")


class ParameterCollection:
    """Named, ordered parameter arrays of one network.

    Treated as a value: arithmetic and conversions return new collections and
    never touch the tensors of the operands.
    """

    def __init__(self, role: str, entries, cfg: NetConfig, seed: int | None = None):
        if role not in ROLES:
            raise RoleError(f"unknown role {role!r}")
        self.role = role
        self.cfg = cfg
        self.seed = seed
        self._entries = OrderedDict(entries)

    # mapping-ish access
    def __getitem__(self, name: str) -> torch.Tensor:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def values(self):
        return list(self._entries.values())

    def items(self):
        return self._entries.items()

    def as_dict(self) -> dict[str, torch.Tensor]:
        return dict(self._entries)

    def numel(self) -> int:
        return sum(t.numel() for t in self._entries.values())

    @property
    def dtype(self):
        return next(iter(self._entries.values())).dtype

    def __repr__(self):
        return f"ParameterCollection(role={self.role!r}, entries={len(self)}, numel={self.numel()})"

    # functional transforms
    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> ParameterCollection:
        return ParameterCollection(
            self.role, ((k, fn(v)) for k, v in self._entries.items()), self.cfg, self.seed
        )

    def zip_map(self, other: ParameterCollection, fn) -> ParameterCollection:
        if other.names() != self.names():
            raise RoleError("parameter collections have different layouts")
        return ParameterCollection(
            self.role, ((k, fn(v, other[k])) for k, v in self._entries.items()), self.cfg, self.seed
        )

    def with_values(self, values) -> ParameterCollection:
        values = list(values)
        if len(values) != len(self):
            raise ValueError(f"expected {len(self)} tensors, got {len(values)}")
        return ParameterCollection(self.role, zip(self.names(), values), self.cfg, self.seed)

    def clone(self):
        return self.map(lambda t: t.detach().clone())

    def detach(self):
        return self.map(lambda t: t.detach())

    def requires_grad_(self, flag: bool = True):
        """Fresh leaf tensors with ``requires_grad`` set."""
        return self.map(lambda t: t.detach().clone().requires_grad_(flag))

    def to(self, dtype):
        return self.map(lambda t: t.to(dtype))

    def __add__(self, other):
        if isinstance(other, ParameterCollection):
            return self.zip_map(other, lambda a, b: a + b)
        return self.map(lambda a: a + other)

    def __sub__(self, other):
        if isinstance(other, ParameterCollection):
            return self.zip_map(other, lambda a, b: a - b)
        return self.map(lambda a: a - other)

    def __mul__(self, scalar):
        return self.map(lambda a: a * scalar)

    __rmul__ = __mul__

    def flatten(self) -> torch.Tensor:
        return torch.cat([t.reshape(-1) for t in self._entries.values()])

    def unflatten(self, vec: torch.Tensor) -> ParameterCollection:
        if vec.numel() != self.numel():
            raise ValueError(f"expected {self.numel()} values, got {vec.numel()}")
        out, offset = [], 0
        for t in self._entries.values():
            n = t.numel()
            out.append(vec[offset:offset + n].reshape(t.shape))
            offset += n
        return self.with_values(out)

    def locate(self, flat_index: int) -> tuple[str, tuple[int, ...]]:
        """Map an index into ``flatten()`` to (entry name, element index)."""
        offset = 0
        for name, t in self._entries.items():
            if flat_index < offset + t.numel():
                idx = flat_index - offset
                pos = []
                for dim in reversed(t.shape):
                    pos.append(idx % dim)
                    idx //= dim
                return name, tuple(reversed(pos))
            offset += t.numel()
        raise IndexError(flat_index)

    def equal(self, other: ParameterCollection) -> bool:
        return (
            self.role == other.role
            and self.names() == other.names()
            and all(torch.equal(self[k], other[k]) for k in self)
        )


def global_norm(tensors) -> torch.Tensor:
    return torch.sqrt(sum((t * t).sum() for t in tensors))


def clip_scale(norm: torch.Tensor, max_norm: float | None):
    """Multiplier that rescales a gradient of ``norm`` down to ``max_norm``."""
    if max_norm is None or math.isinf(max_norm):
        return 1.0
    return torch.clamp(max_norm / (norm + 1e-6), max=1.0)
