"""The single declarative run configuration behind every CLI command."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from recfusion.data import TASK_KINDS
from recfusion.losses import LossConfig
from recfusion.networks import NetConfig
from recfusion.trainer import TrainConfig

OUTPUT_ROOT_ENV = "RECFUSION_OUTPUT_ROOT"
CHROMA_SOURCES = ("a", "b")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_train: int = 64
    n_holdout: int = 16
    size: int = 64
    blur_sigma: float = 2.0
    seed: int = 1000
    holdout_seed: int = 5000

    def __post_init__(self):
        if min(self.n_train, self.n_holdout, self.size) < 1:
            raise ConfigError("synth counts and size must be positive")
        if self.blur_sigma <= 0:
            raise ConfigError("blur_sigma must be positive")


@dataclass(frozen=True)
class DataConfig:
    # ``<root>/a``, ``<root>/b`` (optionally ``<root>/mask``); synthetic when unset
    train_root: str | None = None
    holdout_root: str | None = None
    # source whose chroma is carried into colour outputs ("visible-like")
    chroma_source: str = "b"
    synth: SynthConfig = SynthConfig()

    def __post_init__(self):
        if self.chroma_source not in CHROMA_SOURCES:
            raise ConfigError(f"chroma_source must be one of {CHROMA_SOURCES}")


@dataclass(frozen=True)
class GradcheckConfig:
    seed: int = 0
    first_order_tol: float = 1e-4
    second_order_tol: float = 1e-3
    inner_step: float = 0.5
    include_recon_path: bool = False
    # cap on the proposal entries checked by finite differences (all when null)
    max_meta_entries: int | None = None
    # the checks run on their own tiny networks, independent of the ``net`` section
    base_channels: int = 4
    num_blocks: int = 1
    attention_heads: int = 1

    def net_config(self) -> NetConfig:
        return NetConfig(self.base_channels, self.num_blocks, self.attention_heads)


@dataclass(frozen=True)
class RunConfig:
    task: str = "multifocus"
    output_dir: str = "runs/default"
    data: DataConfig = DataConfig()
    train: TrainConfig = TrainConfig()
    net: NetConfig = NetConfig()
    loss: LossConfig = LossConfig()
    gradcheck: GradcheckConfig = GradcheckConfig()

    def __post_init__(self):
        if self.task not in TASK_KINDS:
            raise ConfigError(f"task must be one of {TASK_KINDS}, got {self.task!r}")

    def output_path(self) -> Path:
        """``output_dir``, re-rooted under $RECFUSION_OUTPUT_ROOT when it is relative."""
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


_SECTIONS = {"data": DataConfig, "train": TrainConfig, "net": NetConfig, "loss": LossConfig,
             "gradcheck": GradcheckConfig}


def _build(cls, raw, where):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {unknown}")
    kwargs = dict(raw)
    if cls is DataConfig and "synth" in kwargs:
        kwargs["synth"] = _build(SynthConfig, kwargs["synth"], f"{where}.synth")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where!r} section: {exc}") from exc


def from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    kwargs = {k: _build(cls, raw.get(k), k) for k, cls in _SECTIONS.items()}
    for k in ("task", "output_dir"):
        if k in raw:
            kwargs[k] = raw[k]
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a mapping at the top level")
    return from_dict(raw)
