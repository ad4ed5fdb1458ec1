"""YAML run configuration.

Layout (every section optional, unknown keys rejected)::

    seed: 0
    output_dir: runs/demo
    data:       {format, path, test_path, subset_per_class, synthetic: {...}}
    pretrain:   PretrainConfig fields (plan, attack, objective, encoder nested)
    postprocess: {k, max_iters, normalize, lp_epochs, aft_epochs, ...}
    eval:       {protocol, epochs, lr, milestones, ..., attack, train_attack}
    diagnose:   {strengths, augs_per_sample, sample_cap, train_limit, test_limit, mmd}

The resolved config (all defaults filled in) is written next to every run's
outputs and can be fed back unchanged.
"""
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .attack import AttackSpec
from .augment import ImageBatch
from .data import (DatasetManifest, SynthSpec, load_cifar10_binary, load_tensor_container,
                   make_manifest, stratified_subset, synth_dataset)
from .diagnostics import MmdConfig
from .errors import ConfigError
from .evaluate import EvalProtocolConfig
from .pretrain import PretrainConfig

DATA_FORMATS = ("synthetic", "cifar10-binary", "tensor-container")


@dataclass(frozen=True)
class DataConfig:
    format: str = "synthetic"
    path: Optional[str] = None
    test_path: Optional[str] = None
    name: Optional[str] = None
    subset_per_class: Optional[int] = None
    test_subset_per_class: Optional[int] = None
    synthetic: SynthSpec = field(default_factory=SynthSpec)

    def __post_init__(self):
        if self.format not in DATA_FORMATS:
            raise ConfigError(f"data.format must be one of {DATA_FORMATS}, got {self.format!r}")
        if self.format != "synthetic" and not self.path:
            raise ConfigError(f"data.path is required for format {self.format!r}")


@dataclass(frozen=True)
class PostprocessConfig:
    k: Optional[int] = None
    max_iters: int = 100
    n_init: int = 4
    normalize: bool = True
    use_projection: bool = False
    lp_epochs: int = 10
    aft_epochs: int = 25
    lp_lr: float = 0.1
    aft_lr: float = 0.01
    batch_size: int = 128
    beta: float = 6.0
    attack: AttackSpec = field(default_factory=AttackSpec.trades)


@dataclass(frozen=True)
class DiagnoseConfig:
    strengths: tuple[float, ...] = (0.0, 0.5, 1.0)
    augs_per_sample: int = 50
    sample_cap: Optional[int] = 200
    train_limit: Optional[int] = 1000
    test_limit: Optional[int] = 1000
    mmd: MmdConfig = field(default_factory=MmdConfig)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig.desk)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    eval: EvalProtocolConfig = field(default_factory=EvalProtocolConfig)
    diagnose: DiagnoseConfig = field(default_factory=DiagnoseConfig)


def _merge(base: dict, raw, where: str) -> dict:
    """Overlay ``raw`` on a fully populated default tree, rejecting unknown keys."""
    if raw is None:
        return base
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(raw).__name__}")
    unknown = sorted(set(raw) - set(base))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(map(str, unknown))}")
    out = dict(base)
    for k, v in raw.items():
        sub = f"{where}.{k}" if where else k
        out[k] = _merge(base[k], v, sub) if isinstance(base[k], dict) else v
    return out


def _build(cls, raw: dict, where: str):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        value = raw[f.name]
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            value = _build(hint, value, f"{where}.{f.name}" if where else f.name)
        elif typing.get_origin(hint) is tuple and value is not None:
            value = tuple(value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def to_dict(cfg) -> dict:
    return _to_plain(cfg)


def from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, _merge(to_dict(RunConfig()), raw, ""), "")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return from_dict(raw)


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
    return path


def load_split(data: DataConfig, split: str = "train") -> tuple[ImageBatch, DatasetManifest]:
    """Materialise one split of the configured dataset together with its manifest."""
    if data.format == "synthetic":
        spec = data.synthetic
        if split == "test":
            spec = dataclasses.replace(spec, seed=spec.seed + 10007)
        batch = synth_dataset(spec)
        source = f"synthetic:{spec}"
    elif data.format == "cifar10-binary":
        train, test = load_cifar10_binary(data.path)
        batch = train if split == "train" else test
        source = str(data.path)
    else:
        p = data.path if split == "train" else (data.test_path or data.path)
        batch = load_tensor_container(p)
        source = str(p)
    cap = data.subset_per_class if split == "train" else data.test_subset_per_class
    if cap is not None and batch.labels is not None:
        batch = stratified_subset(batch, cap, seed=0)
    name = data.name or data.format
    return batch, make_manifest(batch, name, source, data.format, split)
