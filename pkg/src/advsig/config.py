"""Dataclass configuration for every run, with JSON round-tripping and hashing.

A serialized ExperimentConfig fully determines a run; the sha256 of its
canonical JSON form stamps every artifact the run produces.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .augment import TransformSpec
from .core import BinaryCode, CoreError


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj: Any) -> str:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        obj = to_dict(obj)
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


@dataclass
class Stage1Config:
    """Joint injector/detector training switches.

    noise_std > 0 adds zero-mean Gaussian noise to the injector input
    (reconstruction is still measured against the clean image); use_aux
    co-trains a restoration adversary and teaches the detector to recognize
    its outputs from frozen snapshots.
    """

    lam: float = 0.05
    learning_rate: float = 1e-4
    batch_size: int = 24
    max_iterations: int = 20000
    n: int = 1
    noise_std: float = 0.0
    use_aux: bool = False
    snapshot_count: int = 3
    snapshot_interval: int = 2000
    freeze_detector: bool = False
    quantize_in_training: bool = True
    predict_residual: bool = True
    injector_width: int = 16
    injector_stages: int = 4
    detector_width: int = 16
    detector_blocks: int = 4
    embed_dim: int = 128
    restoration_width: int = 16
    eval_interval: int = 500
    eval_subset: int = 256
    seed: int = 0
    transform: TransformSpec = field(default_factory=TransformSpec)

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise CoreError(f"lam must be >= 0, got {self.lam}")
        if self.noise_std < 0:
            raise CoreError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.use_aux and self.snapshot_count < 1:
            raise CoreError("use_aux requires snapshot_count >= 1")
        if self.n < 1:
            raise CoreError(f"n must be >= 1, got {self.n}")
        if self.batch_size < 1 or self.max_iterations < 0:
            raise CoreError("batch_size must be >= 1 and max_iterations >= 0")


@dataclass
class GeneratorConfig:
    family: str = "gan"  # gan | ddpm
    latent_dim: int = 64
    width: int = 32
    iterations: int = 10000
    batch_size: int = 16
    learning_rate: float = 2e-4
    ddpm_steps: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        if self.family not in ("gan", "ddpm"):
            raise CoreError(f"unknown generator family {self.family!r}")


@dataclass
class Stage2Config:
    """Fine-tuning switches for one secured generator.

    detector_guidance (xi) defaults per family: 0.05 for gan, 0.0 for ddpm.
    """

    code: BinaryCode = field(default_factory=lambda: BinaryCode((1,)))
    family: str = "gan"
    max_iterations: int = 6000
    detector_guidance: float | None = None
    batch_size: int = 16
    eval_interval: int = 500
    seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.code, str):
            self.code = BinaryCode.parse(self.code)
        if self.code.is_zero:
            raise CoreError("generator code must be non-zero (all-zero is reserved for real images)")
        if self.family not in ("gan", "ddpm"):
            raise CoreError(f"unknown generator family {self.family!r}")
        if self.detector_guidance is None:
            self.detector_guidance = 0.05 if self.family == "gan" else 0.0
        if self.detector_guidance < 0:
            raise CoreError(f"detector_guidance must be >= 0, got {self.detector_guidance}")


@dataclass
class DatasetSpec:
    source: str = "toy"  # "toy" or a directory of 8-bit PNGs
    image_size: int = 32
    count: int = 6000  # toy set only
    test_size: int = 1000
    split_seed: int = 7

    def __post_init__(self) -> None:
        if self.image_size < 1 or self.count < 1:
            raise CoreError("image_size and count must be >= 1")


@dataclass
class EvalConfig:
    threshold: float = 0.5
    sample_count: int = 1000
    attack_iterations: int = 20000
    sweep_lambdas: tuple[float, ...] = (1e-5, 0.001, 0.05, 0.1, 1.0)
    sweep_include_zero: bool = True
    sweep_iterations: int = 4000
    embedder_width: int = 32
    embedder_feature_dim: int = 128
    embedder_iterations: int = 1500


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    pretrain: list[GeneratorConfig] = field(default_factory=lambda: [GeneratorConfig()])
    stage2: list[Stage2Config] = field(default_factory=lambda: [Stage2Config()])
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    @property
    def hash(self) -> str:
        return config_hash(self)


# ---------------------------------------------------------------------------
# dict/JSON round-tripping

def to_dict(obj: Any) -> Any:
    if isinstance(obj, BinaryCode):
        return str(obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_dict(getattr(obj, f.name)) for f in fields(obj) if not f.name.startswith("_")}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    return obj


_NESTED = {
    "transform": TransformSpec,
    "dataset": DatasetSpec,
    "stage1": Stage1Config,
    "eval": EvalConfig,
}
_NESTED_LISTS = {
    "pretrain": GeneratorConfig,
    "stage2": Stage2Config,
}


def _build(cls: type, data: dict) -> Any:
    kwargs: dict[str, Any] = {}
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise CoreError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if f.name in _NESTED and isinstance(value, dict):
            value = _build(_NESTED[f.name], value)
        elif f.name in _NESTED_LISTS and isinstance(value, list):
            value = [_build(_NESTED_LISTS[f.name], v) for v in value]
        elif f.name == "code" and isinstance(value, str):
            value = BinaryCode.parse(value)
        elif isinstance(value, list) and f.name.endswith(("range", "lambdas")):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data)


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        return from_dict(json.load(fh))


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def apply_override(cfg: ExperimentConfig, dotted: str, raw: str) -> ExperimentConfig:
    """Apply one ``a.b.c=value`` override; values parse as JSON, else strings."""
    data = to_dict(cfg)
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        if key.isdigit() and isinstance(node, list):
            node = node[int(key)]
        elif isinstance(node, dict) and key in node:
            node = node[key]
        else:
            raise CoreError(f"unknown config path {dotted!r}")
    leaf = keys[-1]
    if leaf.isdigit() and isinstance(node, list):
        leaf = int(leaf)
    elif not (isinstance(node, dict) and leaf in node):
        raise CoreError(f"unknown config path {dotted!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node[leaf] = value
    return from_dict(data)
