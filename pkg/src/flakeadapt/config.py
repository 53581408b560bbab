"""Experiment configuration: dataclasses, YAML/JSON loading, overrides, hashing.

Schema (all sections optional, defaults shown in the dataclasses below)::

    seed: 0
    output_dir: runs/default
    assets_root: null          # defaults to $FLAKEADAPT_ASSETS or bundled data
    grid: {start: 380, stop: 780, count: 128}
    scene:
      width: 96
      height: 96
      min_flakes: 2
      max_flakes: 6
      materials: [graphene]
      substrate_sio2_nm: 290
      layer_counts: [1, 2, ..., 12]
      layer_weights: null      # uniform when null
      shape: {r_max_px: 16, min_vertices: 5, max_vertices: 12,
              radius_lo: 0.3, radius_hi: 1.0, min_area_px: 25, retries: 20}
    source: {illuminant_id: d65, G: [1, 1, 1], seed: 1}
    targets: [{illuminant_id: a, G: null, seed: 2}]   # G null = sample log-uniform
    counts: {source: 600, target: 600}
    train: {...}
    adapt: {...}
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml


class ConfigError(ValueError):
    pass


@dataclass
class GridConfig:
    start: float = 380.0
    stop: float = 780.0
    count: int = 128


@dataclass
class ShapeConfig:
    r_max_px: float = 16.0
    min_vertices: int = 5
    max_vertices: int = 12
    radius_lo: float = 0.3
    radius_hi: float = 1.0
    min_area_px: float = 25.0
    retries: int = 20


@dataclass
class SceneConfig:
    width: int = 96
    height: int = 96
    min_flakes: int = 2
    max_flakes: int = 6
    materials: list = field(default_factory=lambda: ["graphene"])
    substrate_sio2_nm: float = 290.0
    layer_counts: list = field(default_factory=lambda: list(range(1, 13)))
    layer_weights: list | None = None
    shape: ShapeConfig = field(default_factory=ShapeConfig)
    placement_retries: int = 50


@dataclass
class DomainConfig:
    illuminant_id: str = "d65"
    G: list | None = field(default_factory=lambda: [1.0, 1.0, 1.0])
    seed: int = 1
    name: str | None = None


@dataclass
class CountsConfig:
    source: int = 600
    target: int = 600


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-2
    weight_decay: float = 1e-4
    val_fraction: float = 0.2
    patch_size: int = 32
    num_classes: int = 3
    thickness_epochs: int = 40
    thickness_lr: float = 1e-2
    # "class" (mono/few/thick) or "bins" (quantized thickness)
    label_mode: str = "class"


@dataclass
class PretrainConfig:
    colornorm_steps: int = 4000
    specinv_steps: int = 1200
    batch_size: int = 16
    lr: float = 3e-3
    # wide enough to cover illuminant-induced channel ratios as well as gains
    g_log_lo: float = float(np.log(0.125))
    g_log_hi: float = float(np.log(4.0))
    crop_size: int = 32
    crops_per_image: int = 2


@dataclass
class AdaptConfig:
    lr: float = 1e-5
    beta_reg: float = 0.1
    steps: int = 1
    batch_size: int = 32
    mode: str = "set"  # "set" or "per_image"
    epochs: int = 1
    max_batches: int | None = None
    d_out: int | None = None
    gamma: bool = False
    use_colornorm: bool = True
    use_source_transform: bool = True
    use_entropy: bool = True
    use_tau: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    assets_root: str | None = None
    grid: GridConfig = field(default_factory=GridConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    source: DomainConfig = field(default_factory=DomainConfig)
    targets: list = field(default_factory=lambda: [DomainConfig(illuminant_id="a", G=None, seed=2, name="target")])
    counts: CountsConfig = field(default_factory=CountsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    ablation_seeds: list = field(default_factory=lambda: [0, 1, 2])


def _build(cls, data, path):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(hints)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown field(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        where = f"{path}.{name}" if path else name
        if sub is None:
            kwargs[name] = _coerce(hints[name], value, where)
        elif name == "targets":
            if not isinstance(value, list):
                raise ConfigError(f"{where}: expected a list")
            kwargs[name] = [_build(DomainConfig, v, f"{where}[{i}]") for i, v in enumerate(value)]
        else:
            kwargs[name] = _build(sub, value, where)
    return cls(**kwargs)


def _coerce(field, value, where):
    # YAML 1.1 reads "1e-3" as a string; accept it where a float is declared
    if isinstance(value, str) and str(field.type).startswith("float"):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    return value


_NESTED = {
    (ExperimentConfig, "grid"): GridConfig,
    (ExperimentConfig, "scene"): SceneConfig,
    (ExperimentConfig, "source"): DomainConfig,
    (ExperimentConfig, "targets"): DomainConfig,
    (ExperimentConfig, "counts"): CountsConfig,
    (ExperimentConfig, "train"): TrainConfig,
    (ExperimentConfig, "pretrain"): PretrainConfig,
    (ExperimentConfig, "adapt"): AdaptConfig,
    (SceneConfig, "shape"): ShapeConfig,
}


def from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    validate(cfg)
    return cfg


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``key.sub=value`` strings; values are parsed as YAML scalars/lists."""
    data = copy.deepcopy(data)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            if p.isdigit() and isinstance(node, list):
                node = node[int(p)]
            else:
                node = node.setdefault(p, {})
        last = parts[-1]
        value = yaml.safe_load(raw)
        if isinstance(node, list):
            node[int(last)] = value
        else:
            node[last] = value
    return data


def load(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
        data = loaded or {}
    # start from the full default tree so overrides can address any field
    merged = _merge(to_dict(ExperimentConfig()), data)
    if overrides:
        merged = apply_overrides(merged, overrides)
    return from_dict(merged)


def _merge(base, extra):
    if isinstance(base, dict) and isinstance(extra, dict):
        out = dict(base)
        for k, v in extra.items():
            out[k] = _merge(base[k], v) if k in base else v
        return out
    return extra


def validate(cfg: ExperimentConfig):
    s = cfg.scene
    if s.width < 1 or s.height < 1:
        raise ConfigError("scene.width/height must be positive")
    if not 0 <= s.min_flakes <= s.max_flakes:
        raise ConfigError("scene.min_flakes must be in [0, max_flakes]")
    if not s.layer_counts or any(int(n) < 1 for n in s.layer_counts):
        raise ConfigError("scene.layer_counts must be a non-empty list of positive ints")
    if s.layer_weights is not None:
        if len(s.layer_weights) != len(s.layer_counts) or any(w < 0 for w in s.layer_weights) or sum(s.layer_weights) <= 0:
            raise ConfigError("scene.layer_weights must match scene.layer_counts and be non-negative")
    if not 3 <= s.shape.min_vertices <= s.shape.max_vertices:
        raise ConfigError("scene.shape vertex bounds must satisfy 3 <= min <= max")
    if cfg.grid.count < 2 or cfg.grid.stop <= cfg.grid.start:
        raise ConfigError("grid needs count >= 2 and stop > start")
    for i, d in enumerate([cfg.source] + list(cfg.targets)):
        where = "source" if i == 0 else f"targets[{i - 1}]"
        if d.G is not None and (len(d.G) != 3 or any(g <= 0 for g in d.G)):
            raise ConfigError(f"{where}.G must be three positive gains")
    if cfg.adapt.mode not in ("set", "per_image"):
        raise ConfigError("adapt.mode must be 'set' or 'per_image'")
    if cfg.train.label_mode not in ("class", "bins"):
        raise ConfigError("train.label_mode must be 'class' or 'bins'")
    if cfg.adapt.steps < 1 or cfg.adapt.batch_size < 1 or cfg.adapt.epochs < 1:
        raise ConfigError("adapt.steps, adapt.batch_size and adapt.epochs must be >= 1")
    if cfg.adapt.d_out is not None and not 1 <= cfg.adapt.d_out:
        raise ConfigError("adapt.d_out must be null or >= 1")
    if cfg.counts.source < 1 or any(c < 0 for c in (cfg.counts.target,)):
        raise ConfigError("counts.source must be >= 1 and counts.target >= 0")
    names = [t.name or f"target{i}" for i, t in enumerate(cfg.targets)]
    if len(set(names)) != len(names):
        raise ConfigError("targets need distinct names")
    if cfg.train.patch_size % 4:
        raise ConfigError("train.patch_size must be divisible by 4")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def hash_obj(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def config_hash(cfg: ExperimentConfig) -> str:
    d = to_dict(cfg)
    d.pop("output_dir", None)
    return hash_obj(d)


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"
