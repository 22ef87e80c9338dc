"""Pipeline configuration: one YAML file with a section per stage.

Every section mirrors a dataclass; unknown keys, wrong types and bad values
raise ConfigError. Seeds are not set per section: the top-level ``seed`` is
spread over the stages with fixed offsets (see ``PipelineConfig.seeds``).
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .atlas import DecompositionConfig
from .diffusion import DESK_BETAS, DenoiserConfig, TrainConfig
from .synth import SyntheticScene
from .uvopt import LossWeights, OptimizationConfig

CONFIG_VERSION = "1"


class ConfigError(ValueError):
    pass


@dataclass
class AtlasConfig:
    size: int = 128  # G, texels per side of each discretized atlas
    closing_radius: int = 2  # fills splatting holes in the fg opacity


@dataclass
class ScheduleConfig:
    T: int = 50  # 1000 steps scaled down 20x
    beta_min: float = DESK_BETAS[0]
    beta_max: float = DESK_BETAS[1]


@dataclass
class CorpusConfig:
    n_sprites: int = 24
    n_textures: int = 24


@dataclass
class EditConfig:
    mode: str = "diffusion"  # diffusion | identity (edited atlases := source atlases)
    source_caption: str = "a red ball"
    target_caption: str = "a blue ball"
    bg_caption: str = "stripes texture"
    edit_bg: bool = True
    guidance: float = 3.0
    finetune_steps: int = 150
    finetune_lr: float = 1e-5
    img_noise_cap: int = 50
    n_references: int = 4  # frames used as image conditions while fine-tuning
    crop_margin: float = 0.1
    bg_strength: float = 0.5
    bg_guidance: float = 3.0

    def __post_init__(self):
        if self.mode not in ("diffusion", "identity"):
            raise ValueError(f"unknown edit mode {self.mode!r}")


_SECTIONS = {
    "scene": SyntheticScene,
    "decomposition": DecompositionConfig,
    "atlas": AtlasConfig,
    "schedule": ScheduleConfig,
    "denoiser": DenoiserConfig,
    "denoiser_train": TrainConfig,
    "corpus": CorpusConfig,
    "edit": EditConfig,
    "uvopt": OptimizationConfig,
}

# offsets added to the top-level seed
SEED_OFFSETS = {"scene": 0, "decomposition": 1, "denoiser": 2, "denoiser_train": 3, "corpus": 4,
                "finetune": 5, "edit_bg": 6, "uvopt": 7}


@dataclass
class PipelineConfig:
    version: str = CONFIG_VERSION
    seed: int = 0
    scene: SyntheticScene = field(default_factory=SyntheticScene)
    decomposition: DecompositionConfig = field(default_factory=DecompositionConfig)
    atlas: AtlasConfig = field(default_factory=AtlasConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    denoiser_train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    edit: EditConfig = field(default_factory=EditConfig)
    uvopt: OptimizationConfig = field(default_factory=OptimizationConfig)

    def seeds(self):
        return {k: self.seed + v for k, v in SEED_OFFSETS.items()}

    def section(self, name):
        """The named section with its derived seed filled in."""
        sec = copy.deepcopy(getattr(self, name))
        if any(f.name == "seed" for f in dataclasses.fields(sec)):
            sec.seed = self.seeds()[name]
        return sec

    def to_dict(self):
        out = {"version": self.version, "seed": self.seed}
        for name in _SECTIONS:
            out[name] = _section_to_dict(getattr(self, name))
        return out

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _section_to_dict(obj):
    out = {}
    for f in dataclasses.fields(obj):
        if f.name == "seed":
            continue
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = _section_to_dict(v)
        elif isinstance(v, tuple):
            v = [list(x) if isinstance(x, tuple) else x for x in v]
        out[f.name] = v
    return out


def _coerce(where, default, value):
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return _build(type(default), value, where)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{where}: expected a list of length {len(default)}")
        return tuple(_coerce(f"{where}[{i}]", d, v) for i, (d, v) in enumerate(zip(default, value)))
    raise ConfigError(f"{where}: unsupported field type")


def _build(cls, data, where):
    base = cls()
    names = {f.name for f in dataclasses.fields(cls) if f.name != "seed"}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {n: getattr(base, n) for n in names}
    for k, v in data.items():
        kwargs[k] = _coerce(f"{where}.{k}", getattr(base, k), v)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def config_from_dict(data):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(data) - set(_SECTIONS) - {"version", "seed"}
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    version = str(data.get("version", CONFIG_VERSION))
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version {version!r} not supported (expected {CONFIG_VERSION!r})")
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    kwargs = {name: _build(cls, data.get(name) or {}, name) for name, cls in _SECTIONS.items()}
    return PipelineConfig(version=version, seed=seed, **kwargs)


def load_config(path):
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from None
    return config_from_dict(data)


def save_config(path, cfg: PipelineConfig):
    with open(path, "w") as f:
        f.write(cfg.to_yaml())


def fixture_config(seed=0):
    """Reduced budgets: every stage runs end to end in about a minute."""
    return config_from_dict({
        "seed": seed,
        "decomposition": {"iters": 800, "warmup_iters": 100, "identity_iters": 150},
        "atlas": {"size": 96},
        "denoiser_train": {"steps": 300},
        "corpus": {"n_sprites": 8, "n_textures": 8},
        "edit": {"finetune_steps": 20},
        "uvopt": {"iters": 300, "sds_iters": 30, "batch": 1000},
    })


__all__ = ["ConfigError", "PipelineConfig", "AtlasConfig", "ScheduleConfig", "CorpusConfig", "EditConfig",
           "LossWeights", "config_from_dict", "load_config", "save_config", "fixture_config"]
