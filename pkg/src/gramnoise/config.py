"""YAML run configuration with strict key checking and dotted overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dataset import NormalizationSettings, frame_length
from .denoiser import NetworkConfig
from .guides import GuideError, GuideSpec, preset
from .sampler import SamplerRun
from .trainer import TrainingConfig


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 reads "2e-4" as a string; accept exponent floats without a dot
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)

SECTIONS = ("network", "training", "normalization", "sampler", "guide", "data")
TOP_LEVEL = ("fs", "rpm") + SECTIONS

PROFILES = {
    # small enough to train on one CPU core in a few minutes
    "desk": {
        "fs": 8000,
        "network": {"depth": 3, "channels": [8, 16, 16], "attention_stages": [3], "attention_heads": 4,
                    "rff_dim": 16, "mlp_dims": [32, 32]},
        "training": {"learning_rate": 1e-3, "ema_rate": 0.99, "batch_size": 4, "total_iterations": 2000,
                     "checkpoint_interval": 500},
    },
}


@dataclass
class RunConfig:
    fs: int = 22050
    rpm: float = 78.0
    network: NetworkConfig | None = None
    training: TrainingConfig = field(default_factory=TrainingConfig)
    normalization: NormalizationSettings = field(default_factory=NormalizationSettings)
    sampler: SamplerRun = field(default_factory=SamplerRun)
    guide: GuideSpec | None = None
    data: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict)

    @property
    def sample_count(self) -> int:
        return frame_length(self.fs, self.rpm)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.source, sort_keys=True, default=str).encode()).hexdigest()


def load_yaml(text: str, origin: str = "<config>"):
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{origin}:{mark.line + 1}:{mark.column + 1}" if mark else origin
        raise ConfigError(f"{where}: {getattr(e, 'problem', None) or e}") from None
    return {} if data is None else data


def parse_value(text: str):
    return load_yaml(text, "<override>") if text.strip() else ""


def apply_override(tree: dict, assignment: str):
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key}: {p} is not a section")
    node[parts[-1]] = parse_value(value)


def _build(cls, section: str, values: dict, **extra):
    if not isinstance(values, dict):
        raise ConfigError(f"{section}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names or key in extra:
            raise ConfigError(f"unknown key {section}.{key}")
    try:
        return cls(**values, **extra)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from None


def build_config(tree: dict) -> RunConfig:
    if not isinstance(tree, dict):
        raise ConfigError("configuration root must be a mapping")
    for key in tree:
        if key not in TOP_LEVEL:
            raise ConfigError(f"unknown key {key}")
    cfg = RunConfig(source=json.loads(json.dumps(tree, default=str)))
    if "fs" in tree:
        cfg.fs = int(tree["fs"])
    if "rpm" in tree:
        cfg.rpm = float(tree["rpm"])
    if cfg.fs <= 0 or cfg.rpm <= 0:
        raise ConfigError("fs and rpm must be positive")
    net = dict(tree.get("network") or {})
    net.setdefault("sample_count", cfg.sample_count)
    if "depth" in net and "channels" not in net:
        raise ConfigError("network.channels must be given when network.depth is")
    cfg.network = _build(NetworkConfig, "network", net)
    cfg.training = _build(TrainingConfig, "training", tree.get("training") or {})
    cfg.normalization = _build(NormalizationSettings, "normalization", tree.get("normalization") or {})
    cfg.sampler = _build(SamplerRun, "sampler", tree.get("sampler") or {})
    guide = tree.get("guide")
    if guide:
        guide = dict(guide)
        try:
            if "preset" in guide:
                name = guide.pop("preset")
                spec = preset(name, cfg.fs)
                if guide:
                    raise ConfigError(f"unknown key guide.{next(iter(guide))} (presets take no extra keys)")
                cfg.guide = spec
            else:
                cfg.guide = GuideSpec.from_dict({**guide, "fs": cfg.fs})
        except (GuideError, TypeError) as e:
            raise ConfigError(f"guide: {e}") from None
    data = tree.get("data") or {}
    for key in data:
        if key not in ("manifest",):
            raise ConfigError(f"unknown key data.{key}")
    cfg.data = dict(data)
    return cfg


def parse_config(path=None, overrides=()) -> RunConfig:
    """Read a YAML file (or a built-in profile name), apply ``key=value`` overrides, validate."""
    if path is None:
        tree = {}
    elif str(path) in PROFILES:
        tree = json.loads(json.dumps(PROFILES[str(path)]))
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        tree = load_yaml(p.read_text(), str(p))
    for assignment in overrides:
        apply_override(tree, assignment)
    return build_config(tree)
