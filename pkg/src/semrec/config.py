"""Run configuration: nested dataclasses loaded from YAML or JSON."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .autodiff import ConfigError
from .data import DataError, SynthConfig
from .fusion import FusionConfig
from .quantizer import QuantizerConfig
from .seqmodel import SeqModelConfig


@dataclass
class DataSection:
    # synthetic=True generates target + source domains in the synth stage;
    # otherwise the paths below are read
    synthetic: bool = True
    interactions: str = ""
    features: str = ""
    pretrain_interactions: list = field(default_factory=list)
    allow_missing_features: bool = False
    n_source_domains: int = 2
    source_users: int = 2000
    source_items: int = 500


@dataclass
class EvalSection:
    phase: str = "test"
    batch_size: int = 256


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    preset: str = "desk"
    data: DataSection = field(default_factory=DataSection)
    synth: SynthConfig = field(default_factory=SynthConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    seqmodel: SeqModelConfig = field(default_factory=SeqModelConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self):
        try:
            self.synth.validate()
        except DataError as exc:
            raise ConfigError(str(exc)) from None
        self.fusion.validate()
        self.quantizer.validate()
        self.seqmodel.validate()
        if self.eval.phase not in ("val", "test"):
            raise ConfigError(f"eval.phase must be 'val' or 'test', got {self.eval.phase!r}")
        if not self.data.synthetic and not (self.data.interactions and self.data.features):
            raise ConfigError("data.interactions and data.features are required when data.synthetic is false")
        if self.data.n_source_domains < 0:
            raise ConfigError("data.n_source_domains must be >= 0")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def hash(self):
        """sha256 of the resolved config, ignoring where outputs are written."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


# Desk-scale settings: the dataclass defaults carry the full-size values,
# which are far too slow for a single CPU core.
PRESETS = {
    "full": {},
    "desk": {
        "quantizer": {"codebook_size": 64, "batch_size": 256, "epochs": 100},
        "seqmodel": {"n_layers": 2, "dropout": 0.1, "max_items": 20,
                     "pretrain_lr": 1e-3, "pretrain_batch": 128, "pretrain_epochs": 15,
                     "finetune_lr": 1e-3, "finetune_batch": 128, "finetune_epochs": 40},
    },
}


def _build(cls, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, val in values.items():
        default = getattr(cls(), name) if name in fields else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), val, f"{where}.{name}")
        elif isinstance(default, tuple):
            kwargs[name] = tuple(val)
        elif isinstance(default, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{where}.{name}: expected true/false, got {val!r}")
            kwargs[name] = val
        elif isinstance(default, float) and isinstance(val, int):
            kwargs[name] = float(val)
        else:
            kwargs[name] = val
    return cls(**kwargs)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(values, overrides=None):
    values = dict(values or {})
    preset = (overrides or {}).get("preset", values.get("preset", "desk"))
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = _merge(PRESETS[preset], values)
    merged = _merge(merged, overrides or {})
    merged["preset"] = preset
    return _build(RunConfig, merged, "config").validate()


def load_config(path=None, overrides=None):
    values = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            values = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        values = values or {}
    return from_dict(values, overrides)


def parse_override(text):
    """``a.b.c=value`` -> nested dict; value parsed as YAML scalar."""
    key, sep, raw = text.partition("=")
    if not sep:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    return nested(key, yaml.safe_load(raw))


def nested(key, value):
    """``nested("a.b", 1)`` -> ``{"a": {"b": 1}}``."""
    out = {}
    cur = out
    parts = key.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def write_resolved(cfg: RunConfig, path):
    d = cfg.to_dict()
    d["config_hash"] = cfg.hash()
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
