"""Run configuration: one YAML file, strict schema, dotted CLI overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .augment import AugConfig
from .encoders import EncoderConfig
from .errors import ConfigError
from .pointsup import PointSupConfig
from .postprocess import PostConfig
from .pretext import PretextConfig
from .synthgen import GenConfig


@dataclass
class EvalConfig:
    baseline_seed: int = 0
    per_video_plots: bool = False


@dataclass
class AblationConfig:
    """Each flag switches off exactly one component of the full model."""

    disable_pretext: bool = False
    disable_vo_gate: bool = False
    disable_pe: bool = False
    disable_proto_decoder: bool = False
    disable_proto_loss: bool = False
    k_d: Optional[int] = None  # overrides pointsup.k_d
    k_b: Optional[int] = None
    use_dynamic: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    vo_gate_mode: str = "rescaled"
    gen: GenConfig = field(default_factory=GenConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretext: PretextConfig = field(default_factory=PretextConfig)
    pointsup: PointSupConfig = field(default_factory=PointSupConfig)
    post: PostConfig = field(default_factory=PostConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self) -> "RunConfig":
        for sec in (self.gen, self.aug, self.encoder, self.pretext, self.pointsup, self.post):
            sec.validate()
        if self.vo_gate_mode not in ("rescaled", "literal"):
            raise ConfigError(f"vo_gate_mode must be 'rescaled' or 'literal', got {self.vo_gate_mode!r}")
        return self

    @property
    def k_d(self) -> int:
        return self.ablation.k_d or self.pointsup.k_d

    @property
    def k_b(self) -> int:
        return self.ablation.k_b or self.pointsup.k_b

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def replace(self, **overrides) -> "RunConfig":
        """``replace(**{"pointsup.lr": 1e-3})``-style copy."""
        d = self.to_dict()
        for key, value in overrides.items():
            _set_dotted(d, key, value)
        return from_dict(d)


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if tp is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return [float(v) for v in value]
    return value


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        key = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, key)
        else:
            kwargs[name] = _coerce(tp, value, key)
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data or {}, "").validate()


def loads(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return from_dict(data or {})


def load(path=None, overrides: Optional[list] = None) -> RunConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: not valid YAML: {exc}") from exc
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        _set_dotted(data, key.strip(), yaml.safe_load(raw))
    return from_dict(data)


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
        if not isinstance(d, dict):
            raise ConfigError(f"override {key!r}: {p} is not a section")
    d[parts[-1]] = value


ABLATION_PRESETS = {
    "no_pe": {"ablation.disable_pe": True},
    "no_vo_gate": {"ablation.disable_vo_gate": True},
    "no_proto_modules": {"ablation.disable_proto_decoder": True, "ablation.disable_proto_loss": True},
    "single_prototype": {"ablation.k_d": 1, "ablation.k_b": 1},
    "no_dynamic": {"ablation.use_dynamic": False},
    "no_pretext": {"ablation.disable_pretext": True},
}
