"""Line-oriented ``key = value`` configuration text and typed run settings."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError, InvalidConfig
from .model import ModelConfig


def parse_kv(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}", key)
        out[key] = value.strip()
    return out


def render_kv(entries: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in entries.items())


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(key: str, text: str, type_name: str):
    optional = "None" in type_name
    base = type_name.replace("| None", "").replace("Optional[", "").strip(" ]")
    if optional and text == "":
        return None
    try:
        if base == "bool":
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {base}", key) from None


def _to_dict(obj) -> dict:
    return {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def _from_dict(cls, entries: dict, strict: bool = True):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if strict:
        unknown = sorted(set(entries) - set(fields))
        if unknown:
            raise ConfigError(f"unknown key {unknown[0]!r}", unknown[0])
    kwargs = {k: _convert(k, v, str(fields[k].type)) for k, v in entries.items() if k in fields}
    return cls(**kwargs)


def model_config_to_dict(config: ModelConfig) -> dict:
    return _to_dict(config)


def model_config_from_dict(entries: dict) -> ModelConfig:
    try:
        return _from_dict(ModelConfig, entries)
    except InvalidConfig as exc:
        raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class RunConfig:
    """Everything a ``train`` run needs. Model keys live at the top level too."""

    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    adam_eps: float = 1e-8
    delta: float = 0.1
    wd_ratio: float = 0.1
    halving_interval: int = 64
    epochs: int = 10
    batch_size: int = 4
    clip_norm: float = 5.0          # 0 disables clipping
    seed: int = 0
    out_dir: str = "runs"
    manifest: str = ""              # empty -> synthetic data
    synth_items: int = 200
    synth_duration: float = 2.0
    sample_rate: int = 8000
    checkpoint_every: int = 1

    def __post_init__(self):
        checks = [
            (self.lr >= 0, "lr"), (0 <= self.beta1 < 1, "beta1"), (0 <= self.beta2 < 1, "beta2"),
            (self.weight_decay >= 0, "weight_decay"), (self.adam_eps > 0, "adam_eps"),
            (self.delta >= 0, "delta"), (self.halving_interval >= 1, "halving_interval"),
            (self.epochs >= 0, "epochs"), (self.batch_size >= 1, "batch_size"),
            (self.clip_norm >= 0, "clip_norm"), (self.synth_items >= 10, "synth_items"),
            (self.synth_duration > 0, "synth_duration"), (self.sample_rate > 0, "sample_rate"),
            (self.checkpoint_every >= 1, "checkpoint_every"),
        ]
        for ok, key in checks:
            if not ok:
                raise ConfigError(f"{key}: value out of range", key)

    def to_text(self) -> str:
        entries = model_config_to_dict(self.model)
        entries.update({k: v for k, v in _to_dict(self).items() if k != "model"})
        return render_kv(entries)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        entries = parse_kv(text)
        model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
        model = model_config_from_dict({k: v for k, v in entries.items() if k in model_fields})
        rest = {k: v for k, v in entries.items() if k not in model_fields}
        cfg = _from_dict(cls, {k: v for k, v in rest.items() if k != "model"})
        if "model" in rest:
            raise ConfigError("unknown key 'model'", "model")
        return dataclasses.replace(cfg, model=model)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)
