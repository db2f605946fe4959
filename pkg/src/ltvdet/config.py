"""Training configuration and the ``key = value`` config file format.

One flat file configures the model, the optimizer and augmentation. Absent
keys take their defaults: the reference network and the ``paper-4.2``
preset (200 epochs, batch 16). ``model = shrunk`` starts from the small
network instead. ``preset = paper-3.1.3`` switches to 100 epochs at batch 32;
explicit keys always win over the preset, whatever their order.
"""
from dataclasses import dataclass, field, fields, replace
from typing import NamedTuple, Tuple
import math

from .exceptions import ConfigError, FormatError
from .graph import ModelConfig, reference_config, shrunk_config
from .imaging import AugmentationSpec
from .losses import LossWeights

PRESETS = {
    "paper-4.2": {"epochs": 200, "batch_size": 16, "weight_decay": 5e-4},
    "paper-3.1.3": {"epochs": 100, "batch_size": 32, "weight_decay": 5e-4},
}
DEFAULT_PRESET = "paper-4.2"

RESOLUTION_PRESETS = ((224, 179), (140, 112), (96, 77))
MODEL_PRESETS = {"reference": reference_config, "shrunk": shrunk_config}
RAW_ONLY_KEYS = ("preset", "model")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    schedule: str = "cosine"
    eta_min: float = 0.0
    epochs: int = 200
    batch_size: int = 16
    weight_decay: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    input_width: int = 140
    input_height: int = 112
    scale_crops: int = 0
    extra_resolutions: Tuple[int, ...] = ()  # flat w,h pairs: each frame is also trained at these
    bn_freeze: float = 0.25  # trailing fraction of epochs run on BN running statistics
    loss: LossWeights = field(default_factory=LossWeights)
    preset: str = DEFAULT_PRESET

    def __post_init__(self):
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.schedule != "cosine":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")
        if self.eta_min < 0 or self.eta_min > self.learning_rate:
            raise ConfigError("eta_min must lie in [0, learning_rate]")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.input_width < 1 or self.input_height < 1:
            raise ConfigError("input resolution must be positive")
        if self.scale_crops < 0:
            raise ConfigError("scale_crops must be non-negative")
        if len(self.extra_resolutions) % 2 or any(v < 1 for v in self.extra_resolutions):
            raise ConfigError(f"extra_resolutions must be positive w,h pairs, got {self.extra_resolutions}")
        if not 0.0 <= self.bn_freeze < 1.0:
            raise ConfigError(f"bn_freeze must lie in [0, 1), got {self.bn_freeze}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")

    @property
    def betas(self):
        return (self.adam_beta1, self.adam_beta2)

    @property
    def resolutions(self):
        """Every training input resolution, the primary one first."""
        extra = self.extra_resolutions
        return [(self.input_width, self.input_height)] + [(extra[i], extra[i + 1]) for i in range(0, len(extra), 2)]

    @classmethod
    def from_preset(cls, name, **overrides):
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], "preset": name, **overrides})


class RunConfig(NamedTuple):
    model: ModelConfig
    train: TrainConfig
    aug: AugmentationSpec


def _model_keys():
    return {f.name: f for f in fields(ModelConfig)}


def _train_keys():
    return {f.name: f for f in fields(TrainConfig) if f.name != "loss"}


def _loss_keys():
    return {f.name: f for f in fields(LossWeights)}


def _aug_keys():
    return {("aug_seed" if f.name == "seed" else f.name): f for f in fields(AugmentationSpec)}


def known_keys():
    return sorted(set(_model_keys()) | set(_train_keys()) | set(_loss_keys()) | set(_aug_keys()))


def _convert(key, raw, default):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_overrides(lines):
    """Parse ``key = value`` lines into a dict of raw strings, rejecting unknown keys."""
    out = {}
    valid = set(known_keys()) | set(RAW_ONLY_KEYS)
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise FormatError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in text.split("=", 1))
        if key not in valid:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        out[key] = value
    return out


def build_config(raw):
    """Turn a raw ``key -> string`` dict into a :class:`RunConfig`."""
    preset = raw.get("preset", DEFAULT_PRESET)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    base = raw.get("model", "reference")
    if base not in MODEL_PRESETS:
        raise ConfigError(f"unknown model {base!r}; choose from {sorted(MODEL_PRESETS)}")
    m_defaults, t_defaults = MODEL_PRESETS[base](), TrainConfig.from_preset(preset)
    l_defaults, a_defaults = LossWeights(), AugmentationSpec()
    groups = {"model": {}, "train": {}, "loss": {}, "aug": {}}
    for key, value in raw.items():
        if key in RAW_ONLY_KEYS:
            continue
        if key in _model_keys():
            groups["model"][key] = _convert(key, value, getattr(m_defaults, key))
        elif key in _train_keys():
            groups["train"][key] = _convert(key, value, getattr(t_defaults, key))
        elif key in _loss_keys():
            groups["loss"][key] = _convert(key, value, getattr(l_defaults, key))
        elif key in _aug_keys():
            name = "seed" if key == "aug_seed" else key
            groups["aug"][name] = _convert(key, value, getattr(a_defaults, name))
    try:
        model = replace(m_defaults, **groups["model"])
        loss = replace(l_defaults, **groups["loss"])
        train = replace(t_defaults, loss=loss, **groups["train"])
        aug = replace(a_defaults, **groups["aug"])
    except ConfigError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    return RunConfig(model, train, aug)


def parse_config(text):
    return build_config(parse_overrides(text.splitlines()))


def load_config(path, overrides=()):
    """Read a config file (or defaults for ``None``) and apply ``key=value`` overrides."""
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw = parse_overrides(fh.read().splitlines())
    raw.update(parse_overrides(overrides))
    return build_config(raw)


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_items(cfg):
    """Sorted ``(key, value-string)`` pairs for every resolved setting."""
    items = {}
    for f in fields(ModelConfig):
        items[f.name] = _fmt(getattr(cfg.model, f.name))
    for f in fields(TrainConfig):
        if f.name != "loss":
            items[f.name] = _fmt(getattr(cfg.train, f.name))
    for f in fields(LossWeights):
        items[f.name] = _fmt(getattr(cfg.train.loss, f.name))
    for f in fields(AugmentationSpec):
        items["aug_seed" if f.name == "seed" else f.name] = _fmt(getattr(cfg.aug, f.name))
    return sorted(items.items())


def serialize_config(cfg):
    return "".join(f"{k} = {v}\n" for k, v in config_items(cfg))
