"""Run configuration: INI-style ``key = value`` sections, strictly validated.

Sections: ``[data]`` (generator), ``[model]``, ``[train]``, ``[ablation]``.
Unknown sections or keys are rejected so that every value in effect is the
one written in the echoed config.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields

from .model import ModelConfig
from .synthscene import SceneConfig


class ConfigError(ValueError):
    pass


# model fields owned by [data] and [ablation]
_MODEL_DERIVED = ("image_size", "channels", "proto", "tamg", "det_guided", "align")


@dataclass
class DataConfig:
    n_pairs: int = 512
    seed: int = 0
    mix: str = ""          # e.g. "none=0.26,add_block=0.25,remove_block=0.25,recolor_region=0.24"
    size: int = 32
    channels: int = 3
    min_side: int = 4
    max_side: int = 9
    static_blocks: int = 2
    noise: float = 0.0

    def scene(self) -> SceneConfig:
        return SceneConfig(size=self.size, channels=self.channels, min_side=self.min_side,
                           max_side=self.max_side, static_blocks=self.static_blocks, noise=self.noise)

    def mix_dict(self):
        return parse_mix(self.mix) if self.mix else None


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    lr: float = 2e-3
    lr_slow: float = 5e-4
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0
    dwa_temperature: float = 2.0
    align_weight: float = 0.3
    tau_proto: float = 1.0
    sigma: float = 2.0
    lr_schedule: str = "cosine"   # or "constant"
    augment: str = "dihedral,swap"   # comma list, or "none"
    proto_init: str = "cluster"   # or "random"
    eval_every: int = 0


@dataclass
class AblationConfig:
    proto: bool = True
    tamg: bool = True
    det_guided: bool = True
    align: bool = True


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def model_config(self) -> ModelConfig:
        """Model config with the ablation switches applied."""
        return dataclasses.replace(self.model, proto=self.ablation.proto, tamg=self.ablation.tamg,
                                   det_guided=self.ablation.det_guided, align=self.ablation.align,
                                   image_size=self.data.size, channels=self.data.channels)

    def to_dict(self):
        return {"data": dataclasses.asdict(self.data),
                "model": {k: v for k, v in dataclasses.asdict(self.model).items()
                          if k not in _MODEL_DERIVED},
                "train": dataclasses.asdict(self.train),
                "ablation": dataclasses.asdict(self.ablation)}

    @classmethod
    def from_dict(cls, d):
        cfg = cls()
        for section, values in d.items():
            target = _section(cfg, section)
            for key, val in values.items():
                _assign(target, section, key, val)
        return cfg

    def dumps(self) -> str:
        cp = configparser.ConfigParser()
        for section, values in self.to_dict().items():
            cp[section] = {k: _fmt(v) for k, v in values.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _section(cfg, name):
    if name not in ("data", "model", "train", "ablation"):
        raise ConfigError(f"unknown config section [{name}]")
    return getattr(cfg, name)


def _assign(target, section, key, raw):
    known = {f.name: f for f in fields(target)}
    if section == "model" and key in _MODEL_DERIVED:
        raise ConfigError(f"{key!r} is set in [data] or [ablation], not [model]")
    if key not in known:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    current = getattr(target, key)
    try:
        setattr(target, key, _coerce(raw, current))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}: {exc}") from None


def _coerce(raw, current):
    if not isinstance(raw, str):
        if isinstance(current, tuple):
            return tuple(raw)
        return raw
    s = raw.strip()
    if isinstance(current, bool):
        low = s.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if isinstance(current, int):
        return int(s)
    if isinstance(current, float):
        return float(s)
    if isinstance(current, tuple):
        return tuple(int(x) for x in s.split(","))
    return s


def loads(text: str) -> RunConfig:
    cp = configparser.ConfigParser(default_section="__none__")
    cp.read_string(text)
    cfg = RunConfig()
    for section in cp.sections():
        target = _section(cfg, section)
        for key, val in cp[section].items():
            _assign(target, section, key, val)
    return cfg


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def parse_mix(text: str) -> dict:
    from .synthscene import CHANGE_TYPES

    out = {}
    for part in text.split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise ConfigError(f"bad mix entry {part!r}; expected type=weight")
        k, v = part.split("=", 1)
        k = k.strip()
        if k not in CHANGE_TYPES:
            raise ConfigError(f"unknown change type {k!r} in mix")
        w = float(v)
        if w < 0:
            raise ConfigError("mix weights must be non-negative")
        out[k] = w
    if not out or sum(out.values()) <= 0:
        raise ConfigError("mix has no positive weight")
    return out
