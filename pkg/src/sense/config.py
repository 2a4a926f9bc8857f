"""Application configuration: defaults, YAML file, then command-line overrides.

Keys are dotted ``section.field`` names. Sections mirror the dataclasses
they feed (``backbone``, ``model``, ``train``, ``crf``) plus ``paths`` and
a top-level ``seed`` that drives every random stream. Unknown keys are
rejected, and every value is validated by building the dataclasses before
any work starts. ``provenance`` records where each key's value came from.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from sense.backbone import BackboneConfig
from sense.crf import CRFConfig
from sense.errors import ConfigError
from sense.model import ModelConfig
from sense.training import TrainConfig

_MODEL_KEYS = ("embed_dim", "sief_variant", "sf", "sdaf_variant", "decoder_heads", "mlp_ratio", "up_width",
               "gate_hidden")
_TRAIN_KEYS = ("batch_size", "lr", "betas", "weight_decay", "total_steps", "negative_fraction", "grad_clip")
_PATH_KEYS = ("manifest", "checkpoint", "out_dir", "disparity_root", "log")


def _defaults() -> dict[str, Any]:
    d: dict[str, Any] = {"seed": 0}
    for f in dataclasses.fields(BackboneConfig):
        if f.name != "seed":
            d[f"backbone.{f.name}"] = getattr(BackboneConfig(), f.name)
    model = ModelConfig.__dataclass_fields__
    for k in _MODEL_KEYS:
        d[f"model.{k}"] = model[k].default
    train = TrainConfig()
    for k in _TRAIN_KEYS:
        d[f"train.{k}"] = getattr(train, k)
    for f in dataclasses.fields(CRFConfig):
        d[f"crf.{f.name}"] = f.default
    for k in _PATH_KEYS:
        d[f"paths.{k}"] = None
    return d


DEFAULTS = _defaults()


def flatten(tree: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value: Any) -> Any:
    """Parse a command-line string into the type of the default value."""
    if not isinstance(value, str):
        return value
    default = DEFAULTS[key]
    if isinstance(default, str) or (default is None and key.startswith("paths.")):
        return value
    try:
        if isinstance(default, bool):
            return {"true": True, "false": False, "1": True, "0": False}[value.lower()]
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return yaml.safe_load(value)
    except (KeyError, ValueError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {key}={value!r} as {type(default).__name__}") from exc


@dataclass
class AppConfig:
    values: dict[str, Any] = field(default_factory=lambda: dict(DEFAULTS))
    provenance: dict[str, str] = field(default_factory=lambda: {k: "default" for k in DEFAULTS})

    def set(self, key: str, value: Any, source: str) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r} (from {source})")
        self.values[key] = _coerce(key, value)
        self.provenance[key] = source

    def update(self, items: Mapping[str, Any], source: str) -> "AppConfig":
        for k, v in items.items():
            self.set(k, v, source)
        return self

    @classmethod
    def load(cls, path=None, overrides: Mapping[str, Any] | None = None) -> "AppConfig":
        cfg = cls()
        if path:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}")
            try:
                tree = yaml.safe_load(p.read_text()) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"{p}: invalid YAML: {exc}") from exc
            if not isinstance(tree, Mapping):
                raise ConfigError(f"{p}: top level must be a mapping")
            cfg.update(flatten(tree), f"file:{p}")
        if overrides:
            cfg.update({k: v for k, v in overrides.items() if v is not None}, "flag")
        cfg.validate()
        return cfg

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def section(self, name: str) -> dict[str, Any]:
        n = len(name) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(name + ".")}

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(seed=0, **self.section("backbone"))

    def model(self) -> ModelConfig:
        return ModelConfig(backbone=self.backbone(), init_seed=int(self["seed"]), **self.section("model"))

    def train(self) -> TrainConfig:
        m = self.section("model")
        return TrainConfig(resolution=self["backbone.input_resolution"], sdaf_variant=m["sdaf_variant"],
                           sief_variant=m["sief_variant"], sf=m["sf"], seed=int(self["seed"]),
                           checkpoint_dir=self["paths.out_dir"], **self.section("train"))

    def crf(self) -> CRFConfig:
        return CRFConfig(**self.section("crf"))

    def validate(self) -> None:
        try:
            self.model()
            self.train()
            self.crf()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid configuration: {exc}") from exc
        if not isinstance(self["seed"], int):
            raise ConfigError(f"seed must be an integer, got {self['seed']!r}")

    def describe(self) -> str:
        """``key = value  # source`` lines for every non-default key."""
        return "\n".join(f"{k} = {self.values[k]!r}  # {self.provenance[k]}"
                         for k in sorted(self.values) if self.provenance[k] != "default")
