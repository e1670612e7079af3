"""Layered run configuration: defaults < profile file < command-line overrides.

Keys are dotted, ``section.field``, with sections ``model``, ``train`` and
``decode``. Profiles are INI files whose sections match; values are parsed as
JSON where possible (so ``true``, ``3e-5`` and ``[0.9, 0.999]`` work) and kept
as strings otherwise.
"""
from __future__ import annotations

import configparser
import copy
import json
from dataclasses import fields
from importlib import resources
from pathlib import Path
from typing import Any

from .decoding import DecodeConfig
from .model import ConfigError, ModelConfig
from .training import Ablations, TrainConfig

# derived from the data, never set by hand
DERIVED_MODEL_KEYS = ("vocab_size", "num_conditions")
ABLATION_KEYS = tuple(f.name for f in fields(Ablations))


def defaults() -> dict[str, dict[str, Any]]:
    model = ModelConfig(vocab_size=1).to_dict()
    for k in DERIVED_MODEL_KEYS:
        model.pop(k)
    model["ffn_size"] = None
    train = TrainConfig().to_dict()
    train.update(train.pop("ablations"))
    train["adam_betas"] = list(train["adam_betas"])
    decode = DecodeConfig().__dict__.copy()
    return {"model": model, "train": train, "decode": decode}


def parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def bundled_profiles() -> list[str]:
    root = resources.files("condgen") / "profiles"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".cfg"))


def read_profile(name_or_path: str) -> dict[str, dict[str, Any]]:
    path = Path(name_or_path)
    if path.is_file():
        text = path.read_text(encoding="utf-8")
    else:
        res = resources.files("condgen") / "profiles" / f"{name_or_path}.cfg"
        if not res.is_file():
            raise ConfigError(f"profile {name_or_path!r} is neither a file nor a bundled profile {bundled_profiles()}")
        text = res.read_text(encoding="utf-8")
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser.read_string(text)
    return {sec: {k: parse_value(v) for k, v in parser[sec].items()} for sec in parser.sections()}


class RunConfig:
    """Merged configuration. ``data`` is the nested dict persisted verbatim."""

    def __init__(self, data: dict[str, dict[str, Any]] | None = None):
        self.data = data if data is not None else defaults()

    @classmethod
    def build(cls, profile: str | None = None, overrides: list[str] | None = None,
              extra: dict[str, Any] | None = None, base: "RunConfig | None" = None) -> "RunConfig":
        """``extra`` holds dotted keys from dedicated flags; they rank with ``overrides``.

        ``base`` replaces the built-in defaults, e.g. with a run's frozen config.
        """
        cfg = cls(copy.deepcopy(base.data)) if base else cls()
        if profile:
            for sec, values in read_profile(profile).items():
                for k, v in values.items():
                    cfg.set(f"{sec}.{k}", v)
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            cfg.set(key.strip(), parse_value(raw.strip()))
        for key, value in (extra or {}).items():
            cfg.set(key, value)
        return cfg

    def set(self, key: str, value: Any) -> None:
        sec, _, name = key.partition(".")
        if sec not in self.data or name not in self.data[sec]:
            raise ConfigError(f"unknown configuration key {key!r}")
        self.data[sec][name] = value

    def get(self, key: str) -> Any:
        sec, _, name = key.partition(".")
        try:
            return self.data[sec][name]
        except KeyError:
            raise ConfigError(f"unknown configuration key {key!r}") from None

    def model_config(self, vocab_size: int, num_conditions: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, num_conditions=num_conditions, **self.data["model"])

    def train_config(self) -> TrainConfig:
        t = copy.deepcopy(self.data["train"])
        abl = Ablations(**{k: bool(t.pop(k)) for k in ABLATION_KEYS})
        return TrainConfig(ablations=abl, **t)

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(**self.data["decode"])

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        cfg = cls()
        for sec, values in json.loads(text).items():
            for k, v in values.items():
                cfg.set(f"{sec}.{k}", v)
        return cfg
