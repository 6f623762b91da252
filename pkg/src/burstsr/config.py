"""TOML run configuration with [data], [model], [train] and [eval] sections.

``--set section.key=value`` overrides are parsed as TOML values, falling back
to a bare string. ``BURSTSR_SEED`` overrides every seed.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .model import ModelConfig, preset_config
from .raw_pipeline import BurstConfig
from .training import TrainConfig

SECTIONS = ("data", "model", "train", "eval")


@dataclass
class DataSection:
    burst: BurstConfig = field(default_factory=BurstConfig)
    procedural: int = 0
    hr_size: int = 0
    rgb_dir: str = ""
    out_dir: str = "data/train"


@dataclass
class EvalSection:
    data_dir: str = "data/train"
    checkpoint: str = ""
    report: str = ""


@dataclass
class RunConfig:
    data: DataSection
    model: ModelConfig
    train: TrainConfig
    eval: EvalSection


def parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or section not in SECTIONS or not name:
            raise ConfigError(f"override {item!r} must look like section.key=value with section in {SECTIONS}")
        raw.setdefault(section, {})[name] = parse_value(value.strip())
    return raw


def _split(raw: dict, cls, section: str) -> tuple[dict, dict]:
    known = {f.name for f in fields(cls)}
    return {k: v for k, v in raw.items() if k in known}, {k: v for k, v in raw.items() if k not in known}


def build_config(raw: dict) -> RunConfig:
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    seed_env = os.environ.get("BURSTSR_SEED")

    data_raw = dict(raw.get("data", {}))
    burst_kw, rest = _split(data_raw, BurstConfig, "data")
    data_kw, bad = _split(rest, DataSection, "data")
    if bad:
        raise ConfigError(f"unknown [data] keys: {sorted(bad)}")
    for k in ("read_sigma_range", "shot_gain_range", "red_gain_range", "blue_gain_range"):
        if k in burst_kw:
            burst_kw[k] = tuple(burst_kw[k])
    if seed_env is not None:
        burst_kw["seed"] = int(seed_env)
    burst = BurstConfig(**burst_kw)
    burst.validate()
    data = DataSection(burst=burst, **data_kw)

    model_raw = dict(raw.get("model", {}))
    preset = model_raw.pop("preset", "tiny")
    model = preset_config(preset, **model_raw)

    train_raw = dict(raw.get("train", {}))
    if seed_env is not None:
        train_raw["seed"] = int(seed_env)
    train = TrainConfig.from_dict(train_raw)
    train.validate()

    eval_kw, bad = _split(dict(raw.get("eval", {})), EvalSection, "eval")
    if bad:
        raise ConfigError(f"unknown [eval] keys: {sorted(bad)}")
    return RunConfig(data, model, train, EvalSection(**eval_kw))


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    raw: dict = {}
    if path:
        try:
            raw = tomllib.loads(Path(path).read_text())
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return build_config(apply_overrides(raw, overrides or []))
