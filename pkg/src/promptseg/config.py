"""Run configuration: built-in defaults < TOML config file < command-line flags.

Example file::

    schema_version = 1
    seed = 7
    format = "nifti1"

    [synthesis]
    preset = "desk"
    blur_sigma_mm = 2.0

    [train]
    budgets = [20, 10, 5]

Unknown keys anywhere are an error.
"""

from __future__ import annotations

import copy
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .pasting import MIN_LABEL_VOXELS
from .refseg import TrainConfig
from .selection import DEFAULT_BUDGETS
from .synthesis import SynthesisConfig
from .volume import PhantomSpec

SCHEMA_VERSION = 1
PRESETS = {"tumor": SynthesisConfig.tumor, "stroke": SynthesisConfig.stroke, "desk": SynthesisConfig.desk}


class ConfigError(ValueError):
    pass


def _train_defaults() -> dict[str, Any]:
    d = asdict(TrainConfig())
    d.pop("budget")
    d.pop("seed")
    d["class_ratio"] = list(d["class_ratio"])
    d["budgets"] = list(DEFAULT_BUDGETS)
    return d


def _phantom_defaults() -> dict[str, Any]:
    d = asdict(PhantomSpec())
    d.pop("seed")
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def defaults() -> dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": 0,
        "format": "nifti1",
        "synthesis": {"preset": "tumor"},
        "phantom": _phantom_defaults(),
        "train": _train_defaults(),
        "paste": {
            "uses_per_pseudo_label": 2,
            "uses_per_tumor_free": 1,
            "renormalize": False,
            "min_label_voxels": MIN_LABEL_VOXELS,
        },
        "predict": {"prob_threshold": 0.5},
    }


_SYNTH_KEYS = {f for f in SynthesisConfig.__dataclass_fields__} | {"preset"}


def _check_keys(cfg: dict, reference: dict, where: str = "") -> None:
    for key, value in cfg.items():
        path = f"{where}{key}"
        if key not in reference and not (where == "synthesis." and key in _SYNTH_KEYS):
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(value, dict):
            ref = reference.get(key, {})
            if key == "synthesis":
                ref = {k: None for k in _SYNTH_KEYS}
            _check_keys(value, ref, f"{path}.")


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        elif v is not None:
            out[k] = copy.deepcopy(v)
    return out


def load_config_file(path) -> dict:
    try:
        data = tomllib.loads(Path(path).read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version {version}, expected {SCHEMA_VERSION}")
    _check_keys(data, defaults())
    return data


def resolve(config_path=None, overrides: dict | None = None) -> dict:
    """Effective configuration: defaults, then file, then non-None overrides."""
    cfg = defaults()
    if config_path is not None:
        cfg = merge(cfg, load_config_file(config_path))
    if overrides:
        _check_keys(overrides, defaults())
        cfg = merge(cfg, overrides)
    return cfg


def synthesis_config(cfg: dict) -> SynthesisConfig:
    section = dict(cfg["synthesis"])
    preset = section.pop("preset", "tumor")
    if preset not in PRESETS:
        raise ConfigError(f"unknown synthesis preset {preset!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[preset]().to_dict()
    base.update(section)
    try:
        return SynthesisConfig.from_dict(base)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid synthesis configuration: {exc}") from exc


def train_config(cfg: dict, budget: int | None = None) -> TrainConfig:
    section = dict(cfg["train"])
    section.pop("budgets")
    section["class_ratio"] = tuple(section["class_ratio"])
    try:
        return TrainConfig(budget=budget or max(cfg["train"]["budgets"]), seed=int(cfg["seed"]), **section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train configuration: {exc}") from exc


def phantom_template(cfg: dict) -> PhantomSpec:
    section = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg["phantom"].items()}
    try:
        return PhantomSpec(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid phantom configuration: {exc}") from exc
