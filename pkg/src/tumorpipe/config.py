"""Run configuration: presets, TOML/JSON config files and command-line overrides.

Precedence is flags > config file > preset.
"""
from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import DEFAULT_SCHEMA, ED, ET_LABEL, NCR, LabelSchema
from .ensemble import EnsembleConfig
from .errors import ConfigError, MissingInputError, TumorPipeError
from .metrics import LesionwiseParams
from .postprocess import PostprocessConfig, RatioRule

OUT_ENV = "TUMORPIPE_OUT"
DEFAULT_OUT = "tumorpipe-out"
PRESET_NAMES = ("ped", "men", "met", "custom")


def load_table(path) -> dict:
    """Parse a ``.toml`` or ``.json`` file into a dict."""
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"{path}: config file not found")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".toml":
            return tomllib.loads(text)
        return json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse config ({exc})") from exc


@dataclass(frozen=True)
class DecodeThresholds:
    t_wt: float = 0.5
    t_tc: float = 0.5
    t_et: float = 0.5

    def __post_init__(self):
        for name in ("t_wt", "t_tc", "t_et"):
            v = float(getattr(self, name))
            if not 0.0 < v < 1.0:
                raise ConfigError(f"decode threshold {name} must lie in (0, 1), got {v}")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class RunConfig:
    preset: str = "custom"
    manifest: str | None = None
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    metrics: LesionwiseParams = field(default_factory=LesionwiseParams)
    ensemble: EnsembleConfig | None = None
    decode: DecodeThresholds = field(default_factory=DecodeThresholds)
    schema: LabelSchema = DEFAULT_SCHEMA
    out: str = DEFAULT_OUT
    jobs: int = 1

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "manifest": self.manifest,
            "postprocess": self.postprocess.to_dict(),
            "metrics": vars(self.metrics).copy(),
            "ensemble": self.ensemble.to_dict() if self.ensemble else None,
            "decode": vars(self.decode).copy(),
            "labels": {str(k): v for k, v in self.schema.file_to_canonical.items()},
            "out": self.out,
            "jobs": self.jobs,
        }


def _set_rule(cfg: PostprocessConfig, numerator: str, source: int, threshold: float) -> PostprocessConfig:
    try:
        return cfg.with_rule_threshold(numerator, "WT", threshold)
    except ConfigError:
        return replace(cfg, rules=cfg.rules + (RatioRule(numerator, "WT", threshold, source, NCR),))


def resolve(
    preset: str | None = None,
    config_path=None,
    overrides: Mapping | None = None,
) -> RunConfig:
    """Merge preset, config file and flag overrides into one RunConfig.

    ``overrides`` keys: out, jobs, manifest, min_size, et_wt, ed_wt, connectivity.
    ``None`` values are ignored.
    """
    try:
        return _resolve(preset, config_path, overrides)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, TumorPipeError):
            raise
        raise ConfigError(f"invalid configuration: {exc}") from exc


def _resolve(preset, config_path, overrides) -> RunConfig:
    table = load_table(config_path) if config_path else {}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    name = (preset or table.get("preset") or "custom").lower()
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESET_NAMES}")

    pp = PostprocessConfig() if name == "custom" else PostprocessConfig.preset(name)
    ens = None if name == "custom" else EnsembleConfig.preset(name)
    if "postprocess" in table:
        pp = PostprocessConfig.from_mapping(table["postprocess"], base=pp)
    if "ensemble" in table:
        ens = EnsembleConfig.from_mapping(table["ensemble"])
    metrics = LesionwiseParams.from_mapping(table.get("metrics", {}))
    decode = DecodeThresholds(**table.get("decode", {}))
    schema = LabelSchema.from_names(table["labels"]) if "labels" in table else DEFAULT_SCHEMA
    out = table.get("out") or os.environ.get(OUT_ENV) or DEFAULT_OUT
    jobs = int(table.get("jobs", os.cpu_count() or 1))
    manifest = table.get("manifest")

    if "min_size" in overrides:
        pp = replace(pp, min_component_size=int(overrides["min_size"]))
    if "connectivity" in overrides:
        pp = replace(pp, connectivity=int(overrides["connectivity"]))
        metrics = replace(metrics, connectivity=int(overrides["connectivity"]))
    if "et_wt" in overrides:
        pp = _set_rule(pp, "ET", ET_LABEL, float(overrides["et_wt"]))
    if "ed_wt" in overrides:
        pp = _set_rule(pp, "ED", ED, float(overrides["ed_wt"]))
    out = overrides.get("out", out)
    jobs = int(overrides.get("jobs", jobs))
    manifest = overrides.get("manifest", manifest)
    if jobs < 1:
        raise ConfigError("jobs must be at least 1")
    return RunConfig(name, manifest, pp, metrics, ens, decode, schema, str(out), jobs)
