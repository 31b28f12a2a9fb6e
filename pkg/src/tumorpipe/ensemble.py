"""Region-wise fusion of per-model, per-fold probability outputs.

Fusion happens in region-probability space (ET, TC, WT). Label-softmax members
are converted first; region-sigmoid members are used as they are; single-region
members (a model trained on ET alone) only feed their own region.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from .core import (
    PROB_DTYPE,
    REGIONS,
    LabelProbVolume,
    Region,
    RegionProbVolume,
    SingleRegionProb,
    as_region,
    check_same_geometry,
    label_probs_to_region_probs,
)
from .errors import ConfigError, MissingInputError

log = logging.getLogger(__name__)

Payload = Union[RegionProbVolume, LabelProbVolume, SingleRegionProb]

# voxels per block when averaging; bounds the (members x block) scratch buffer
_BLOCK = 1 << 20


@dataclass(frozen=True)
class MemberOutput:
    model: str
    fold: int
    payload: Payload

    @property
    def geometry(self):
        return self.payload.geometry

    def region_channel(self, region: Region) -> np.ndarray:
        p = self.payload
        if isinstance(p, SingleRegionProb):
            if p.region != region:
                raise ConfigError(f"member {self.model}/{self.fold} only provides {p.region}, not {region}")
            return p.values
        if isinstance(p, LabelProbVolume):
            p = label_probs_to_region_probs(p)
        return p.channel(region)


@dataclass(frozen=True)
class EnsembleConfig:
    """Per-region (model id, weight) sources and the expected fold count per model."""

    sources: Mapping[Region, tuple[tuple[str, float], ...]]
    k: int = 5

    def __post_init__(self):
        clean = {}
        for region in REGIONS:
            srcs = self.sources.get(region, self.sources.get(region.value, ()))
            srcs = tuple((str(m), float(w)) for m, w in srcs)
            if not srcs:
                raise ConfigError(f"ensemble config has no source for region {region}")
            if any(w <= 0 for _, w in srcs):
                raise ConfigError(f"ensemble weights must be positive (region {region})")
            if len({m for m, _ in srcs}) != len(srcs):
                raise ConfigError(f"duplicate model in sources of region {region}")
            clean[region] = srcs
        extra = {str(k) for k in self.sources} - {r.value for r in REGIONS} - set(REGIONS)
        if extra:
            raise ConfigError(f"unknown region(s) in ensemble config: {sorted(extra)}")
        if int(self.k) < 1:
            raise ConfigError("k must be at least 1")
        object.__setattr__(self, "sources", clean)
        object.__setattr__(self, "k", int(self.k))

    @classmethod
    def preset(cls, name: str, k: int = 5) -> "EnsembleConfig":
        name = name.lower()
        if name not in ENSEMBLE_PRESETS:
            raise ConfigError(f"unknown ensemble preset {name!r}; expected one of {sorted(ENSEMBLE_PRESETS)}")
        return cls(ENSEMBLE_PRESETS[name], k)

    @classmethod
    def from_mapping(cls, data: Mapping) -> "EnsembleConfig":
        """Parse ``{"preset": "ped"}`` or ``{"regions": {"ET": [["swin", 1.0], ...], ...}, "k": 5}``."""
        k = int(data.get("k", 5))
        if "regions" in data:
            table = {}
            for region, srcs in data["regions"].items():
                parsed = []
                for s in srcs:
                    if isinstance(s, str):
                        parsed.append((s, 1.0))
                    elif isinstance(s, Mapping):
                        parsed.append((s["model"], s.get("weight", 1.0)))
                    else:
                        parsed.append((s[0], s[1] if len(s) > 1 else 1.0))
                table[as_region(region)] = tuple(parsed)
            return cls(table, k)
        if "preset" in data:
            return cls.preset(data["preset"], k)
        raise ConfigError("ensemble config needs either 'preset' or 'regions'")

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "regions": {r.value: [[m, w] for m, w in self.sources[r]] for r in REGIONS},
        }


NNUNET, SWIN, NNUNET_ET = "nnunet", "swin", "nnunet-et-only"

_both = ((NNUNET, 1.0), (SWIN, 1.0))
ENSEMBLE_PRESETS = {
    "ped": {Region.ET: ((NNUNET_ET, 1.0), (SWIN, 1.0)), Region.TC: _both, Region.WT: _both},
    "men": {Region.ET: _both, Region.TC: _both, Region.WT: _both},
    "met": {Region.ET: ((NNUNET, 1.0),), Region.TC: ((NNUNET, 1.0),), Region.WT: ((NNUNET, 1.0),)},
}


def _weighted_mean(arrays: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted mean over members, independent of member order.

    Products are sorted per voxel before summation so that the floating-point
    result does not depend on the order of ``arrays``; the result is clipped
    into the per-voxel [min, max] of the members.
    """
    shape = arrays[0].shape
    w = np.asarray(weights, dtype=np.float64)
    total_w = float(np.sum(np.sort(w)))
    flat = [np.asarray(a).reshape(-1) for a in arrays]
    out = np.empty(flat[0].size, dtype=PROB_DTYPE)
    if len(flat) == 1:
        out[:] = flat[0]
        return out.reshape(shape)
    for start in range(0, out.size, _BLOCK):
        stop = min(start + _BLOCK, out.size)
        block = np.stack([f[start:stop] for f in flat]).astype(np.float64)
        prod = np.sort(block * w[:, None], axis=0)
        mean = prod.sum(axis=0) / total_w
        out[start:stop] = np.clip(mean, block.min(axis=0), block.max(axis=0))
    return out.reshape(shape)


def ensemble_mean(members: Sequence[RegionProbVolume], weights: Sequence[float] | None = None) -> RegionProbVolume:
    if not members:
        raise ConfigError("ensemble_mean needs at least one member")
    weights = [1.0] * len(members) if weights is None else [float(w) for w in weights]
    if len(weights) != len(members):
        raise ConfigError(f"{len(weights)} weights given for {len(members)} members")
    if any(not np.isfinite(w) or w <= 0 for w in weights):
        raise ConfigError("ensemble weights must be positive")
    check_same_geometry(*(m.geometry for m in members), what="ensemble members")
    fused = _weighted_mean([m.channels for m in members], weights)
    return RegionProbVolume(members[0].geometry, fused)


def fuse_case(config: EnsembleConfig, members: Sequence[MemberOutput]) -> RegionProbVolume:
    """Fuse one case's members according to ``config``.

    Every region channel is the weighted mean over all (model, fold) members of
    that region's source models. Members of models not named for a region are
    ignored for it.
    """
    if not members:
        raise MissingInputError("no ensemble members given")
    check_same_geometry(*(m.geometry for m in members), what="ensemble members")
    by_model: dict[str, list[MemberOutput]] = {}
    for m in sorted(members, key=lambda m: (m.model, m.fold)):
        by_model.setdefault(m.model, []).append(m)
    for model, ms in by_model.items():
        folds = [m.fold for m in ms]
        if len(set(folds)) != len(folds):
            raise ConfigError(f"model {model!r} has duplicate fold indices {folds}")

    used = {m for srcs in config.sources.values() for m, _ in srcs}
    for model in sorted(used):
        if model not in by_model:
            raise MissingInputError(f"no members for model {model!r} required by the ensemble config")
        n = len(by_model[model])
        if n != config.k:
            warnings.warn(f"model {model!r} has {n} fold(s), expected {config.k}; averaging those present", stacklevel=2)

    geometry = members[0].geometry
    channels = []
    for region in REGIONS:
        arrays, weights = [], []
        for model, w in config.sources[region]:
            for m in by_model[model]:
                arrays.append(m.region_channel(region))
                weights.append(w)
        channels.append(_weighted_mean(arrays, weights))
    return RegionProbVolume(geometry, np.stack(channels))


@dataclass(frozen=True)
class ManifestEntry:
    case: str
    model: str
    fold: int
    path: str | tuple[str, ...]
    region: str | None = None  # set for single-region members


@dataclass(frozen=True)
class Manifest:
    config: EnsembleConfig
    entries: tuple[ManifestEntry, ...] = field(default_factory=tuple)

    def cases(self) -> list[str]:
        return sorted({e.case for e in self.entries})

    def for_case(self, case: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.case == case]


def load_manifest(path, preset: str | None = None, config: EnsembleConfig | None = None) -> Manifest:
    """Read a JSON member manifest.

    Either a list of ``{model, fold, path}`` objects (``case`` optional, ``path``
    may be a list of per-channel files, ``region`` marks a single-region file)
    or an object with ``members`` plus ``preset`` / ``regions`` / ``k``.
    Relative paths resolve against the manifest's directory. An explicit
    ``config`` (or ``preset``) takes precedence over what the file declares.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"{path}: manifest not found")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(data, list):
        data = {"members": data}
    cfg_data = {k: data[k] for k in ("preset", "regions", "k") if k in data}
    if preset is not None:
        cfg_data.pop("regions", None)
        cfg_data["preset"] = preset
    if config is None:
        config = EnsembleConfig.from_mapping(cfg_data)
    base = path.parent
    entries = []
    for item in data.get("members", []):
        try:
            raw = item["path"]
            model, fold = str(item["model"]), int(item["fold"])
        except KeyError as exc:
            raise ConfigError(f"{path}: manifest member missing field {exc}") from None
        paths = tuple(str(base / p) for p in raw) if isinstance(raw, list) else str(base / raw)
        entries.append(ManifestEntry(str(item.get("case", "case")), model, fold, paths, item.get("region")))
    if not entries:
        raise ConfigError(f"{path}: manifest lists no members")
    return Manifest(config, tuple(entries))


def load_members(entries: Sequence[ManifestEntry]) -> list[MemberOutput]:
    from .io_nifti import read_channel_volume, read_prob_volume

    out = []
    for e in entries:
        if e.region is not None:
            payload = read_channel_volume(e.path, e.region)
        else:
            payload = read_prob_volume(e.path)
        out.append(MemberOutput(e.model, e.fold, payload))
    return out
