"""Connected-component size filtering and ratio-based label redefinition.

The pipeline order is fixed: small components are removed first, then the
ratio rules are applied in the order given.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Iterable, Mapping

import numpy as np

from . import kernels
from .core import (
    ED,
    ET_LABEL,
    LABEL_CODES,
    LABEL_SETS,
    NCR,
    BinaryMask,
    LabelVolume,
    VolumeGeometry,
    label_set_mask,
)
from .errors import ConfigError

CONNECTIVITIES = (6, 18, 26)


def _check_connectivity(connectivity) -> int:
    if connectivity not in CONNECTIVITIES:
        raise ConfigError(f"connectivity must be one of {CONNECTIVITIES}, got {connectivity!r}")
    return int(connectivity)


@dataclass(frozen=True, eq=False)
class ComponentLabeling:
    geometry: VolumeGeometry
    ids: np.ndarray
    sizes: np.ndarray  # sizes[i] is the voxel count of component i + 1
    connectivity: int

    @property
    def n(self) -> int:
        return len(self.sizes)


def label_array(voxels: np.ndarray, connectivity: int = 26) -> tuple[np.ndarray, np.ndarray]:
    """Component ids and sizes for a boolean array."""
    ids, n = kernels.label_components(voxels, _check_connectivity(connectivity))
    sizes = np.bincount(ids.ravel(), minlength=n + 1)[1:] if n else np.zeros(0, dtype=np.int64)
    return ids, sizes


def connected_components(mask: BinaryMask, connectivity: int = 26) -> ComponentLabeling:
    ids, sizes = label_array(mask.voxels, connectivity)
    ids.setflags(write=False)
    return ComponentLabeling(mask.geometry, ids, sizes, connectivity)


def dilate(mask: BinaryMask, radius: int) -> BinaryMask:
    """Dilation with a (2r+1)^3 cube, i.e. Chebyshev distance <= radius."""
    if radius < 0:
        raise ConfigError(f"dilation radius must be non-negative, got {radius}")
    return BinaryMask(mask.geometry, kernels.dilate_cube(mask.voxels, int(radius)))


def small_component_mask(ids: np.ndarray, sizes: np.ndarray, min_size: int) -> np.ndarray:
    """Voxels belonging to components with fewer than ``min_size`` voxels."""
    small = np.concatenate([[False], sizes < min_size])
    return small[ids]


# Per-region mode: region -> label that removed voxels are demoted to.
# Demoting to the enclosing region's label keeps ET <= TC <= WT intact.
_REGION_DEMOTION = (("WT", 0), ("TC", ED), ("ET", NCR))


def filter_small_components(
    labels: LabelVolume, min_size: int, connectivity: int = 26, per_region: bool = False
) -> LabelVolume:
    """Remove connected components smaller than ``min_size`` voxels.

    By default components are taken over the whole-tumor foreground and small
    islands become background. With ``per_region=True`` the filter is run on
    WT, TC and ET in turn; a small TC island is demoted to ED and a small ET
    island to NCR.
    """
    if min_size < 0:
        raise ConfigError(f"min_size must be non-negative, got {min_size}")
    connectivity = _check_connectivity(connectivity)
    if min_size == 0:
        return labels
    if not per_region:
        ids, sizes = label_array(labels.voxels > 0, connectivity)
        out = labels.voxels.copy()
        out[small_component_mask(ids, sizes, min_size)] = 0
        return labels.replace(out)
    out = labels.voxels.copy()
    for name, demote_to in _REGION_DEMOTION:
        ids, sizes = label_array(label_set_mask(out, name), connectivity)
        if len(sizes) and sizes.min() < min_size:
            out[small_component_mask(ids, sizes, min_size)] = demote_to
    return labels.replace(out)


@dataclass(frozen=True)
class RatioRule:
    """Rewrite ``source`` to ``target`` when |numerator| / |denominator| < threshold."""

    numerator: str
    denominator: str
    threshold: float
    source: int
    target: int

    def __post_init__(self):
        num, den = str(self.numerator).upper(), str(self.denominator).upper()
        for name in (num, den):
            if name not in LABEL_SETS:
                raise ConfigError(f"unknown region {name!r} in ratio rule; expected one of {sorted(LABEL_SETS)}")
        if not LABEL_SETS[num] <= LABEL_SETS[den]:
            raise ConfigError(f"ratio rule {num}/{den} violates region nesting ({num} is not inside {den})")
        if not 0.0 <= float(self.threshold) <= 1.0:
            raise ConfigError(f"ratio threshold must lie in [0, 1], got {self.threshold}")
        source, target = int(self.source), int(self.target)
        if source not in LABEL_CODES or target not in LABEL_CODES:
            raise ConfigError(f"ratio rule labels must be in {LABEL_CODES}, got {source} -> {target}")
        if source == target:
            raise ConfigError("ratio rule source and target labels must differ")
        object.__setattr__(self, "numerator", num)
        object.__setattr__(self, "denominator", den)
        object.__setattr__(self, "threshold", float(self.threshold))
        object.__setattr__(self, "source", source)
        object.__setattr__(self, "target", target)

    @property
    def name(self) -> str:
        return f"{self.numerator}/{self.denominator}"

    def fires(self, voxels: np.ndarray) -> bool:
        den = int(np.count_nonzero(label_set_mask(voxels, self.denominator)))
        if den == 0:
            return False
        num = int(np.count_nonzero(label_set_mask(voxels, self.numerator)))
        return num / den < self.threshold


def ratio_relabel(labels: LabelVolume, rules: Iterable[RatioRule]) -> LabelVolume:
    out = None
    for rule in rules:
        current = labels.voxels if out is None else out
        if rule.fires(current):
            if out is None:
                out = labels.voxels.copy()
            out[out == rule.source] = rule.target
    return labels if out is None else labels.replace(out)


ET_WT_RULE = RatioRule("ET", "WT", 0.04, ET_LABEL, NCR)
ED_WT_RULE = RatioRule("ED", "WT", 1.00, ED, NCR)


@dataclass(frozen=True)
class PostprocessConfig:
    min_component_size: int = 0
    connectivity: int = 26
    rules: tuple[RatioRule, ...] = ()
    per_region: bool = False

    def __post_init__(self):
        if int(self.min_component_size) < 0:
            raise ConfigError(f"min_component_size must be non-negative, got {self.min_component_size}")
        _check_connectivity(self.connectivity)
        rules = tuple(r if isinstance(r, RatioRule) else RatioRule(**r) for r in self.rules)
        object.__setattr__(self, "min_component_size", int(self.min_component_size))
        object.__setattr__(self, "rules", rules)

    @classmethod
    def preset(cls, name: str) -> "PostprocessConfig":
        try:
            return PRESETS[name.lower()]
        except KeyError:
            raise ConfigError(f"unknown post-processing preset {name!r}; expected one of {sorted(PRESETS)}") from None

    @classmethod
    def from_mapping(cls, data: Mapping, base: "PostprocessConfig | None" = None) -> "PostprocessConfig":
        """Build from a parsed TOML/JSON table, optionally layered over ``base``."""
        data = dict(data)
        preset = data.pop("preset", None)
        if preset is not None:
            base = cls.preset(preset)
        base = base or cls()
        known = {"min_component_size", "connectivity", "rules", "per_region"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown post-processing option(s): {sorted(unknown)}")
        if "rules" in data:
            data["rules"] = tuple(RatioRule(**r) for r in data["rules"])
        return replace(base, **data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rules"] = [asdict(r) for r in self.rules]
        return d

    def with_rule_threshold(self, numerator: str, denominator: str, threshold: float) -> "PostprocessConfig":
        """Copy with the threshold of the matching rule replaced."""
        num, den = numerator.upper(), denominator.upper()
        rules, found = [], False
        for r in self.rules:
            if r.numerator == num and r.denominator == den:
                r, found = replace(r, threshold=threshold), True
            rules.append(r)
        if not found:
            raise ConfigError(f"config has no {num}/{den} rule")
        return replace(self, rules=tuple(rules))


PRESETS: dict[str, PostprocessConfig] = {
    "ped": PostprocessConfig(130, 26, (ET_WT_RULE, ED_WT_RULE)),
    "men": PostprocessConfig(110, 26),
    "met": PostprocessConfig(15, 26),
}


def postprocess(labels: LabelVolume, config: PostprocessConfig) -> LabelVolume:
    out = filter_small_components(labels, config.min_component_size, config.connectivity, config.per_region)
    return ratio_relabel(out, config.rules)
