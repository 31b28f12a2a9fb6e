"""Volume containers, the label schema and ET/TC/WT region algebra.

Label codes follow the BraTS 2023 convention::

    0 background, 1 NCR (necrosis / non-enhancing core), 2 ED / SNFH, 3 ET

Regions are nested: ET = {3}, TC = {1, 3}, WT = {1, 2, 3}.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, GeometryMismatchError

BACKGROUND, NCR, ED, ET_LABEL = 0, 1, 2, 3
LABEL_CODES = (BACKGROUND, NCR, ED, ET_LABEL)
LABEL_NAMES = {BACKGROUND: "background", NCR: "NCR", ED: "ED", ET_LABEL: "ET"}

LABEL_DTYPE = np.uint8
PROB_DTYPE = np.float32


class Region(str, Enum):
    ET = "ET"
    TC = "TC"
    WT = "WT"

    def __str__(self) -> str:
        return self.value


REGIONS = (Region.ET, Region.TC, Region.WT)

# Label sets addressable by ratio rules. ED and NCR are single labels rather
# than evaluation regions, but the ED/WT rule needs ED as a numerator.
LABEL_SETS: dict[str, frozenset[int]] = {
    "ET": frozenset({ET_LABEL}),
    "TC": frozenset({NCR, ET_LABEL}),
    "WT": frozenset({NCR, ED, ET_LABEL}),
    "NCR": frozenset({NCR}),
    "ED": frozenset({ED}),
}


def as_region(value) -> Region:
    if isinstance(value, Region):
        return value
    try:
        return Region(str(value).upper())
    except ValueError:
        raise ConfigError(f"unknown region {value!r}; expected one of ET, TC, WT") from None


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class VolumeGeometry:
    """Grid shape, voxel spacing (mm) and voxel-to-world affine."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ConfigError(f"dims must be 3 positive integers, got {self.dims}")
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ConfigError(f"spacing must be 3 positive reals, got {self.spacing}")
        if self.affine is None:
            affine = np.diag(spacing + (1.0,))
        else:
            affine = np.array(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise ConfigError(f"affine must be 4x4, got shape {affine.shape}")
        if not np.allclose(affine[3], (0.0, 0.0, 0.0, 1.0)):
            raise ConfigError("affine last row must be (0, 0, 0, 1)")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", _frozen(affine))

    @classmethod
    def from_shape(cls, shape: Sequence[int], spacing=(1.0, 1.0, 1.0)) -> "VolumeGeometry":
        return cls(tuple(shape), tuple(spacing))

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def matches(self, other: "VolumeGeometry", atol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=atol)
            and np.allclose(self.affine, other.affine, rtol=0, atol=atol)
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, VolumeGeometry):
            return NotImplemented
        return self.matches(other)

    __hash__ = None


def check_same_geometry(*geoms: VolumeGeometry, what: str = "volumes") -> None:
    first = geoms[0]
    for g in geoms[1:]:
        if not first.matches(g):
            raise GeometryMismatchError(
                f"{what} have different geometry: dims {first.dims} vs {g.dims}, "
                f"spacing {first.spacing} vs {g.spacing}"
            )


def _check_shape(arr: np.ndarray, geometry: VolumeGeometry, what: str) -> None:
    if arr.shape != geometry.dims:
        raise GeometryMismatchError(f"{what} array shape {arr.shape} != geometry dims {geometry.dims}")


@dataclass(frozen=True, eq=False)
class LabelVolume:
    geometry: VolumeGeometry
    voxels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.voxels)
        if arr.dtype != LABEL_DTYPE:
            if arr.size and (arr.min() < 0 or arr.max() > 255 or not np.all(arr == np.round(arr))):
                raise ConfigError("label voxels must be small non-negative integers")
            arr = arr.astype(LABEL_DTYPE)
        else:
            arr = arr.copy()
        _check_shape(arr, self.geometry, "label")
        if arr.size and arr.max() > ET_LABEL:
            raise ConfigError(f"label code {int(arr.max())} outside {{0,1,2,3}}")
        object.__setattr__(self, "voxels", _frozen(arr))

    @classmethod
    def from_array(cls, voxels, spacing=(1.0, 1.0, 1.0)) -> "LabelVolume":
        voxels = np.asarray(voxels)
        return cls(VolumeGeometry.from_shape(voxels.shape, spacing), voxels)

    def replace(self, voxels: np.ndarray) -> "LabelVolume":
        return LabelVolume(self.geometry, voxels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.voxels, other.voxels)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class BinaryMask:
    geometry: VolumeGeometry
    voxels: np.ndarray

    def __post_init__(self):
        arr = np.array(self.voxels, dtype=bool)
        _check_shape(arr, self.geometry, "mask")
        object.__setattr__(self, "voxels", _frozen(arr))

    @classmethod
    def from_array(cls, voxels, spacing=(1.0, 1.0, 1.0)) -> "BinaryMask":
        voxels = np.asarray(voxels)
        return cls(VolumeGeometry.from_shape(voxels.shape, spacing), voxels)

    def count(self) -> int:
        return int(np.count_nonzero(self.voxels))

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.voxels, other.voxels)

    __hash__ = None


def _prob_stack(channels, n: int, geometry: VolumeGeometry, what: str) -> np.ndarray:
    if isinstance(channels, Mapping):
        raise TypeError("channels must be an array or sequence of arrays")
    arr = np.array(channels, dtype=PROB_DTYPE)
    if arr.ndim != 4 or arr.shape[0] != n:
        raise GeometryMismatchError(f"{what} needs {n} channels of shape {geometry.dims}, got {arr.shape}")
    if arr.shape[1:] != geometry.dims:
        raise GeometryMismatchError(f"{what} channel shape {arr.shape[1:]} != geometry dims {geometry.dims}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{what} contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ConfigError(f"{what} values must lie in [0, 1]")
    return _frozen(arr)


@dataclass(frozen=True, eq=False)
class RegionProbVolume:
    """Per-voxel membership probabilities for ET, TC and WT (channel order ET, TC, WT)."""

    geometry: VolumeGeometry
    channels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "channels", _prob_stack(self.channels, 3, self.geometry, "RegionProbVolume"))

    def channel(self, region) -> np.ndarray:
        return self.channels[REGIONS.index(as_region(region))]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RegionProbVolume):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.channels, other.channels)

    __hash__ = None


SOFTMAX_TOL = 1e-4


@dataclass(frozen=True, eq=False)
class LabelProbVolume:
    """Softmax output over (background, NCR, ED, ET)."""

    geometry: VolumeGeometry
    channels: np.ndarray

    def __post_init__(self):
        arr = _prob_stack(self.channels, 4, self.geometry, "LabelProbVolume")
        total = arr.sum(axis=0, dtype=np.float64)
        if total.size and np.max(np.abs(total - 1.0)) > SOFTMAX_TOL:
            raise ConfigError(
                f"LabelProbVolume channels must sum to 1 per voxel (max deviation {np.max(np.abs(total - 1.0)):.2e})"
            )
        object.__setattr__(self, "channels", arr)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SingleRegionProb:
    """One probability channel for a single region, e.g. from a model trained on ET only."""

    geometry: VolumeGeometry
    region: Region
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "region", as_region(self.region))
        arr = _prob_stack(np.asarray(self.values)[None], 1, self.geometry, "SingleRegionProb")[0]
        object.__setattr__(self, "values", arr)

    __hash__ = None


def label_set_mask(voxels: np.ndarray, name: str) -> np.ndarray:
    """Boolean array of voxels whose label belongs to the named label set."""
    try:
        codes = LABEL_SETS[str(name).upper()]
    except KeyError:
        raise ConfigError(f"unknown label set {name!r}; expected one of {sorted(LABEL_SETS)}") from None
    if codes == LABEL_SETS["WT"]:
        return voxels > 0
    if len(codes) == 1:
        return voxels == next(iter(codes))
    return np.isin(voxels, list(codes))


def region_mask(labels: LabelVolume, region) -> BinaryMask:
    return BinaryMask(labels.geometry, label_set_mask(labels.voxels, as_region(region).value))


def region_indicators(labels: LabelVolume) -> RegionProbVolume:
    """Hard 0/1 region probabilities of a label volume."""
    stack = np.stack([label_set_mask(labels.voxels, r.value) for r in REGIONS]).astype(PROB_DTYPE)
    return RegionProbVolume(labels.geometry, stack)


def label_probs_to_region_probs(p: LabelProbVolume) -> RegionProbVolume:
    ch = p.channels.astype(np.float64)
    et = ch[ET_LABEL]
    tc = et + ch[NCR]
    wt = tc + ch[ED]
    stack = np.clip(np.stack([et, tc, wt]), 0.0, 1.0).astype(PROB_DTYPE)
    return RegionProbVolume(p.geometry, stack)


def _check_threshold(name: str, t: float) -> float:
    t = float(t)
    if not 0.0 < t < 1.0:
        raise ConfigError(f"{name} must lie in (0, 1), got {t}")
    return t


def decode_labels(p: RegionProbVolume, t_wt: float = 0.5, t_tc: float = 0.5, t_et: float = 0.5) -> LabelVolume:
    """Hierarchical decode: WT gate, then TC within WT, then ET within TC."""
    t_wt = _check_threshold("t_wt", t_wt)
    t_tc = _check_threshold("t_tc", t_tc)
    t_et = _check_threshold("t_et", t_et)
    wt = p.channel(Region.WT) > t_wt
    tc = wt & (p.channel(Region.TC) > t_tc)
    et = tc & (p.channel(Region.ET) > t_et)
    out = np.zeros(p.geometry.dims, dtype=LABEL_DTYPE)
    out[wt] = ED
    out[tc] = NCR
    out[et] = ET_LABEL
    return LabelVolume(p.geometry, out)


@dataclass(frozen=True)
class LabelSchema:
    """Mapping between on-disk label codes and canonical classes.

    ``file_to_canonical`` maps each allowed file code to 0..3. The default is the
    identity; BraTS 2021-style files (ET stored as 4) use ``{0: 0, 1: 1, 2: 2, 4: 3}``.
    """

    file_to_canonical: Mapping[int, int] = field(default_factory=lambda: {0: 0, 1: 1, 2: 2, 3: 3})

    def __post_init__(self):
        mapping = {int(k): int(v) for k, v in dict(self.file_to_canonical).items()}
        if sorted(set(mapping.values())) != list(LABEL_CODES) or len(mapping) != 4:
            raise ConfigError(f"label schema must map four file codes onto 0..3, got {mapping}")
        if any(k < 0 or k > 255 for k in mapping):
            raise ConfigError("label schema file codes must be in 0..255")
        object.__setattr__(self, "file_to_canonical", mapping)

    @classmethod
    def from_names(cls, table: Mapping[str, int]) -> "LabelSchema":
        """Build from a config table such as ``{"background": 0, "NCR": 1, "ED": 2, "ET": 4}``."""
        by_name = {v.lower(): k for k, v in LABEL_NAMES.items()}
        aliases = {"snfh": "ed", "netc": "ncr", "bg": "background"}
        mapping = {}
        for name, code in table.items():
            key = aliases.get(name.lower(), name.lower())
            if key not in by_name:
                raise ConfigError(f"unknown label name {name!r} in label schema")
            mapping[int(code)] = by_name[key]
        return cls(mapping)

    def lookup_table(self) -> np.ndarray:
        """256-entry table, 255 marks codes outside the schema."""
        lut = np.full(256, 255, dtype=LABEL_DTYPE)
        for k, v in self.file_to_canonical.items():
            lut[k] = v
        return lut

    def inverse_table(self) -> np.ndarray:
        lut = np.zeros(4, dtype=LABEL_DTYPE)
        for k, v in self.file_to_canonical.items():
            lut[v] = k
        return lut


DEFAULT_SCHEMA = LabelSchema()
