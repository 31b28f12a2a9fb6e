"""Deterministic synthetic tumor volumes with planted lesions and noise.

Lesions are axis-aligned nested ellipsoids: ET core (3) inside an NCR shell (1)
inside an ED shell (2). Predictions add compact spurious blobs of exact size
and optional boundary label noise. Random draws come from Philox streams keyed
by (seed, stream, index), so one lesion's geometry does not depend on how many
others are drawn.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import ndimage

from . import kernels
from .core import ED, ET_LABEL, NCR, PROB_DTYPE, LabelVolume, RegionProbVolume, VolumeGeometry, region_indicators
from .errors import ConfigError

_LESION, _SPURIOUS, _NOISE = 0, 1, 2
_MAX_ATTEMPTS = 2000


def _rng(seed: int, stream: int, index: int = 0, attempt: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, stream, index, attempt])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_lesions: int = 1
    wt_radius: tuple[float, float] = (6.0, 9.0)
    tc_radius: tuple[float, float] = (3.5, 6.0)
    et_radius: tuple[float, float] = (1.5, 3.5)
    n_spurious: int = 0
    spurious_size: tuple[int, int] = (3, 10)
    spurious_sizes: tuple[int, ...] | None = None  # explicit sizes override n_spurious / spurious_size
    spurious_label: int = ET_LABEL
    spurious_clearance: int = 8
    blur_radius: int = 0
    noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("dims", "spacing", "wt_radius", "tc_radius", "et_radius", "spurious_size"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.spurious_sizes is not None:
            object.__setattr__(self, "spurious_sizes", tuple(int(s) for s in self.spurious_sizes))
        VolumeGeometry(self.dims, self.spacing)
        for name in ("wt_radius", "tc_radius", "et_radius"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must be a range 0 < lo <= hi, got {(lo, hi)}")
        if not (self.et_radius[1] <= self.tc_radius[1] <= self.wt_radius[1]):
            raise ConfigError("radius ranges must nest: ET <= TC <= WT")
        if self.n_lesions < 0 or self.n_spurious < 0:
            raise ConfigError("lesion and spurious counts must be non-negative")
        lo, hi = self.spurious_size
        if not 1 <= lo <= hi:
            raise ConfigError(f"spurious_size must be a range 1 <= lo <= hi, got {(lo, hi)}")
        if self.spurious_sizes is not None and any(s < 1 for s in self.spurious_sizes):
            raise ConfigError("spurious sizes must be positive")
        if self.spurious_label not in (NCR, ED, ET_LABEL):
            raise ConfigError("spurious_label must be 1, 2 or 3")
        if self.blur_radius < 0 or self.spurious_clearance < 0:
            raise ConfigError("blur_radius and spurious_clearance must be non-negative")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError("noise_rate must lie in [0, 1]")

    @classmethod
    def from_mapping(cls, data: Mapping) -> "PhantomSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown phantom option(s): {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Phantom:
    gt: LabelVolume
    pred: LabelVolume
    probs: RegionProbVolume
    manifest: dict = field(default_factory=dict)


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return acc <= 1.0


def _place_lesions(spec: PhantomSpec, shape) -> tuple[np.ndarray, list[dict]]:
    gt = np.zeros(shape, dtype=np.uint8)
    reach = int(math.ceil(spec.wt_radius[1]))
    min_sep = 2 * (spec.wt_radius[1] + 1)
    if spec.n_lesions and any(n < 2 * reach + 3 for n in shape):
        raise ConfigError(f"lesions of radius up to {spec.wt_radius[1]} do not fit in dims {shape}")
    centers: list[np.ndarray] = []
    lesions = []
    for i in range(spec.n_lesions):
        rng = _rng(spec.seed, _LESION, i)
        wt = rng.uniform(*spec.wt_radius, size=3)
        tc = np.minimum(rng.uniform(*spec.tc_radius, size=3), wt)
        et = np.minimum(rng.uniform(*spec.et_radius, size=3), tc)
        for attempt in range(_MAX_ATTEMPTS):
            c = np.array([_rng(spec.seed, _LESION, i, attempt + 1).integers(reach + 1, n - reach - 1) for n in shape])
            if all(np.linalg.norm(c - o) >= min_sep for o in centers):
                break
        else:
            raise ConfigError(f"could not place lesion {i}: volume too small for {spec.n_lesions} separated lesions")
        centers.append(c)
        lo = np.maximum(c - reach - 1, 0)
        hi = np.minimum(c + reach + 2, shape)
        box = tuple(slice(a, b) for a, b in zip(lo, hi))
        local_c = c - lo
        sub = gt[box]
        sub[_ellipsoid(sub.shape, local_c, wt)] = ED
        sub[_ellipsoid(sub.shape, local_c, tc)] = NCR
        sub[_ellipsoid(sub.shape, local_c, et)] = ET_LABEL
        region = (gt[box] > 0) & _ellipsoid(sub.shape, local_c, wt)
        lesions.append(
            {
                "index": i,
                "center": c.tolist(),
                "radii": {"WT": wt.tolist(), "TC": tc.tolist(), "ET": et.tolist()},
                "voxels": {
                    "ET": int(np.count_nonzero(sub[region] == ET_LABEL)),
                    "NCR": int(np.count_nonzero(sub[region] == NCR)),
                    "ED": int(np.count_nonzero(sub[region] == ED)),
                    "WT": int(np.count_nonzero(region)),
                },
            }
        )
    return gt, lesions


def _blob_offsets(size: int) -> np.ndarray:
    """Offsets of a compact 6-connected blob: the ``size`` voxels nearest the origin."""
    r = int(math.ceil(size ** (1 / 3))) + 1
    ax = np.arange(-r, r + 1)
    off = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    d2 = (off**2).sum(1)
    order = np.lexsort((off[:, 2], off[:, 1], off[:, 0], d2))
    return off[order[:size]]


def _plant_spurious(spec: PhantomSpec, pred: np.ndarray) -> list[dict]:
    if spec.spurious_sizes is not None:
        sizes = list(spec.spurious_sizes)
    else:
        sizes = [int(_rng(spec.seed, _SPURIOUS, j).integers(spec.spurious_size[0], spec.spurious_size[1] + 1))
                 for j in range(spec.n_spurious)]
    shape = np.array(pred.shape)
    blocked = kernels.dilate_cube(pred > 0, spec.spurious_clearance)
    planted = []
    for j, size in enumerate(sizes):
        off = _blob_offsets(size)
        lo_off, hi_off = off.min(0), off.max(0)
        if np.any(hi_off - lo_off + 1 > shape):
            raise ConfigError(f"spurious component of {size} voxels does not fit in dims {tuple(shape)}")
        for attempt in range(_MAX_ATTEMPTS):
            rng = _rng(spec.seed, _SPURIOUS, j, attempt + 1)
            seed_vox = np.array([rng.integers(-lo, n - hi) for lo, hi, n in zip(lo_off, hi_off, shape)])
            vox = off + seed_vox
            if not blocked[tuple(vox.T)].any():
                break
        else:
            raise ConfigError(f"could not place spurious component {j} of {size} voxels with the requested clearance")
        pred[tuple(vox.T)] = spec.spurious_label
        blob = np.zeros(pred.shape, dtype=bool)
        blob[tuple(vox.T)] = True
        blocked |= kernels.dilate_cube(blob, spec.spurious_clearance)
        planted.append(
            {
                "index": j,
                "seed_voxel": seed_vox.tolist(),
                "size": int(size),
                "label": int(spec.spurious_label),
                "bbox": [(vox.min(0)).tolist(), (vox.max(0) + 1).tolist()],
            }
        )
    return planted


_FACE_OFFSETS = ((-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1))


def _boundary_noise(labels: np.ndarray, rate: float, seed: int) -> int:
    """Relabel boundary voxels in place with a neighbor's label; returns the flip count."""
    if rate <= 0:
        return 0
    padded = np.pad(labels, 1, mode="edge")
    n = labels.shape
    neighbors = np.stack(
        [padded[1 + di : 1 + di + n[0], 1 + dj : 1 + dj + n[1], 1 + dk : 1 + dk + n[2]] for di, dj, dk in _FACE_OFFSETS]
    )
    differs = neighbors != labels[None]
    boundary = np.flatnonzero(differs.any(0))
    rng = _rng(seed, _NOISE)
    chosen = boundary[rng.random(boundary.size) < rate]
    if chosen.size == 0:
        return 0
    diff_flat = differs.reshape(6, -1)[:, chosen]
    # pick uniformly among the neighbors whose label differs
    scores = np.where(diff_flat, rng.random(diff_flat.shape), -1.0)
    pick = scores.argmax(0)
    new = neighbors.reshape(6, -1)[pick, chosen]
    labels.reshape(-1)[chosen] = new
    return int(chosen.size)


def generate(spec: PhantomSpec) -> Phantom:
    geometry = VolumeGeometry(spec.dims, spec.spacing)
    gt, lesions = _place_lesions(spec, geometry.dims)
    pred = gt.copy()
    flips = _boundary_noise(pred, spec.noise_rate, spec.seed)
    spurious = _plant_spurious(spec, pred)
    gt_vol = LabelVolume(geometry, gt)
    pred_vol = LabelVolume(geometry, pred)
    indicators = region_indicators(pred_vol).channels
    if spec.blur_radius > 0:
        size = (1, 2 * spec.blur_radius + 1, 2 * spec.blur_radius + 1, 2 * spec.blur_radius + 1)
        blurred = ndimage.uniform_filter(indicators.astype(np.float64), size=size, mode="constant")
        indicators = np.clip(blurred, 0.0, 1.0).astype(PROB_DTYPE)
    probs = RegionProbVolume(geometry, indicators)
    manifest = {"spec": spec.to_dict(), "lesions": lesions, "spurious": spurious, "noise_flips": flips}
    return Phantom(gt_vol, pred_vol, probs, manifest)


def generate_cohort(spec: PhantomSpec, n_cases: int) -> list[Phantom]:
    """``n_cases`` phantoms with seeds ``spec.seed, spec.seed + 1, ...``."""
    return [generate(replace(spec, seed=spec.seed + i)) for i in range(n_cases)]


def write_phantom(ph: Phantom, out_dir, case_id: str) -> dict[str, Path]:
    from .io_nifti import write_label_volume, write_prob_volume
    from .metrics import atomic_write_text

    out_dir = Path(out_dir)
    paths = {
        "gt": out_dir / "gt" / f"{case_id}.nii.gz",
        "pred": out_dir / "pred" / f"{case_id}.nii.gz",
        "probs": out_dir / "probs" / f"{case_id}.nii.gz",
        "manifest": out_dir / "manifests" / f"{case_id}.json",
    }
    write_label_volume(ph.gt, paths["gt"])
    write_label_volume(ph.pred, paths["pred"])
    write_prob_volume(ph.probs, paths["probs"])
    atomic_write_text(paths["manifest"], json.dumps({"case": case_id, **ph.manifest}, indent=2) + "\n")
    return paths
