"""Cross-validated grid search over one post-processing threshold.

Each grid value is applied to every case's prediction, the result is scored
lesion-wise against the ground truth, and the objective (mean LW Dice over the
chosen regions) is averaged over cases. Per-case work that does not depend on
the grid value (ground-truth lesions, the foreground component labeling) is
computed once per case.
"""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from .core import (
    REGIONS,
    LabelVolume,
    Region,
    RegionProbVolume,
    as_region,
    check_same_geometry,
    decode_labels,
    label_set_mask,
)
from .errors import ConfigError, TumorPipeError
from .metrics import LesionwiseParams, _lesionwise, atomic_write_text, prepare_truth
from .postprocess import (
    PostprocessConfig,
    RatioRule,
    filter_small_components,
    label_array,
    ratio_relabel,
    small_component_mask,
)

MIN_COMPONENT_SIZE = "min_component_size"

DEFAULT_SIZE_GRID = tuple(range(0, 301, 5))
DEFAULT_RATIO_GRID = tuple(round(i * 0.01, 10) for i in range(101))


@dataclass(frozen=True)
class RatioParameter:
    numerator: str
    denominator: str
    source: int
    target: int

    def rule(self, threshold: float) -> RatioRule:
        return RatioRule(self.numerator, self.denominator, threshold, self.source, self.target)

    @property
    def name(self) -> str:
        return f"{self.numerator.upper()}/{self.denominator.upper()}"


Parameter = Union[str, RatioParameter]
VolumeSource = Union[LabelVolume, RegionProbVolume, str, os.PathLike]


@dataclass(frozen=True)
class SweepCase:
    case_id: str
    pred: VolumeSource
    gt: Union[LabelVolume, str, os.PathLike]


@dataclass(frozen=True)
class SweepSpec:
    parameter: Parameter
    grid: tuple[float, ...]
    cases: tuple[SweepCase, ...]
    regions: tuple[Region, ...] = REGIONS
    base: PostprocessConfig = field(default_factory=PostprocessConfig)
    params: LesionwiseParams = field(default_factory=LesionwiseParams)

    def __post_init__(self):
        if isinstance(self.parameter, str) and self.parameter != MIN_COMPONENT_SIZE:
            raise ConfigError(f"unknown sweep parameter {self.parameter!r}")
        grid = tuple(self.grid)
        if not grid:
            raise ConfigError("sweep grid must not be empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("sweep grid must be strictly increasing")
        if self.parameter == MIN_COMPONENT_SIZE:
            if any(v < 0 or int(v) != v for v in grid):
                raise ConfigError("component-size grid values must be non-negative integers")
            grid = tuple(int(v) for v in grid)
        else:
            grid = tuple(float(v) for v in grid)
            for v in grid:
                self.parameter.rule(v)
        if not self.cases:
            raise ConfigError("sweep needs at least one case")
        regions = tuple(as_region(r) for r in self.regions)
        if not regions:
            raise ConfigError("sweep objective needs at least one region")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "cases", tuple(sorted(self.cases, key=lambda c: c.case_id)))

    @property
    def parameter_name(self) -> str:
        return MIN_COMPONENT_SIZE if self.parameter == MIN_COMPONENT_SIZE else self.parameter.name

    def config_at(self, value) -> PostprocessConfig:
        """Full post-processing config for one grid value, other settings held at ``base``."""
        if self.parameter == MIN_COMPONENT_SIZE:
            return replace(self.base, min_component_size=int(value))
        rule = self.parameter.rule(value)
        rules, found = [], False
        for r in self.base.rules:
            if (r.numerator, r.denominator, r.source) == (rule.numerator, rule.denominator, rule.source):
                r, found = rule, True
            rules.append(r)
        if not found:
            rules.append(rule)
        return replace(self.base, rules=tuple(rules))


@dataclass(frozen=True)
class SweepPoint:
    value: float
    objective: float
    region_means: Mapping[Region, float]


@dataclass(frozen=True)
class SweepCurve:
    parameter: str
    regions: tuple[Region, ...]
    points: tuple[SweepPoint, ...]
    best_value: float
    best_objective: float
    n_cases: int

    def objectives(self) -> np.ndarray:
        return np.array([p.objective for p in self.points])


def _load(case: SweepCase) -> tuple[LabelVolume, LabelVolume]:
    from .io_nifti import read_label_volume, read_prob_volume

    try:
        gt = case.gt if isinstance(case.gt, LabelVolume) else read_label_volume(case.gt)
        pred = case.pred
        if isinstance(pred, (str, os.PathLike)):
            name = str(pred)
            # 4D files hold probabilities, 3D files hold labels
            try:
                pred = read_label_volume(name)
            except TumorPipeError:
                pred = read_prob_volume(name)
        if isinstance(pred, RegionProbVolume):
            pred = decode_labels(pred)
        elif not isinstance(pred, LabelVolume):
            raise ConfigError(f"unsupported prediction type {type(pred).__name__}")
        check_same_geometry(pred.geometry, gt.geometry, what="prediction and ground truth")
    except TumorPipeError as exc:
        raise type(exc)(f"case {case.case_id}: {exc}") from exc
    return pred, gt


def _case_curve(spec: SweepSpec, case: SweepCase) -> np.ndarray:
    """LW Dice per (grid value, region) for one case; regions in ET, TC, WT order."""
    pred, gt = _load(case)
    params = spec.params
    truth = prepare_truth(gt, params, REGIONS)
    spacing = gt.geometry.spacing
    out = np.zeros((len(spec.grid), len(REGIONS)))

    base = spec.base
    cached_ids = None
    if spec.parameter == MIN_COMPONENT_SIZE and not base.per_region:
        cached_ids = label_array(pred.voxels > 0, base.connectivity)
    elif spec.parameter != MIN_COMPONENT_SIZE:
        pred = filter_small_components(pred, base.min_component_size, base.connectivity, base.per_region)

    for i, value in enumerate(spec.grid):
        cfg = spec.config_at(value)
        if spec.parameter == MIN_COMPONENT_SIZE:
            if cached_ids is not None:
                vox = pred.voxels.copy()
                if value > 0:
                    vox[small_component_mask(*cached_ids, int(value))] = 0
                cleaned = pred.replace(vox)
            else:
                cleaned = filter_small_components(pred, int(value), cfg.connectivity, cfg.per_region)
        else:
            cleaned = pred
        cleaned = ratio_relabel(cleaned, cfg.rules)
        for j, region in enumerate(REGIONS):
            mask = label_set_mask(cleaned.voxels, region.value)
            out[i, j] = _lesionwise(mask, truth.lesions[region], spacing, params).lw_dice
    return out


def sweep(spec: SweepSpec, jobs: int = 1) -> SweepCurve:
    if jobs > 1 and len(spec.cases) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_case = list(pool.map(_case_curve, [spec] * len(spec.cases), spec.cases))
    else:
        per_case = [_case_curve(spec, c) for c in spec.cases]
    # cases are sorted by id, so the summation order is fixed
    stacked = np.stack(per_case)  # (case, grid, region)
    region_means = stacked.mean(axis=0)
    idx = [REGIONS.index(r) for r in spec.regions]
    objective = stacked[:, :, idx].mean(axis=2).mean(axis=0)

    points = []
    best_i = 0
    for i, value in enumerate(spec.grid):
        points.append(SweepPoint(value, float(objective[i]), {r: float(region_means[i, j]) for j, r in enumerate(REGIONS)}))
        if objective[i] > objective[best_i]:
            best_i = i
    return SweepCurve(
        spec.parameter_name, spec.regions, tuple(points), spec.grid[best_i], float(objective[best_i]), len(spec.cases)
    )


CURVE_COLUMNS = ("threshold", "mean_lw_dice", "lw_dice_ET", "lw_dice_TC", "lw_dice_WT")


def curve_csv(curve: SweepCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for p in curve.points:
        w.writerow([repr(p.value), repr(p.objective)] + [repr(p.region_means[r]) for r in REGIONS])
    return buf.getvalue()


def curve_summary(curve: SweepCurve) -> dict:
    return {
        "parameter": curve.parameter,
        "regions": [r.value for r in curve.regions],
        "n_cases": curve.n_cases,
        "grid": [p.value for p in curve.points],
        "best_value": curve.best_value,
        "best_objective": curve.best_objective,
    }


def emit_curve(curve: SweepCurve, path) -> tuple[Path, Path]:
    """Write the curve CSV and a JSON sidecar (same stem, ``.json``) with the optimum."""
    path = Path(path)
    sidecar = path.with_suffix(".json")
    atomic_write_text(path, curve_csv(curve))
    atomic_write_text(sidecar, json.dumps(curve_summary(curve), indent=2) + "\n")
    return path, sidecar


def read_curve_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def parse_grid(value, parameter: Parameter) -> tuple:
    if value is None:
        return DEFAULT_SIZE_GRID if parameter == MIN_COMPONENT_SIZE else DEFAULT_RATIO_GRID
    if isinstance(value, Mapping):
        start, stop, step = float(value["start"]), float(value["stop"]), float(value["step"])
        if step <= 0:
            raise ConfigError("grid step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        vals = [round(start + i * step, 10) for i in range(n)]
        if parameter == MIN_COMPONENT_SIZE:
            vals = [int(round(v)) for v in vals]
        return tuple(vals)
    return tuple(value)


def parse_parameter(value) -> Parameter:
    if value in (None, MIN_COMPONENT_SIZE):
        return MIN_COMPONENT_SIZE
    if isinstance(value, Mapping):
        inner = value.get("ratio", value)
        try:
            return RatioParameter(str(inner["numerator"]), str(inner["denominator"]), int(inner["source"]), int(inner["target"]))
        except KeyError as exc:
            raise ConfigError(f"ratio sweep parameter missing field {exc}") from None
    raise ConfigError(f"unknown sweep parameter {value!r}")


def spec_from_mapping(data: Mapping, cases: Sequence[SweepCase], base: PostprocessConfig | None = None) -> SweepSpec:
    """Build a spec from a parsed TOML/JSON table; ``cases`` are resolved by the caller."""
    known = {"parameter", "grid", "regions", "base", "metrics", "cases", "pred_dir", "gt_dir"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown sweep option(s): {sorted(unknown)}")
    parameter = parse_parameter(data.get("parameter"))
    grid = parse_grid(data.get("grid"), parameter)
    if "base" in data:
        base_cfg = data["base"]
        if isinstance(base_cfg, str):
            base = PostprocessConfig() if base_cfg.lower() == "custom" else PostprocessConfig.preset(base_cfg)
        else:
            base = PostprocessConfig.from_mapping(base_cfg)
    params = LesionwiseParams.from_mapping(data.get("metrics", {}))
    return SweepSpec(
        parameter,
        grid,
        tuple(cases),
        tuple(data.get("regions", [r.value for r in REGIONS])),
        base or PostprocessConfig(),
        params,
    )
