"""Volume-level and lesion-wise Dice / HD95.

Lesion-wise scoring:

1. Ground-truth components closer than ``2 * match_dilation_radius`` (their cube
   dilations intersect) are merged into one lesion.
2. Each predicted component is assigned to the dilated lesion it overlaps most
   (ties go to the lower lesion id). Components touching no dilated lesion are
   false positives.
3. Every lesion contributes Dice/HD95 between its assigned prediction and the
   undilated lesion; unmatched lesions score (0, penalty) and false positives
   score (fp_dice, fp_hd95_mm). The aggregate is the plain mean over entries.

The dilation radius, minimum lesion size and HD95 penalty are conventions of
this package, not values taken from any official evaluator.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import re
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import kernels
from .core import REGIONS, BinaryMask, LabelVolume, Region, as_region, check_same_geometry, label_set_mask
from .errors import ConfigError, OutputError
from .postprocess import label_array

FP_HD95_MM = 374.0


@dataclass(frozen=True)
class LesionwiseParams:
    match_dilation_radius: int = 3
    min_gt_lesion_size: int = 0
    fp_dice: float = 0.0
    fp_hd95_mm: float = FP_HD95_MM
    connectivity: int = 26

    def __post_init__(self):
        if self.match_dilation_radius < 0:
            raise ConfigError("match_dilation_radius must be non-negative")
        if self.min_gt_lesion_size < 0:
            raise ConfigError("min_gt_lesion_size must be non-negative")
        if self.fp_dice < 0 or self.fp_hd95_mm < 0:
            raise ConfigError("false-positive penalties must be non-negative")
        if self.connectivity not in (6, 18, 26):
            raise ConfigError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")

    @classmethod
    def from_mapping(cls, data: Mapping) -> "LesionwiseParams":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown metrics option(s): {sorted(unknown)}")
        return cls(**data)


# --------------------------------------------------------------------------- #
# volume-level metrics


def _dice_arrays(p: np.ndarray, g: np.ndarray) -> float:
    np_, ng = int(np.count_nonzero(p)), int(np.count_nonzero(g))
    if np_ + ng == 0:
        return 1.0
    inter = int(np.count_nonzero(p & g))
    return 2.0 * inter / (np_ + ng)


def dice(pred: BinaryMask, gt: BinaryMask) -> float:
    check_same_geometry(pred.geometry, gt.geometry, what="prediction and ground truth")
    return _dice_arrays(pred.voxels, gt.voxels)


def _bbox(mask: np.ndarray) -> tuple[slice, ...] | None:
    objs = ndimage.find_objects(mask.view(np.uint8) if mask.dtype == bool else mask.astype(np.uint8))
    return objs[0] if objs else None


def _union_slices(a: Sequence[slice] | None, b: Sequence[slice] | None) -> tuple[slice, ...] | None:
    if a is None:
        return None if b is None else tuple(b)
    if b is None:
        return tuple(a)
    return tuple(slice(min(x.start, y.start), max(x.stop, y.stop)) for x, y in zip(a, b))


def _surface(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with a face neighbor outside it (volume border counts as inside)."""
    return mask & ~ndimage.binary_erosion(mask, border_value=1)


def _directed(a: np.ndarray, b: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    """Distance in mm from every voxel of ``a`` to the nearest voxel of ``b``.

    The nearest voxel of ``b`` to a point outside ``b`` always lies on the
    surface of ``b``, so only surface voxels are indexed.
    """
    dist = np.zeros(int(np.count_nonzero(a)), dtype=np.float64)
    outside = ~b[a]
    if outside.any():
        query = np.argwhere(a)[outside] * spacing
        tree = cKDTree(np.argwhere(_surface(b)) * spacing)
        dist[outside] = tree.query(query)[0]
    return dist


def pooled_distances(p: np.ndarray, g: np.ndarray, spacing) -> np.ndarray:
    """Every p voxel's distance to the nearest g voxel, followed by every g voxel's distance to p.

    Both masks must be non-empty. Work is restricted to the joint bounding box.
    """
    box = _union_slices(_bbox(p), _bbox(g))
    pc, gc = p[box], g[box]
    spacing = np.asarray(spacing, dtype=np.float64)
    return np.concatenate([_directed(pc, gc, spacing), _directed(gc, pc, spacing)])


def _hd95_arrays(p: np.ndarray, g: np.ndarray, spacing, empty_penalty: float) -> float:
    has_p, has_g = bool(p.any()), bool(g.any())
    if not has_p and not has_g:
        return 0.0
    if has_p != has_g:
        return float(empty_penalty)
    return float(np.percentile(pooled_distances(p, g, spacing), 95))


def hd95(pred: BinaryMask, gt: BinaryMask, spacing=None, fp_hd95_mm: float = FP_HD95_MM) -> float:
    """95th percentile of pooled nearest-voxel distances in mm.

    Both empty gives 0.0; exactly one empty gives ``fp_hd95_mm``.
    """
    check_same_geometry(pred.geometry, gt.geometry, what="prediction and ground truth")
    spacing = pred.geometry.spacing if spacing is None else tuple(float(s) for s in spacing)
    return _hd95_arrays(pred.voxels, gt.voxels, spacing, fp_hd95_mm)


# --------------------------------------------------------------------------- #
# lesion partition


@dataclass(frozen=True, eq=False)
class _Lesions:
    """Ground-truth lesions of one region.

    ``lesion_map`` / ``dilated_map`` hold lesion ids 1..n (0 elsewhere);
    ``slices[k-1]`` is the bounding box of lesion k; ``scored[k-1]`` is False
    for lesions below the minimum size.
    """

    lesion_map: np.ndarray
    dilated_map: np.ndarray
    sizes: np.ndarray
    slices: list
    scored: np.ndarray

    @property
    def n(self) -> int:
        return len(self.sizes)


def _find(parent: list[int], x: int) -> int:
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


def _expand(sl: tuple[slice, ...], r: int, shape) -> tuple[slice, ...]:
    return tuple(slice(max(s.start - r, 0), min(s.stop + r, n)) for s, n in zip(sl, shape))


def _partition(gt: np.ndarray, params: LesionwiseParams) -> _Lesions:
    ids, comp_sizes = label_array(gt, params.connectivity)
    n = len(comp_sizes)
    shape = gt.shape
    r = params.match_dilation_radius
    owner = np.zeros(shape, dtype=np.int32)
    parent = list(range(n + 1))
    comp_slices = ndimage.find_objects(ids) if n else []
    for c in range(1, n + 1):
        box = _expand(comp_slices[c - 1], r, shape)
        dil = kernels.dilate_cube(ids[box] == c, r)
        local_owner = owner[box]
        for other in np.unique(local_owner[dil]):
            if other:
                ra, rb = _find(parent, int(other)), _find(parent, c)
                parent[max(ra, rb)] = min(ra, rb)
        local_owner[dil] = c

    # lesions are numbered by their first (lowest-id) component
    comp_to_lesion = np.zeros(n + 1, dtype=np.int32)
    roots: dict[int, int] = {}
    for c in range(1, n + 1):
        root = _find(parent, c)
        if root not in roots:
            roots[root] = len(roots) + 1
        comp_to_lesion[c] = roots[root]
    n_les = len(roots)
    lesion_map = comp_to_lesion[ids]
    dilated_map = comp_to_lesion[owner]
    sizes = np.bincount(comp_to_lesion[1:], weights=comp_sizes, minlength=n_les + 1)[1:].astype(np.int64)
    slices: list = [None] * n_les
    for c in range(1, n + 1):
        k = comp_to_lesion[c] - 1
        slices[k] = _union_slices(slices[k], comp_slices[c - 1])
    scored = sizes >= params.min_gt_lesion_size
    return _Lesions(lesion_map, dilated_map, sizes, slices, scored)


def lesion_partition(gt: BinaryMask, params: LesionwiseParams = LesionwiseParams()) -> list[BinaryMask]:
    """Scored ground-truth lesions, each as its own mask, in lesion-id order."""
    les = _partition(gt.voxels, params)
    return [BinaryMask(gt.geometry, les.lesion_map == k + 1) for k in range(les.n) if les.scored[k]]


# --------------------------------------------------------------------------- #
# lesion-wise scoring


@dataclass(frozen=True)
class LesionEntry:
    kind: str  # "lesion" or "fp"
    gt_lesion: int | None
    pred_components: tuple[int, ...]
    dice: float
    hd95_mm: float
    gt_voxels: int = 0
    pred_voxels: int = 0


@dataclass(frozen=True)
class LesionwiseScores:
    entries: tuple[LesionEntry, ...]
    lw_dice: float
    lw_hd95_mm: float
    n_lesions: int
    n_fp: int

    @classmethod
    def from_entries(cls, entries: Sequence[LesionEntry]) -> "LesionwiseScores":
        entries = tuple(entries)
        return cls(
            entries,
            float(np.mean([e.dice for e in entries])),
            float(np.mean([e.hd95_mm for e in entries])),
            sum(e.kind == "lesion" for e in entries),
            sum(e.kind == "fp" for e in entries),
        )


def _assign(pred_ids: np.ndarray, n_pred: int, les: _Lesions) -> np.ndarray:
    """Lesion id (0 = none) for every predicted component."""
    assignment = np.zeros(n_pred + 1, dtype=np.int64)
    if n_pred == 0 or les.n == 0:
        return assignment
    hit = (pred_ids > 0) & (les.dilated_map > 0)
    if not hit.any():
        return assignment
    keys = pred_ids[hit].astype(np.int64) * (les.n + 1) + les.dilated_map[hit]
    pairs, counts = np.unique(keys, return_counts=True)
    comp, lesion = np.divmod(pairs, les.n + 1)
    # sort by component, then overlap descending, then lesion id ascending
    order = np.lexsort((lesion, -counts, comp))
    comp, lesion = comp[order], lesion[order]
    first = np.concatenate([[True], comp[1:] != comp[:-1]])
    assignment[comp[first]] = lesion[first]
    return assignment


def _lesionwise(pred: np.ndarray, les: _Lesions, spacing, params: LesionwiseParams) -> LesionwiseScores:
    pred_ids, pred_sizes = label_array(pred, params.connectivity)
    n_pred = len(pred_sizes)
    assignment = _assign(pred_ids, n_pred, les)
    pred_slices = ndimage.find_objects(pred_ids) if n_pred else []

    entries: list[LesionEntry] = []
    for k in range(1, les.n + 1):
        if not les.scored[k - 1]:
            continue
        comps = tuple(int(c) for c in np.flatnonzero(assignment == k))
        gt_size = int(les.sizes[k - 1])
        if not comps:
            entries.append(LesionEntry("lesion", k, (), 0.0, float(params.fp_hd95_mm), gt_size, 0))
            continue
        box = les.slices[k - 1]
        for c in comps:
            box = _union_slices(box, pred_slices[c - 1])
        g = les.lesion_map[box] == k
        p = np.isin(pred_ids[box], comps)
        d = _dice_arrays(p, g)
        h = float(np.percentile(pooled_distances(p, g, spacing), 95))
        entries.append(LesionEntry("lesion", k, comps, d, h, gt_size, int(pred_sizes[np.array(comps) - 1].sum())))

    for c in np.flatnonzero(assignment[1:] == 0) + 1:
        entries.append(
            LesionEntry("fp", None, (int(c),), float(params.fp_dice), float(params.fp_hd95_mm), 0, int(pred_sizes[c - 1]))
        )
    if not entries:
        entries.append(LesionEntry("lesion", None, (), 1.0, 0.0, 0, 0))
    return LesionwiseScores.from_entries(entries)


def lesionwise_scores(pred: BinaryMask, gt: BinaryMask, params: LesionwiseParams = LesionwiseParams()) -> LesionwiseScores:
    check_same_geometry(pred.geometry, gt.geometry, what="prediction and ground truth")
    les = _partition(gt.voxels, params)
    return _lesionwise(pred.voxels, les, pred.geometry.spacing, params)


# --------------------------------------------------------------------------- #
# case and cohort reports


@dataclass(frozen=True)
class RegionScores:
    region: Region
    dice: float
    hd95_mm: float
    lesionwise: LesionwiseScores

    @property
    def lw_dice(self) -> float:
        return self.lesionwise.lw_dice

    @property
    def lw_hd95_mm(self) -> float:
        return self.lesionwise.lw_hd95_mm


@dataclass(frozen=True)
class CaseReport:
    case_id: str
    regions: Mapping[Region, RegionScores] = field(default_factory=dict)

    def __getitem__(self, region) -> RegionScores:
        return self.regions[as_region(region)]

    def to_dict(self) -> dict:
        out = {"case": self.case_id, "regions": {}}
        for region in REGIONS:
            if region not in self.regions:
                continue
            rs = self.regions[region]
            out["regions"][region.value] = {
                "dice": rs.dice,
                "hd95_mm": rs.hd95_mm,
                "lw_dice": rs.lw_dice,
                "lw_hd95_mm": rs.lw_hd95_mm,
                "n_lesions": rs.lesionwise.n_lesions,
                "n_fp": rs.lesionwise.n_fp,
                "entries": [asdict(e) for e in rs.lesionwise.entries],
            }
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "CaseReport":
        regions = {}
        for name, rd in data["regions"].items():
            entries = tuple(
                LesionEntry(**{**e, "pred_components": tuple(e["pred_components"])}) for e in rd["entries"]
            )
            lw = LesionwiseScores(entries, rd["lw_dice"], rd["lw_hd95_mm"], rd["n_lesions"], rd["n_fp"])
            regions[as_region(name)] = RegionScores(as_region(name), rd["dice"], rd["hd95_mm"], lw)
        return cls(data["case"], regions)


@dataclass(frozen=True, eq=False)
class PreparedTruth:
    """Ground-truth lesions of every region, reusable across many predictions."""

    gt: LabelVolume
    params: LesionwiseParams
    lesions: Mapping[Region, _Lesions]


def prepare_truth(gt: LabelVolume, params: LesionwiseParams = LesionwiseParams(), regions=REGIONS) -> PreparedTruth:
    regions = tuple(as_region(r) for r in regions)
    lesions = {r: _partition(label_set_mask(gt.voxels, r.value), params) for r in regions}
    return PreparedTruth(gt, params, lesions)


def evaluate_case(
    pred: LabelVolume,
    gt: LabelVolume | PreparedTruth,
    params: LesionwiseParams = LesionwiseParams(),
    case_id: str = "case",
    regions=REGIONS,
) -> CaseReport:
    regions = tuple(as_region(r) for r in regions)
    if isinstance(gt, PreparedTruth):
        prepared, params = gt, gt.params
        missing = [r for r in regions if r not in prepared.lesions]
        if missing:
            prepared = prepare_truth(prepared.gt, params, regions)
    else:
        prepared = prepare_truth(gt, params, regions)
    truth = prepared.gt
    check_same_geometry(pred.geometry, truth.geometry, what="prediction and ground truth")
    spacing = truth.geometry.spacing
    out = {}
    for region in regions:
        p = label_set_mask(pred.voxels, region.value)
        g = label_set_mask(truth.voxels, region.value)
        out[region] = RegionScores(
            region,
            _dice_arrays(p, g),
            _hd95_arrays(p, g, spacing, params.fp_hd95_mm),
            _lesionwise(p, prepared.lesions[region], spacing, params),
        )
    return CaseReport(case_id, out)


CSV_COLUMNS = ("case", "region", "dice", "hd95", "lw_dice", "lw_hd95", "n_lesions", "n_fp")
STAT_ROWS = ("Mean", "Std", "25th", "Median", "75th")
_METRIC_FIELDS = ("dice", "hd95", "lw_dice", "lw_hd95", "n_lesions", "n_fp")


def _fmt(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    return f"{x:.6f}"


def _row_values(rs: RegionScores) -> dict:
    return {
        "dice": rs.dice,
        "hd95": rs.hd95_mm,
        "lw_dice": rs.lw_dice,
        "lw_hd95": rs.lw_hd95_mm,
        "n_lesions": rs.lesionwise.n_lesions,
        "n_fp": rs.lesionwise.n_fp,
    }


def cohort_rows(reports: Iterable[CaseReport]) -> list[dict]:
    """Per-case rows ordered by case id then ET, TC, WT, followed by summary rows per region.

    The summary rows are Mean, Std (population), 25th, Median and 75th percentile.
    """
    reports = sorted(reports, key=lambda r: r.case_id)
    rows = []
    per_region: dict[Region, list[dict]] = {r: [] for r in REGIONS}
    for rep in reports:
        for region in REGIONS:
            if region not in rep.regions:
                continue
            vals = _row_values(rep.regions[region])
            per_region[region].append(vals)
            rows.append({"case": rep.case_id, "region": region.value, **vals})
    for stat in STAT_ROWS:
        for region in REGIONS:
            vals = per_region[region]
            if not vals:
                continue
            row = {"case": stat, "region": region.value}
            for f in _METRIC_FIELDS:
                arr = np.array([v[f] for v in vals], dtype=np.float64)
                row[f] = {
                    "Mean": np.mean,
                    "Std": np.std,
                    "25th": lambda a: np.percentile(a, 25),
                    "Median": np.median,
                    "75th": lambda a: np.percentile(a, 75),
                }[stat](arr)
            rows.append(row)
    return rows


def cohort_csv(reports: Iterable[CaseReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in cohort_rows(reports):
        is_case = row["case"] not in STAT_ROWS
        cells = [row["case"], row["region"]]
        for f in _METRIC_FIELDS:
            v = row[f]
            cells.append(str(int(v)) if is_case and f in ("n_lesions", "n_fp") else _fmt(v))
        writer.writerow(cells)
    return buf.getvalue()


_FLOAT_MARK = "\u0000f"
_FLOAT_RE = re.compile(r'"\\u0000f([^"]*)"')


def _mark_floats(obj):
    if isinstance(obj, float):
        return _FLOAT_MARK + _fmt(obj) if math.isfinite(obj) else obj
    if isinstance(obj, dict):
        return {k: _mark_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_mark_floats(v) for v in obj]
    return obj


def report_json(report: CaseReport) -> str:
    """JSON text with every float written in fixed 6-decimal notation."""
    text = json.dumps(_mark_floats(report.to_dict()), indent=2)
    return _FLOAT_RE.sub(r"\1", text) + "\n"


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = None
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        if tmp and os.path.exists(tmp):
            os.unlink(tmp)
        raise OutputError(f"{path}: cannot write ({exc})") from exc


def write_case_report(report: CaseReport, path) -> None:
    atomic_write_text(path, report_json(report))


def write_cohort_csv(reports: Iterable[CaseReport], path) -> None:
    atomic_write_text(path, cohort_csv(reports))
