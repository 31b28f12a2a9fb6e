"""Command-line interface.

Subcommands: ensemble, postprocess, evaluate, sweep, phantom, pipeline.
Errors print ``tumorpipe: error [<category>]: <message>`` to stderr and exit
with a category-specific code (see ``EXIT_CODES``).
"""
from __future__ import annotations

import argparse
import json
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .config import PRESET_NAMES, RunConfig, load_table, resolve
from .core import decode_labels
from .ensemble import Manifest, fuse_case, load_manifest, load_members
from .errors import (
    ConfigError,
    GeometryMismatchError,
    MissingInputError,
    NiftiFormatError,
    OutputError,
    SchemaError,
    TumorPipeError,
)
from .io_nifti import read_label_volume, write_label_volume, write_prob_volume
from .metrics import CaseReport, evaluate_case, write_case_report, write_cohort_csv
from .phantom import PhantomSpec, generate_cohort, write_phantom
from .postprocess import postprocess
from .sweep import SweepCase, emit_curve, spec_from_mapping, sweep

USAGE_EXIT = 2
EXIT_CODES = {
    "usage": USAGE_EXIT,
    MissingInputError.category: MissingInputError.exit_code,
    GeometryMismatchError.category: GeometryMismatchError.exit_code,
    ConfigError.category: ConfigError.exit_code,
    NiftiFormatError.category: NiftiFormatError.exit_code,
    SchemaError.category: SchemaError.exit_code,
    OutputError.category: OutputError.exit_code,
}

NIFTI_RE = re.compile(r"\.nii(\.gz)?$")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _stem(path: Path) -> str:
    return NIFTI_RE.sub("", path.name)


def _nifti_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise MissingInputError(f"{d}: directory not found")
    return sorted(p for p in d.iterdir() if p.is_file() and NIFTI_RE.search(p.name))


def pair_cases(pred_dir, gt_dir) -> list[tuple[str, Path, Path]]:
    """Pair predictions with ground truth by case id.

    The case id is the prediction file stem; the matching ground-truth file has
    the same stem, or starts with it followed by ``-``, ``_`` or ``.``.
    """
    preds = _nifti_files(pred_dir)
    gts = _nifti_files(gt_dir)
    if not preds:
        raise MissingInputError(f"{pred_dir}: no NIfTI files")
    by_stem = {_stem(g): g for g in gts}
    pairs = []
    for p in preds:
        case = _stem(p)
        if case in by_stem:
            pairs.append((case, p, by_stem[case]))
            continue
        hits = [g for s, g in by_stem.items() if s.startswith(case) and s[len(case)] in "-_."]
        if not hits:
            raise MissingInputError(f"no ground truth for case {case!r} in {gt_dir}")
        if len(hits) > 1:
            raise ConfigError(f"ambiguous ground truth for case {case!r}: {[h.name for h in hits]}")
        pairs.append((case, p, hits[0]))
    return pairs


def load_pairs(path) -> list[tuple[str, Path, Path]]:
    """Explicit pairing manifest: JSON list of ``{case, pred, gt}``."""
    path = Path(path)
    data = load_table(path)
    if isinstance(data, dict):
        data = data.get("cases", [])
    base = path.parent
    try:
        return sorted((str(d["case"]), base / d["pred"], base / d["gt"]) for d in data)
    except KeyError as exc:
        raise ConfigError(f"{path}: pairing entry missing field {exc}") from None


def _map(fn: Callable, tasks: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(fn, *zip(*tasks)))


# --------------------------------------------------------------------------- #
# stage workers (module level so they can be pickled)


def _ensemble_task(case: str, manifest: Manifest, cfg: RunConfig, out: Path) -> tuple[str, str]:
    members = load_members(manifest.for_case(case))
    probs = fuse_case(manifest.config, members)
    labels = decode_labels(probs, cfg.decode.t_wt, cfg.decode.t_tc, cfg.decode.t_et)
    prob_path = out / "probs" / f"{case}.nii.gz"
    label_path = out / "labels" / f"{case}.nii.gz"
    write_prob_volume(probs, prob_path)
    write_label_volume(labels, label_path, cfg.schema)
    return str(prob_path), str(label_path)


def _postprocess_task(src: Path, dst: Path, cfg: RunConfig) -> str:
    labels = read_label_volume(src, cfg.schema)
    write_label_volume(postprocess(labels, cfg.postprocess), dst, cfg.schema)
    return str(dst)


def _evaluate_task(case: str, pred: Path, gt: Path, cfg: RunConfig, out: Path) -> CaseReport:
    p = read_label_volume(pred, cfg.schema)
    g = read_label_volume(gt, cfg.schema)
    try:
        report = evaluate_case(p, g, cfg.metrics, case_id=case)
    except GeometryMismatchError as exc:
        raise GeometryMismatchError(f"case {case}: {exc}") from exc
    write_case_report(report, out / f"{case}.json")
    return report


# --------------------------------------------------------------------------- #
# subcommands


def run_ensemble(cfg: RunConfig, out: Path) -> list[tuple[str, str]]:
    if not cfg.manifest:
        raise MissingInputError("ensemble needs --manifest")
    manifest = load_manifest(cfg.manifest, config=cfg.ensemble)
    cases = manifest.cases()
    return _map(_ensemble_task, [(c, manifest, cfg, out) for c in cases], cfg.jobs)


def _label_inputs(inputs: Sequence[str]) -> list[Path]:
    files = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            files.extend(_nifti_files(p))
        elif p.is_file():
            files.append(p)
        else:
            raise MissingInputError(f"{p}: not found")
    if not files:
        raise MissingInputError("no input label files")
    return files


def run_postprocess(cfg: RunConfig, inputs: Sequence[str], out: Path) -> list[str]:
    files = _label_inputs(inputs)
    names = [f.name for f in files]
    if len(set(names)) != len(names):
        raise ConfigError("input files share a file name; outputs would collide")
    return _map(_postprocess_task, [(f, out / f.name, cfg) for f in files], cfg.jobs)


def run_evaluate(cfg: RunConfig, pairs: Sequence[tuple[str, Path, Path]], out: Path) -> list[CaseReport]:
    if not pairs:
        raise MissingInputError("no cases to evaluate")
    reports = _map(_evaluate_task, [(c, p, g, cfg, out) for c, p, g in pairs], cfg.jobs)
    write_cohort_csv(reports, out / "cohort.csv")
    return reports


def _sweep_cases(table: dict, base: Path) -> list[SweepCase]:
    if "cases" in table:
        return [SweepCase(str(c["case"]), base / c["pred"], base / c["gt"]) for c in table["cases"]]
    if "pred_dir" in table and "gt_dir" in table:
        return [SweepCase(c, p, g) for c, p, g in pair_cases(base / table["pred_dir"], base / table["gt_dir"])]
    raise ConfigError("sweep spec needs 'cases' or 'pred_dir' and 'gt_dir'")


def _add_common(p: argparse.ArgumentParser, postprocess_flags: bool = True) -> None:
    p.add_argument("--preset", choices=PRESET_NAMES, help="task preset (default: custom)")
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--out", help="output directory (default: $TUMORPIPE_OUT or ./tumorpipe-out)")
    p.add_argument("--jobs", type=int, help="worker processes (default: CPU count)")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    if postprocess_flags:
        p.add_argument("--min-size", type=int, help="minimum component size in voxels")
        p.add_argument("--et-wt", type=float, help="ET/WT ratio threshold")
        p.add_argument("--ed-wt", type=float, help="ED/WT ratio threshold")
        p.add_argument("--connectivity", type=int, choices=(6, 18, 26))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tumorpipe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ensemble", help="fuse member probabilities and decode labels")
    p.add_argument("--manifest", help="member manifest JSON")
    _add_common(p)

    p = sub.add_parser("postprocess", help="size filter and ratio relabeling")
    p.add_argument("inputs", nargs="+", help="label files or directories")
    _add_common(p)

    p = sub.add_parser("evaluate", help="Dice / HD95 and lesion-wise scores")
    p.add_argument("--pred", help="prediction directory")
    p.add_argument("--gt", help="ground-truth directory")
    p.add_argument("--pairs", help="explicit pairing manifest (JSON list of {case, pred, gt})")
    _add_common(p)

    p = sub.add_parser("sweep", help="grid search over one post-processing threshold")
    p.add_argument("--spec", required=True, help="sweep spec (TOML/JSON)")
    _add_common(p)

    p = sub.add_parser("phantom", help="generate synthetic phantom cases")
    p.add_argument("--spec", help="phantom spec (TOML/JSON); defaults are used when omitted")
    p.add_argument("--n-cases", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--prefix", default="phantom")
    _add_common(p, postprocess_flags=False)

    p = sub.add_parser("pipeline", help="ensemble, postprocess and (with --gt) evaluate")
    p.add_argument("--manifest", help="member manifest JSON")
    p.add_argument("--gt", help="ground-truth directory for evaluation")
    _add_common(p)
    return parser


def _resolve(args) -> RunConfig:
    overrides = {
        "out": args.out,
        "jobs": args.jobs,
        "manifest": getattr(args, "manifest", None),
        "min_size": getattr(args, "min_size", None),
        "et_wt": getattr(args, "et_wt", None),
        "ed_wt": getattr(args, "ed_wt", None),
        "connectivity": getattr(args, "connectivity", None),
    }
    return resolve(args.preset, args.config, overrides)


def dispatch(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = _resolve(args)
    out = Path(cfg.out)
    resolved = cfg.to_dict()

    if args.command == "sweep":
        spec_path = Path(args.spec)
        table = load_table(spec_path)
        spec = spec_from_mapping(table, _sweep_cases(table, spec_path.parent), base=cfg.postprocess)
        if "metrics" not in table:
            spec = replace(spec, params=cfg.metrics)
        resolved["sweep"] = {
            "parameter": spec.parameter_name,
            "grid": list(spec.grid),
            "regions": [r.value for r in spec.regions],
            "cases": [c.case_id for c in spec.cases],
        }
        if args.dry_run:
            return _print_dry_run(resolved)
        curve = sweep(spec, jobs=cfg.jobs)
        csv_path, json_path = emit_curve(curve, out / "curve.csv")
        print(f"best {curve.parameter} = {curve.best_value} (objective {curve.best_objective:.6f})")
        print(csv_path)
        return 0

    if args.command == "phantom":
        table = load_table(args.spec) if args.spec else {}
        if args.seed is not None:
            table["seed"] = args.seed
        spec = PhantomSpec.from_mapping(table)
        resolved["phantom"] = {**spec.to_dict(), "n_cases": args.n_cases}
        if args.dry_run:
            return _print_dry_run(resolved)
        if args.n_cases < 1:
            raise ConfigError("--n-cases must be at least 1")
        for i, ph in enumerate(generate_cohort(spec, args.n_cases)):
            write_phantom(ph, out, f"{args.prefix}-{i:03d}")
        print(out)
        return 0

    if args.dry_run:
        return _print_dry_run(resolved)

    if args.command == "ensemble":
        for prob_path, label_path in run_ensemble(cfg, out):
            print(label_path)
    elif args.command == "postprocess":
        for path in run_postprocess(cfg, args.inputs, out):
            print(path)
    elif args.command == "evaluate":
        if args.pairs:
            pairs = load_pairs(args.pairs)
        elif args.pred and args.gt:
            pairs = pair_cases(args.pred, args.gt)
        else:
            raise MissingInputError("evaluate needs --pred and --gt, or --pairs")
        run_evaluate(cfg, pairs, out)
        print(out / "cohort.csv")
    elif args.command == "pipeline":
        run_ensemble(cfg, out / "ensemble")
        run_postprocess(cfg, [str(out / "ensemble" / "labels")], out / "postprocess")
        if args.gt:
            run_evaluate(cfg, pair_cases(out / "postprocess", args.gt), out / "evaluate")
        print(out)
    return 0


def _print_dry_run(resolved: dict) -> int:
    print(json.dumps(resolved, indent=2, default=str))
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return dispatch(argv)
    except UsageError as exc:
        print(f"tumorpipe: error [usage]: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except TumorPipeError as exc:
        print(f"tumorpipe: error [{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
