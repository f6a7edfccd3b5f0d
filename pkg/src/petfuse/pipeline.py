"""Run orchestration: config, one-pass preprocessing, fold fan-out, fusion.

A run preprocesses the case once, then evaluates every (fold, TTA variant)
pair on a thread pool. Each pair runs the full patch loop over the mirrored
volume. Reductions (patch aggregation, TTA mean, fusion) happen after all
work is collected and always in a fixed order, so the worker count changes
wall time only, never the output bytes.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple


from . import __version__
from .errors import ConfigError, PartialFailure, PetfuseError, StageError
from .fusion import StapleParams, majority_vote, mean_prob_fusion, staple
from .metrics import case_metrics
from .nifti import read_nifti, write_nifti
from .patching import DEFAULT_PATCH_SIZE, aggregate, extract_patch, gaussian_kernel, plan_patches
from .predictor import PatchContext, PredictorBinding, PredictorKind, predict, stable_hash
from .preprocess import (
    BodyMaskParams,
    CropSpec,
    Interp,
    NormalizationStats,
    compute_bbox,
    crop_with_padding,
    extract_body_mask,
    margin_voxels,
    normalize_ct,
    normalize_pet,
    resample,
    resample_to_grid,
)
from .tta import MirrorVariant, TtaPolicy, aggregate_tta, apply_mirror, select_variants
from .volume import BoundingBox, Kind, Volume3

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class FusionMethod(str, Enum):
    STAPLE = "STAPLE"
    MAJORITY = "MAJORITY"
    MEAN = "MEAN"


@dataclass(frozen=True)
class CropParams:
    margin_mm: float = 10.0
    pad_value_ct: float = -1024.0
    pad_value_pet: float = 0.0


@dataclass(frozen=True)
class PatchParams:
    patch_size: Tuple[int, int, int] = DEFAULT_PATCH_SIZE
    overlap_frac: float = 0.5
    sigma_scale: float = 1.0 / 8

    def __post_init__(self):
        if len(self.patch_size) != 3 or min(self.patch_size) < 1:
            raise ValueError(f"patch_size must be 3 positive ints, got {self.patch_size}")
        if not 0 <= self.overlap_frac < 1:
            raise ValueError("overlap_frac must lie in [0, 1)")
        if not self.sigma_scale > 0:
            raise ValueError("sigma_scale must be > 0")


def default_folds():
    return tuple(PredictorBinding(PredictorKind.THRESHOLD, seed=k) for k in range(5))


@dataclass(frozen=True)
class PipelineConfig:
    input_ct: Optional[str] = None
    input_pet: Optional[str] = None
    output_dir: str = "petfuse-out"
    gt: Optional[str] = None
    case_id: str = "case"
    target_spacing: Tuple[float, float, float] = (2.0, 2.0, 2.0)
    body_mask: BodyMaskParams = BodyMaskParams()
    crop: CropParams = CropParams()
    normalization: NormalizationStats = NormalizationStats()
    patch: PatchParams = PatchParams()
    tta: TtaPolicy = TtaPolicy()
    folds: Tuple[PredictorBinding, ...] = field(default_factory=default_folds)
    binarize_threshold: float = 0.5
    fusion: FusionMethod = FusionMethod.STAPLE
    staple: StapleParams = StapleParams()
    workers: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "folds", tuple(self.folds))
        object.__setattr__(self, "fusion", FusionMethod(self.fusion))
        object.__setattr__(self, "target_spacing", tuple(float(s) for s in self.target_spacing))
        if not self.folds:
            raise ConfigError("folds must not be empty")
        if not 0 < self.binarize_threshold < 1:
            raise ConfigError("binarize_threshold must lie in (0, 1)")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if len(self.target_spacing) != 3 or min(self.target_spacing) <= 0:
            raise ConfigError("target_spacing must be 3 positive values")

    # -- (de)serialisation ------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "case_id": self.case_id,
            "input_ct": self.input_ct,
            "input_pet": self.input_pet,
            "gt": self.gt,
            "output_dir": self.output_dir,
            "target_spacing": list(self.target_spacing),
            "body_mask": asdict(self.body_mask),
            "crop": asdict(self.crop),
            "normalization": asdict(self.normalization),
            "patch": {
                "patch_size": list(self.patch.patch_size),
                "overlap_frac": self.patch.overlap_frac,
                "sigma_scale": self.patch.sigma_scale,
            },
            "tta": {
                "voxel_budget": self.tta.voxel_budget,
                "full_set": [v.label() for v in self.tta.full_set],
                "reduced_set": [v.label() for v in self.tta.reduced_set],
            },
            "folds": [f.to_dict() for f in self.folds],
            "binarize_threshold": self.binarize_threshold,
            "fusion": {"method": self.fusion.value, "staple": self.staple.to_dict()},
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "PipelineConfig":
        d = dict(d)
        schema = d.pop("schema", None)
        if schema != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema {schema!r}, expected {SCHEMA_VERSION}")
        try:
            kw = {}
            for key in ("input_ct", "input_pet", "gt", "output_dir"):
                if d.get(key) is not None:
                    kw[key] = _resolve(d.pop(key), base_dir)
                else:
                    d.pop(key, None)
            for key in ("case_id", "binarize_threshold", "workers"):
                if key in d:
                    kw[key] = d.pop(key)
            if "target_spacing" in d:
                kw["target_spacing"] = tuple(d.pop("target_spacing"))
            if "body_mask" in d:
                kw["body_mask"] = BodyMaskParams(**d.pop("body_mask"))
            if "crop" in d:
                kw["crop"] = CropParams(**d.pop("crop"))
            if "normalization" in d:
                kw["normalization"] = NormalizationStats(**d.pop("normalization"))
            if "patch" in d:
                p = dict(d.pop("patch"))
                if "patch_size" in p:
                    p["patch_size"] = tuple(int(v) for v in p["patch_size"])
                kw["patch"] = PatchParams(**p)
            if "tta" in d:
                kw["tta"] = _tta_from_dict(d.pop("tta"))
            if "folds" in d:
                kw["folds"] = tuple(PredictorBinding.from_dict(f) for f in d.pop("folds"))
            if "fusion" in d:
                fz = d.pop("fusion")
                if isinstance(fz, str):
                    fz = {"method": fz}
                kw["fusion"] = FusionMethod(fz.get("method", "STAPLE").upper())
                if "staple" in fz:
                    kw["staple"] = StapleParams.from_dict(fz["staple"])
            if d:
                raise ConfigError(f"unknown config keys: {sorted(d)}")
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data, base_dir=path.parent)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def with_(self, **changes) -> "PipelineConfig":
        return replace(self, **changes)


def _resolve(p, base_dir):
    p = os.path.expanduser(str(p))
    if base_dir is not None and not os.path.isabs(p):
        p = os.path.join(str(base_dir), p)
    return p


def _parse_variant(label):
    if label == "id":
        return MirrorVariant()
    if set(label) - set("xyz"):
        raise ConfigError(f"bad mirror variant {label!r}")
    return MirrorVariant("x" in label, "y" in label, "z" in label)


def _tta_from_dict(d):
    kw = {}
    if "voxel_budget" in d:
        kw["voxel_budget"] = int(d["voxel_budget"])
    if "full_set" in d:
        kw["full_set"] = tuple(_parse_variant(v) for v in d["full_set"])
    if "reduced_set" in d:
        kw["reduced_set"] = tuple(_parse_variant(v) for v in d["reduced_set"])
    return TtaPolicy(**kw)


def resolve_workers(config: PipelineConfig, override: Optional[int] = None) -> int:
    if override is not None:
        return int(override)
    if config.workers is not None:
        return config.workers
    env = os.environ.get("PETFUSE_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"PETFUSE_WORKERS={env!r} is not an integer")
        if n < 1:
            raise ConfigError("PETFUSE_WORKERS must be >= 1")
        return n
    return 1


# -- run report ----------------------------------------------------------------


@dataclass
class RunReport:
    case_id: str
    status: str = "OK"
    engine_version: str = __version__
    config: dict = field(default_factory=dict)
    stage_timings_ms: Dict[str, float] = field(default_factory=dict)
    fold_timings_ms: List[float] = field(default_factory=list)
    variant_counts: List[int] = field(default_factory=list)
    variants: List[str] = field(default_factory=list)
    counters: Dict[str, int] = field(default_factory=dict)
    geometry: dict = field(default_factory=dict)
    fusion: dict = field(default_factory=dict)
    metrics: Optional[dict] = None
    outputs: Dict[str, str] = field(default_factory=dict)
    error: Optional[dict] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["metrics"] is None:
            del d["metrics"]
        if d["error"] is None:
            del d["error"]
        return d

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


class _Timer:
    def __init__(self, sink, name):
        self.sink, self.name = sink, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.sink[self.name] = self.sink.get(self.name, 0.0) + (time.perf_counter() - self.t0) * 1e3
        return False


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except PetfuseError as exc:
        raise StageError(name, exc) from exc


# -- preprocessing ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PreparedCase:
    """Everything the folds share, computed once per case."""

    original_ct: Volume3
    gt_original: Optional[Volume3]
    body_bbox: BoundingBox
    crop_box: BoundingBox
    ct: Volume3
    pet: Volume3
    gt: Optional[Volume3]
    cropped_ct: Volume3
    cropped_pet: Volume3
    body_mask: Volume3


def _check_inputs(config):
    for key in ("input_ct", "input_pet"):
        if not getattr(config, key):
            raise ConfigError(f"{key} is not set")
    if config.gt is None and any(f.kind is PredictorKind.ORACLE for f in config.folds):
        raise ConfigError("ORACLE folds need a ground-truth file (gt)")
    for key in ("input_ct", "input_pet", "gt"):
        p = getattr(config, key)
        if p is not None and not os.path.isfile(p):
            raise ConfigError(f"{key} file not found: {p}")


def load_inputs(config: PipelineConfig):
    _check_inputs(config)
    ct = _stage("load", read_nifti, config.input_ct, kind=Kind.CT)
    pet = _stage("load", read_nifti, config.input_pet, kind=Kind.PET)
    gt = _stage("load", read_nifti, config.gt, kind=Kind.LABEL) if config.gt else None
    if not pet.same_grid(ct):
        pet = _stage("align", resample_to_grid, pet, ct, Interp.TRILINEAR)
    if gt is not None and not gt.same_grid(ct):
        gt = _stage("align", resample_to_grid, gt, ct, Interp.NEAREST, fill=0.0)
    return ct, pet, gt


def preprocess_case(config: PipelineConfig, ct: Volume3, pet: Volume3,
                    gt: Optional[Volume3] = None, timings=None) -> PreparedCase:
    """Body mask -> bbox -> padded crop -> resample -> normalise."""
    timings = {} if timings is None else timings
    with _Timer(timings, "body_mask"):
        body = _stage("body_mask", extract_body_mask, ct, config.body_mask)
        bbox = _stage("bbox", compute_bbox, body, 0.0)
    with _Timer(timings, "crop"):
        cp = config.crop
        spec = CropSpec(bbox, cp.margin_mm, cp.pad_value_ct, cp.pad_value_pet)
        ct_c = _stage("crop", crop_with_padding, ct, spec)
        pet_c = _stage("crop", crop_with_padding, pet, spec)
        gt_c = _stage("crop", crop_with_padding, gt, spec) if gt is not None else None
        crop_box = bbox.dilate(margin_voxels(ct.spacing, cp.margin_mm))
    with _Timer(timings, "resample"):
        ts = config.target_spacing
        ct_r = _stage("resample", resample, ct_c, ts, Interp.TRILINEAR)
        pet_r = _stage("resample", resample, pet_c, ts, Interp.TRILINEAR)
        gt_r = _stage("resample", resample, gt_c, ts, Interp.NEAREST) if gt_c is not None else None
    with _Timer(timings, "normalize"):
        ct_n = _stage("normalize", normalize_ct, ct_r, config.normalization)
        pet_n = _stage("normalize", normalize_pet, pet_r)
    return PreparedCase(ct, gt, bbox, crop_box, ct_n, pet_n, gt_r, ct_c, pet_c, body)


# -- fold inference -------------------------------------------------------------


def _variant_code(v: MirrorVariant) -> int:
    return 4 * v.flip_x + 2 * v.flip_y + v.flip_z


def predict_volume(prep: PreparedCase, binding: PredictorBinding, variant: MirrorVariant,
                   patch: PatchParams, kernel, case_key: int, workdir=None) -> Volume3:
    """Mirror the inputs, run the patch loop, aggregate. Returns the mirrored-space map."""
    ct = apply_mirror(prep.ct, variant)
    pet = apply_mirror(prep.pet, variant)
    gt = apply_mirror(prep.gt, variant) if prep.gt is not None else None
    grid = plan_patches(ct.dims, patch.patch_size, patch.overlap_frac)
    outputs = []
    for i, origin in enumerate(grid.placements):
        ct_p = extract_patch(ct, origin, patch.patch_size, 0.0)
        pet_p = extract_patch(pet, origin, patch.patch_size, 0.0)
        truth = extract_patch(gt, origin, patch.patch_size, 0.0) if gt is not None else None
        ctx = PatchContext(truth=truth, key=(case_key, _variant_code(variant), i), workdir=workdir)
        outputs.append((origin, predict(binding, ct_p, pet_p, ctx)))
    return aggregate(outputs, grid, kernel, ct.dims)


def _timed(fn, *args):
    t0 = time.perf_counter()
    try:
        return fn(*args), None, (time.perf_counter() - t0) * 1e3
    except Exception as exc:  # collected per task; reported as a fold failure
        return None, exc, (time.perf_counter() - t0) * 1e3


def run_folds(prep: PreparedCase, config: PipelineConfig, workers: int, workdir=None):
    """Evaluate every (fold, variant) pair; returns per-fold soft maps and bookkeeping."""
    variants = select_variants(prep.ct.dims, config.tta)
    kernel = gaussian_kernel(config.patch.patch_size, config.patch.sigma_scale)
    case_key = stable_hash(config.case_id)
    tasks = [(f, v) for f in range(len(config.folds)) for v in range(len(variants))]

    def work(task):
        f, v = task
        return _timed(predict_volume, prep, config.folds[f], variants[v], config.patch,
                      kernel, case_key, workdir)

    if workers == 1:
        results = [work(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, tasks))

    by_fold = {f: [] for f in range(len(config.folds))}
    for (f, v), res in zip(tasks, results):
        by_fold[f].append((v, res))

    fold_maps, fold_ms, failures = [], [], {}
    for f in range(len(config.folds)):
        items = sorted(by_fold[f], key=lambda item: item[0])
        errors = [res[1] for _, res in items if res[1] is not None]
        fold_ms.append(sum(res[2] for _, res in items))
        if errors:
            failures[f] = f"{getattr(errors[0], 'code', type(errors[0]).__name__)}: {errors[0]}"
            fold_maps.append(None)
            continue
        fold_maps.append(aggregate_tta([(variants[v], res[0]) for v, res in items]))
    return fold_maps, fold_ms, variants, failures, len(tasks)


def binarize(prob: Volume3, threshold: float) -> Volume3:
    return prob.with_data(prob.data >= threshold, kind=Kind.LABEL)


def fuse_folds(config: PipelineConfig, fold_maps, fold_masks):
    if config.fusion is FusionMethod.STAPLE:
        res = staple(fold_masks, config.staple)
        diag = res.diagnostics()
        diag["method"] = "STAPLE"
        return res.consensus, diag
    if config.fusion is FusionMethod.MAJORITY:
        return majority_vote(fold_masks), {"method": "MAJORITY"}
    return mean_prob_fusion(fold_maps, config.binarize_threshold), {"method": "MEAN"}


def to_original_grid(label: Volume3, original: Volume3) -> Volume3:
    return resample_to_grid(label, original, Interp.NEAREST, fill=0.0)


def run_case(config: PipelineConfig, workers: Optional[int] = None, write: bool = True) -> RunReport:
    """Run one case end to end and write its artifacts into ``config.output_dir``.

    Raises :class:`PartialFailure` (with ``.report`` attached) when any fold
    fails; no consensus is written in that case.
    """
    workers = resolve_workers(config, workers)
    report = RunReport(case_id=config.case_id, config=config.to_dict())
    timings = report.stage_timings_ms
    t_start = time.perf_counter()

    with _Timer(timings, "load"):
        ct, pet, gt = load_inputs(config)
    prep = preprocess_case(config, ct, pet, gt, timings)
    report.counters["preprocess_runs"] = 1
    report.geometry = {
        "original_dims": list(ct.dims),
        "body_bbox": {"lo": list(prep.body_bbox.lo), "hi": list(prep.body_bbox.hi)},
        "crop_box": {"lo": list(prep.crop_box.lo), "hi": list(prep.crop_box.hi)},
        "preprocessed_dims": list(prep.ct.dims),
        "preprocessed_spacing": list(prep.ct.spacing),
    }

    out_dir = Path(config.output_dir)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)

    with _Timer(timings, "inference"):
        fold_maps, fold_ms, variants, failures, n_tasks = run_folds(
            prep, config, workers, workdir=str(out_dir) if write else None)
    report.fold_timings_ms = fold_ms
    report.variant_counts = [len(variants)] * len(config.folds)
    report.variants = [v.label() for v in variants]
    report.counters["fold_variant_tasks"] = n_tasks
    report.counters["workers"] = workers

    if failures:
        report.status = "FAILED"
        err = PartialFailure(failures)
        report.error = {"code": err.code, "message": str(err)}
        if write:
            report.write(out_dir / "report.json")
        err.report = report
        raise err

    with _Timer(timings, "fusion"):
        fold_masks = [binarize(m, config.binarize_threshold) for m in fold_maps]
        consensus, report.fusion = _stage("fusion", fuse_folds, config, fold_maps, fold_masks)

    with _Timer(timings, "restore"):
        consensus_orig = _stage("restore", to_original_grid, consensus, ct)
        folds_orig = [to_original_grid(m, ct) for m in fold_masks]

    if gt is not None:
        with _Timer(timings, "metrics"):
            m = case_metrics(consensus_orig, gt)
            report.metrics = m.to_dict()
            report.metrics["fold_dice"] = [case_metrics(f, gt).dice for f in folds_orig]

    if write:
        with _Timer(timings, "write"):
            paths = {"consensus": str(out_dir / "consensus.nii.gz")}
            write_nifti(consensus_orig, paths["consensus"])
            for k, fm in enumerate(folds_orig):
                paths[f"fold_{k}"] = str(out_dir / f"fold_{k}.nii.gz")
                write_nifti(fm, paths[f"fold_{k}"])
            paths["report"] = str(out_dir / "report.json")
            report.outputs = paths
    timings["total"] = (time.perf_counter() - t_start) * 1e3
    if write:
        report.write(out_dir / "report.json")
    return report


# -- batch ----------------------------------------------------------------------


@dataclass
class BatchResult:
    reports: List[RunReport]
    summary: dict

    @property
    def failed(self) -> List[str]:
        return [r.case_id for r in self.reports if r.status != "OK"]


def read_manifest(path) -> List[dict]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    rows = []
    reader = csv.DictReader(line for line in text.splitlines() if line.strip())
    if reader.fieldnames is None:
        return rows
    missing = {"case_id", "ct", "pet"} - set(reader.fieldnames)
    if missing:
        raise ConfigError(f"manifest {path} lacks columns {sorted(missing)}")
    for row in reader:
        gt = (row.get("gt") or "").strip() or None
        rows.append({
            "case_id": row["case_id"].strip(),
            "ct": _resolve(row["ct"].strip(), path.parent),
            "pet": _resolve(row["pet"].strip(), path.parent),
            "gt": _resolve(gt, path.parent) if gt else None,
        })
    return rows


def _run_one(template: PipelineConfig, row: dict, workers):
    t0 = time.perf_counter()
    try:
        cfg = template.with_(
            case_id=row["case_id"],
            input_ct=row["ct"],
            input_pet=row["pet"],
            gt=row["gt"],
            output_dir=os.path.join(template.output_dir, row["case_id"]),
        )
        return run_case(cfg, workers=workers)
    except PetfuseError as exc:
        report = getattr(exc, "report", None) or RunReport(case_id=row["case_id"], status="FAILED")
        report.status = "FAILED"
        report.error = {"code": exc.code, "message": str(exc)}
        report.stage_timings_ms.setdefault("total", (time.perf_counter() - t0) * 1e3)
        log.warning("case %s failed: %s", row["case_id"], exc)
        return report


def summarize(reports: List[RunReport]) -> dict:
    ok = [r for r in reports if r.status == "OK"]
    dices = [r.metrics["dice"] for r in ok if r.metrics]
    runtimes = [r.stage_timings_ms.get("total", 0.0) for r in ok]
    return {
        "n_cases": len(reports),
        "n_ok": len(ok),
        "n_failed": len(reports) - len(ok),
        "mean_dice": math.fsum(dices) / len(dices) if dices else None,
        "mean_runtime_ms": math.fsum(runtimes) / len(runtimes) if runtimes else None,
        "cases": [
            {
                "case_id": r.case_id,
                "status": r.status,
                "dice": r.metrics["dice"] if r.metrics else None,
                "runtime_ms": r.stage_timings_ms.get("total"),
                "error": (r.error or {}).get("code"),
            }
            for r in reports
        ],
    }


def run_batch(manifest, template: PipelineConfig, workers: Optional[int] = None,
              concurrent_cases: int = 1) -> BatchResult:
    """Run every manifest case; a failing case is recorded and the batch continues."""
    rows = read_manifest(manifest)
    if concurrent_cases > 1 and len(rows) > 1:
        with ThreadPoolExecutor(max_workers=concurrent_cases) as pool:
            reports = list(pool.map(lambda r: _run_one(template, r, workers), rows))
    else:
        reports = [_run_one(template, r, workers) for r in rows]
    summary = summarize(reports)
    out = Path(template.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["case_id", "status", "dice", "runtime_ms", "error"])
        w.writeheader()
        for row in summary["cases"]:
            w.writerow(row)
    return BatchResult(reports, summary)
