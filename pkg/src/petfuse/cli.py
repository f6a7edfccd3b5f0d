"""Command-line entry point (``petfuse``).

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""
import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, PetfuseError
from .fusion import StapleParams, majority_vote, mean_prob_fusion, staple
from .metrics import case_metrics
from .nifti import read_nifti, write_nifti
from .phantom import write_phantom
from .pipeline import (
    PipelineConfig,
    load_inputs,
    preprocess_case,
    read_manifest,
    run_batch,
    run_case,
)
from .predictor import PredictorBinding, PredictorKind
from .volume import Kind

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("petfuse")


def _load_config(args):
    cfg = PipelineConfig.load(args.config)
    if getattr(args, "output", None):
        cfg = cfg.with_(output_dir=args.output)
    return cfg


def cmd_run(args):
    cfg = _load_config(args)
    report = run_case(cfg, workers=args.workers)
    out = {"case_id": report.case_id, "status": report.status, "outputs": report.outputs}
    if report.metrics:
        out["dice"] = report.metrics["dice"]
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_batch(args):
    cfg = _load_config(args)
    result = run_batch(args.manifest, cfg, workers=args.workers,
                       concurrent_cases=args.concurrent_cases)
    summary = {k: v for k, v in result.summary.items() if k != "cases"}
    print(json.dumps(summary, indent=2))
    return EXIT_RUNTIME if result.failed else EXIT_OK


def cmd_fuse(args):
    method = args.method.lower()
    if method == "mean":
        vols = [read_nifti(p, kind=Kind.PROBABILITY) for p in args.masks]
    else:
        vols = [read_nifti(p, kind=Kind.LABEL) for p in args.masks]
    report = {"method": method.upper(), "inputs": list(args.masks)}
    if method == "staple":
        res = staple(vols, StapleParams(max_iters=args.max_iters, tol=args.tol))
        consensus = res.consensus
        report.update(res.diagnostics())
    elif method == "majority":
        consensus = majority_vote(vols)
    else:
        consensus = mean_prob_fusion(vols, args.threshold)
    write_nifti(consensus, args.out)
    text = json.dumps(report, indent=2)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_metrics(args):
    if args.manifest:
        rows = _metrics_manifest(args.manifest)
    elif args.pred and args.gt:
        rows = [("case", args.pred, args.gt)]
    else:
        raise ConfigError("give --pred and --gt, or --manifest")
    cases = []
    for case_id, pred_path, gt_path in rows:
        m = case_metrics(read_nifti(pred_path, kind=Kind.LABEL), read_nifti(gt_path, kind=Kind.LABEL))
        cases.append({"case_id": case_id, "dice": m.dice, "fp_volume_ml": m.fp_volume_ml,
                      "fn_volume_ml": m.fn_volume_ml})
    keys = ("dice", "fp_volume_ml", "fn_volume_ml")
    mean = {k: math.fsum(c[k] for c in cases) / len(cases) for k in keys} if cases else {}
    result = {"cases": cases, "mean": mean}

    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["case_id", *keys], lineterminator="\n")
    w.writeheader()
    w.writerows(cases)
    if cases:
        w.writerow({"case_id": "mean", **mean})
    if args.csv:
        Path(args.csv).write_text(buf.getvalue())
    if args.json:
        Path(args.json).write_text(json.dumps(result, indent=2) + "\n")
    if args.format == "csv":
        sys.stdout.write(buf.getvalue())
    else:
        print(json.dumps(result, indent=2))
    return EXIT_OK


def _metrics_manifest(path):
    path = Path(path)
    try:
        reader = csv.DictReader(path.read_text().splitlines())
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    if not reader.fieldnames or not {"pred", "gt"} <= set(reader.fieldnames):
        raise ConfigError("metrics manifest needs columns pred, gt (and optionally case_id)")
    rows = []
    for i, row in enumerate(reader):
        resolve = lambda p: str(p if Path(p).is_absolute() else path.parent / p)
        rows.append((row.get("case_id") or f"case{i}", resolve(row["pred"]), resolve(row["gt"])))
    return rows


def cmd_preprocess(args):
    cfg = _load_config(args)
    ct, pet, gt = load_inputs(cfg)
    prep = preprocess_case(cfg, ct, pet, gt)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {
        "body_mask": prep.body_mask,
        "ct_cropped": prep.cropped_ct,
        "pet_cropped": prep.cropped_pet,
        "ct_preprocessed": prep.ct,
        "pet_preprocessed": prep.pet,
    }
    if prep.gt is not None:
        written["gt_preprocessed"] = prep.gt
    paths = {}
    for name, vol in written.items():
        paths[name] = str(out / f"{name}.nii.gz")
        write_nifti(vol, paths[name])
    print(json.dumps({"body_bbox": [prep.body_bbox.lo, prep.body_bbox.hi],
                      "preprocessed_dims": prep.ct.dims, "outputs": paths}, indent=2))
    return EXIT_OK


def cmd_phantom(args):
    n = args.size
    out = Path(args.out).resolve()
    paths = write_phantom(str(out), dims=(n, n, n), spacing=(args.spacing,) * 3)
    folds = [PredictorBinding(PredictorKind.ORACLE, smooth_sigma_mm=1.0, noise_amp=0.05, seed=k)
             for k in range(args.folds)]
    cfg = PipelineConfig(
        input_ct=paths["ct"], input_pet=paths["pet"], gt=paths["gt"],
        output_dir=str(out / "run"), case_id="phantom", folds=folds,
    )
    cfg_path = out / "config.json"
    cfg.save(cfg_path)
    print(json.dumps({**paths, "config": str(cfg_path)}, indent=2))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="petfuse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"petfuse {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one case end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int)
    p.add_argument("--output", help="override output_dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("batch", help="run every case of a CSV manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int)
    p.add_argument("--concurrent-cases", type=int, default=1)
    p.add_argument("--output", help="override output_dir")
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("fuse", help="fuse binary masks into a consensus")
    p.add_argument("masks", nargs="+")
    p.add_argument("--method", choices=["staple", "majority", "mean"], default="staple")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-7)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("metrics", help="Dice and FP/FN volumes")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--manifest", help="CSV with case_id,pred,gt")
    p.add_argument("--csv")
    p.add_argument("--json")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("preprocess", help="write cropped/normalised volumes for inspection")
    p.add_argument("--config", required=True)
    p.add_argument("--output", help="override output_dir")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("phantom", help="write a synthetic case and a matching config")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--spacing", type=float, default=2.0)
    p.add_argument("--folds", type=int, default=5)
    p.set_defaults(func=cmd_phantom)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"petfuse: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PetfuseError, OSError) as exc:
        code = getattr(exc, "code", type(exc).__name__)
        print(f"petfuse: {code}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
