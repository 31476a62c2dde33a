"""Command-line entry point.

Exit codes: 0 success, 1 invalid input (arguments, config, missing or
malformed files), 2 failure while running (e.g. diverged training).
Every successful run writes ``run_manifest.json`` into ``--out-dir``.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .evaluation import (
    MetricRecord,
    PhaseReport,
    per_phase_report,
    read_report_csv,
    summarize,
    write_report_csv,
    write_report_json,
)
from .networks import CheckpointError
from .phantom import PhantomSpec, build_corpus, export_study, generate
from .pipeline import (
    PRECISIONS,
    AblationPlan,
    Model,
    TrainConfig,
    TrainingDiverged,
    infer_bidirectional,
    infer_single,
    load_study,
    run_interval_ablation,
    train_motion,
    train_segmentation,
    write_run_manifest,
)
from .volume import LabelMask, VolumeFormatError, load_manifest, load_mask, save_volume


class UsageError(Exception):
    """Invalid command line or input; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return doc


def _train_config(args, **overrides) -> TrainConfig:
    doc = _load_json(args.config)
    doc.update({k: v for k, v in overrides.items() if v is not None})
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.precision is not None:
        doc["precision"] = args.precision
    return TrainConfig.from_json(doc)


def _dtype(args):
    return PRECISIONS[args.precision or "f32"]


def _progress(quiet: bool):
    return None if quiet else (lambda msg: print(msg, flush=True))


# ---------------------------------------------------------------------------
# Subcommands; each returns the config dict recorded in the run manifest
# ---------------------------------------------------------------------------

def cmd_phantom_gen(args, out: Path) -> dict:
    doc = _load_json(args.config)
    known = {f.name for f in fields(PhantomSpec)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise UsageError(f"unknown phantom config keys: {unknown}")
    if args.seed is not None:
        doc["seed"] = args.seed
    for key in ("dims", "semi_axes", "spacing", "center"):
        if doc.get(key) is not None:
            doc[key] = tuple(doc[key])
    spec = PhantomSpec(**doc)
    spec.validate()
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.count == 1 and not args.jitter:
        export_study(generate(spec), out / f"study-{spec.seed}", f"study-{spec.seed}")
    else:
        build_corpus(spec, range(spec.seed, spec.seed + args.count), out)
    cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()}
    return {"phantom": cfg, "count": args.count, "jitter": bool(args.jitter or args.count > 1)}


def cmd_train_motion(args, out: Path) -> dict:
    cfg = _train_config(args, train_studies=args.studies or None, epochs_motion=args.epochs)
    train_motion(cfg, out_dir=out, progress=_progress(args.quiet))
    return cfg.to_json()


def cmd_train_seg(args, out: Path) -> dict:
    cfg = _train_config(args, train_studies=args.studies or None, epochs_seg=args.epochs,
                        motion_source="zero" if args.zero_motion else None)
    motion = Model.load(args.motion) if args.motion else None
    train_segmentation(cfg, motion, out_dir=out, progress=_progress(args.quiet), stem=args.stem)
    return {**cfg.to_json(), "motion_checkpoint": args.motion}


def cmd_infer(args, out: Path) -> dict:
    seg = Model.load(args.seg)
    motion = Model.load(args.motion) if args.motion and args.direction != "zero" else None
    if motion is None and args.direction != "zero":
        raise UsageError("--motion is required unless --direction zero")
    study = load_study(args.study)
    phases = args.phases if args.phases else list(range(study.num_phases))
    for t in phases:
        if not 0 <= t < study.num_phases:
            raise UsageError(f"phase {t} out of range for {study.num_phases} phases")
    dtype = _dtype(args)
    masks = []
    for t in phases:
        if args.direction == "both":
            res = infer_bidirectional(motion, seg, study, t, args.boundary, dtype)
        else:
            res = infer_single(motion, seg, study, t, args.direction, args.boundary, dtype)
        name = f"t{t}.mask"
        save_volume(res.mask, out / name)
        masks.append(name)
    (out / "predictions.json").write_text(json.dumps(
        {"study_id": study.study_id, "phases": phases, "masks": masks}, indent=1) + "\n")
    return {"motion": args.motion, "seg": args.seg, "study": str(args.study), "phases": phases,
            "direction": args.direction, "boundary": args.boundary, "precision": args.precision or "f32"}


def _prediction_masks(pred_dir: Path) -> dict[int, LabelMask]:
    listing = pred_dir / "predictions.json"
    if listing.exists():
        doc = json.loads(listing.read_text())
        return {int(t): load_mask(pred_dir / m) for t, m in zip(doc["phases"], doc["masks"])}
    found = {}
    for path in pred_dir.glob("t*.mask.json"):
        m = re.fullmatch(r"t(\d+)\.mask\.json", path.name)
        if m:
            found[int(m.group(1))] = load_mask(pred_dir / f"t{m.group(1)}.mask")
    if not found:
        raise UsageError(f"no t<k>.mask files in {pred_dir}")
    return found


def cmd_eval(args, out: Path) -> dict:
    truth = load_manifest(args.truth)
    if not truth.masks:
        raise UsageError(f"study {truth.study_id} has no ground-truth masks")
    preds = _prediction_masks(Path(args.pred))
    phases = sorted(preds)
    if phases[-1] >= truth.num_phases:
        raise UsageError(f"prediction for phase {phases[-1]} but the study has {truth.num_phases} phases")
    gts = [load_mask(truth.path(truth.masks[t])) for t in phases]
    report = per_phase_report([preds[t] for t in phases], gts, truth.spacing, truth.study_id,
                              classes=tuple(args.classes))
    for rec, t in zip(report.records, [t for t in phases for _ in args.classes]):
        rec.time_index = t
    write_report_csv(report.rows(), out / "report.csv")
    write_report_json(report, out / "report.json")
    for row in report.summary:
        if row.kind == "mean":
            hd = "n/a" if row.hausdorff_mm is None else f"{row.hausdorff_mm:.3f}"
            print(f"class {row.class_id}: dice {row.dice:.4f} jaccard {row.jaccard:.4f} hausdorff_mm {hd}")
    return {"pred": str(args.pred), "truth": str(args.truth), "classes": list(args.classes)}


def cmd_ablate(args, out: Path) -> dict:
    plan = AblationPlan(ed=args.ed, es=args.es)
    study = load_study(args.study)
    records = run_interval_ablation(plan, args.motion, args.seg, study, _dtype(args))
    write_report_csv(records, out / "ablation.csv")
    for r in records:
        print(f"{r.kind} t{r.time_index}: dice {r.dice:.4f}")
    return {"motion": args.motion, "seg": args.seg, "study": str(args.study), "ed": args.ed, "es": args.es}


def cmd_report(args, out: Path) -> dict:
    """Pool the per-phase rows of several report CSVs and summarise per record kind."""
    rows: list[MetricRecord] = []
    for path in args.reports:
        if not Path(path).exists():
            raise UsageError(f"report {path} not found")
        rows.extend(r for r in read_report_csv(path) if r.kind not in ("mean", "std"))
    if not rows:
        raise UsageError("no per-phase rows in the given reports")
    summary = []
    for kind in sorted({r.kind for r in rows}):
        part, _ = summarize([r for r in rows if r.kind == kind], kind)
        summary.extend(part)
    write_report_csv(summary, out / "summary.csv")
    skipped = sum(1 for r in rows if r.error)
    write_report_json(PhaseReport(rows, summary, skipped), out / "summary.json")
    for row in summary:
        if row.kind == "mean":
            print(f"{row.study_id} class {row.class_id}: mean dice {row.dice:.4f}")
    return {"reports": [str(p) for p in args.reports]}


COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "train-motion": cmd_train_motion,
    "train-seg": cmd_train_seg,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate-intervals": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--out-dir", default=".", help="directory for every output file")
    common.add_argument("--precision", choices=sorted(PRECISIONS), help="floating-point mode")
    common.add_argument("--quiet", action="store_true", help="suppress progress lines")

    parser = _Parser(prog="ssbl", description="Motion-guided cardiac cavity segmentation.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("phantom-gen", parents=[common], help="synthetic beating-ventricle studies")
    p.add_argument("--count", type=int, default=1, help="number of studies (seeds seed..seed+count-1)")
    p.add_argument("--jitter", action="store_true", help="jitter geometry even for a single study")

    p = sub.add_parser("train-motion", parents=[common], help="unsupervised motion network training")
    p.add_argument("studies", nargs="*", help="study directories (override train_studies)")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-seg", parents=[common], help="supervised segmentation training")
    p.add_argument("studies", nargs="*", help="study directories (override train_studies)")
    p.add_argument("--motion", help="motion checkpoint")
    p.add_argument("--zero-motion", action="store_true", help="train the no-motion baseline")
    p.add_argument("--epochs", type=int)
    p.add_argument("--stem", default="seg", help="checkpoint file stem")

    p = sub.add_parser("infer", parents=[common], help="segment phases of a study")
    p.add_argument("--study", required=True)
    p.add_argument("--seg", required=True, help="segmentation checkpoint")
    p.add_argument("--motion", help="motion checkpoint")
    p.add_argument("--phases", type=int, nargs="*")
    p.add_argument("--direction", default="both", choices=["both", "chronological", "reverse", "zero"])
    p.add_argument("--boundary", default="cyclic", choices=["cyclic", "mirror"])

    p = sub.add_parser("eval", parents=[common], help="score predicted masks against a study")
    p.add_argument("--pred", required=True, help="directory of predicted t<k>.mask files")
    p.add_argument("--truth", required=True, help="study directory with ground-truth masks")
    p.add_argument("--classes", type=int, nargs="+", default=[1])

    p = sub.add_parser("ablate-intervals", parents=[common], help="ED/ES Dice per interval scheme")
    p.add_argument("--study", required=True)
    p.add_argument("--motion", required=True)
    p.add_argument("--seg", required=True)
    p.add_argument("--ed", type=int, default=1)
    p.add_argument("--es", type=int, default=5)

    p = sub.add_parser("report", parents=[common], help="summarise report CSVs")
    p.add_argument("reports", nargs="+")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        config = COMMANDS[args.command](args, out)
        seed = args.seed if args.seed is not None else config.get("seed", config.get("phantom", {}).get("seed", 0))
        write_run_manifest(out, args.command, config, seed)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, CheckpointError, VolumeFormatError, IndexError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, RuntimeError, OSError, FloatingPointError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
