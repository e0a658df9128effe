"""Command line: ``madm {train,eval,synth,distill,plot}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .core import ConfusionMatrix, Palette
from .data import DatasetManifest, LoadError, generate_synthetic, load_arrays
from .segmentation import MetricError, confusion_update, evaluation_report, write_report

log = logging.getLogger("madm")


class UsageError(Exception):
    pass


def runs_root() -> Path:
    return Path(os.environ.get("MADM_RUNS_DIR", "runs"))


def new_run_dir(kind: str, seed: int | None = None) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    name = f"{kind}-{stamp}" + ("" if seed is None else f"-s{seed}")
    path = runs_root() / name
    n = 1
    while path.exists():
        path = runs_root() / f"{name}-{n}"
        n += 1
    path.mkdir(parents=True)
    return path


def parse_overrides(tokens: list[str]) -> dict:
    """``--key value`` pairs; values parsed as YAML scalars. Last writer wins."""
    out: dict = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            raw = next(it, None)
            if raw is None:
                raise UsageError(f"override {tok} needs a value")
        out[key] = _scalar(raw)
    return out


def _scalar(raw: str):
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads "1e-4" as a string; numeric overrides should not
        try:
            return float(value)
        except ValueError:
            pass
    return value


def load_config(path: str | None, overrides: dict, ablation_flags: dict):
    from .train import TrainConfig

    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError(f"config {path} must be a mapping of keys to values")
    merged = {**raw, **overrides, **ablation_flags}
    unknown = sorted(set(merged) - TrainConfig.keys())
    if unknown:
        raise UsageError(f"invalid config keys: {', '.join(unknown)}")
    modality = merged.get("modality", "edge")
    try:
        return TrainConfig.desk(modality, **merged)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _bundle(args, cfg):
    from .experiment import directory_bundle, manifest_bundle, synthetic_bundle

    if args.data:
        return directory_bundle(args.data, cfg.data_fraction, cfg.seed)
    if args.source_manifest:
        if not (args.target_manifest and args.eval_manifest):
            raise UsageError("--source-manifest needs --target-manifest and --eval-manifest")
        return manifest_bundle(DatasetManifest.load(args.source_manifest),
                               DatasetManifest.load(args.target_manifest),
                               DatasetManifest.load(args.eval_manifest),
                               cfg.data_fraction, cfg.seed)
    return synthetic_bundle(cfg, args.data_seed)


def _ablation_flags(args) -> dict:
    flags = {}
    if args.no_dplg:
        flags["use_dplg"] = False
    if args.no_lplr:
        flags["use_lplr"] = False
        flags["lambda_reg"] = 0.0
    if args.data_fraction is not None:
        flags["data_fraction"] = args.data_fraction
    return flags


def cmd_train(args, extra) -> int:
    from .experiment import run_training

    cfg = load_config(args.config, parse_overrides(extra), _ablation_flags(args))
    data = _bundle(args, cfg)
    run_dir = Path(args.out) if args.out else new_run_dir("train", cfg.seed)
    rec = run_training(cfg, data, run_dir)
    print(json.dumps({"run_dir": str(run_dir), "mean_iou": rec["eval"]["mean_iou"]}))
    return 0


def _predictions_from_dir(pred_dir: Path, manifest: DatasetManifest) -> np.ndarray:
    from .data import _read_png

    preds = []
    for _, lab_rel in manifest.pairs:
        name = Path(lab_rel).name if lab_rel else None
        if name is None:
            raise UsageError("manifest entry has no label file to pair predictions with")
        preds.append(_read_png(pred_dir / name, "L").astype(np.int64))
    return np.stack(preds)


def cmd_eval(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments: {' '.join(extra)}")
    manifest = DatasetManifest.load(args.manifest)
    images, labels = load_arrays(manifest, for_eval=True)
    if labels is None:
        raise UsageError(f"manifest {args.manifest} has no labels to evaluate against")
    if args.predictions:
        from .data import merge_classes

        preds = merge_classes(_predictions_from_dir(Path(args.predictions), manifest),
                              manifest.class_merge)
        num_classes = manifest.num_classes
    elif args.checkpoint:
        from .train import load_model, predict_arrays

        model, mf = load_model(args.checkpoint)
        num_classes = mf["num_classes"]
        if num_classes != manifest.num_classes:
            raise UsageError(f"checkpoint predicts {num_classes} classes but manifest has "
                             f"{manifest.num_classes}")
        preds = predict_arrays(model, images)
    else:
        raise UsageError("eval needs --checkpoint or --predictions")
    cm = ConfusionMatrix.zeros(num_classes)
    for p, g in zip(preds, labels):
        cm = confusion_update(cm, p, g)
    report = evaluation_report(cm, manifest.class_names or None, args.count_absent_as_zero)
    out = Path(args.out) if args.out else new_run_dir("eval")
    jpath, cpath = write_report(report, cm, out)
    print(json.dumps({"report": str(jpath), "confusion": str(cpath),
                      "mean_iou": report["mean_iou"]}))
    return 0


def cmd_synth(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments: {' '.join(extra)}")
    out = Path(args.out) if args.out else new_run_dir("synth", args.seed)
    mans = generate_synthetic(args.seed, args.n_scenes, args.resolution, args.modality, out,
                              args.n_val)
    Palette.default(mans["source"]["train"].num_classes).save(out / "palette.json")
    print(json.dumps({"out": str(out), "train_pairs": len(mans["source"]["train"]),
                      "val_pairs": len(mans["source"]["val"])}))
    return 0


def cmd_distill(args, extra) -> int:
    from .experiment import evaluate_model
    from .train import distill

    if not Path(args.teacher).exists():
        raise UsageError(f"teacher checkpoint {args.teacher} does not exist")
    cfg = load_config(args.config, parse_overrides(extra), {})
    data = _bundle(args, cfg)
    arch = json.loads(args.student_arch) if args.student_arch else None
    out = Path(args.out) if args.out else new_run_dir("distill", cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    student, teacher, _ = distill(args.teacher, arch, cfg, data.x_s, data.y_s, data.x_t,
                                  out / "student.npz", out / "metrics.csv")
    t_cm, _ = evaluate_model(teacher, data.x_eval, data.y_eval, cfg.num_classes)
    s_cm, _ = evaluate_model(student, data.x_eval, data.y_eval, cfg.num_classes)
    report = {
        "teacher_checkpoint": str(args.teacher),
        "teacher": evaluation_report(t_cm, data.class_names),
        "student": evaluation_report(s_cm, data.class_names),
    }
    report["ratio"] = report["student"]["mean_iou"] / report["teacher"]["mean_iou"]
    (out / "distill_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps({"out": str(out), "teacher_miou": report["teacher"]["mean_iou"],
                      "student_miou": report["student"]["mean_iou"]}))
    return 0


def cmd_plot(args, extra) -> int:
    from .plotting import plot_runs

    if extra:
        raise UsageError(f"unexpected arguments: {' '.join(extra)}")
    if not args.runs:
        raise UsageError("plot needs at least one run directory")
    out = Path(args.out) if args.out else new_run_dir("plot")
    files = plot_runs([Path(r) for r in args.runs], out)
    print(json.dumps({"files": [str(f) for f in files]}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="madm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp):
        sp.add_argument("--data", help="directory written by `madm synth`")
        sp.add_argument("--source-manifest")
        sp.add_argument("--target-manifest")
        sp.add_argument("--eval-manifest")
        sp.add_argument("--data-seed", type=int, default=0,
                        help="seed of the in-memory synthetic benchmark when no data is given")

    t = sub.add_parser("train", help="run self-training; extra --key value pairs override config")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--no-dplg", action="store_true", help="disable latent noise (k = 0)")
    t.add_argument("--no-lplr", action="store_true",
                   help="disable latent regression and the high-resolution feature")
    t.add_argument("--data-fraction", type=float)
    data_args(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="mIoU of a checkpoint (or prediction PNGs) on a manifest")
    e.add_argument("--checkpoint")
    e.add_argument("--predictions", help="directory of label PNGs named like the manifest labels")
    e.add_argument("--manifest", required=True)
    e.add_argument("--out")
    e.add_argument("--count-absent-as-zero", action="store_true")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write the synthetic paired-modality benchmark")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-scenes", type=int, default=200)
    s.add_argument("--n-val", type=int)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--modality", default="edge", choices=["edge", "inverse-depth", "thermal-like"])
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth)

    d = sub.add_parser("distill", help="train a student against a frozen trained model")
    d.add_argument("--teacher", required=True)
    d.add_argument("--config")
    d.add_argument("--student-arch", help="JSON overriding backbone/head_width/use_hr")
    d.add_argument("--out")
    data_args(d)
    d.set_defaults(func=cmd_distill)

    pl = sub.add_parser("plot", help="loss curves, ablation bars and prediction grids")
    pl.add_argument("runs", nargs="*")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except UsageError as exc:
        print(f"madm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (LoadError, MetricError, ValueError) as exc:
        print(f"madm {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
