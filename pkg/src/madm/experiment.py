"""Glue between data, training and evaluation used by the CLI and the acceptance suite."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ConfusionMatrix
from .data import DatasetManifest, load_arrays, synthetic_arrays
from .segmentation import confusion_update, evaluation_report, write_report
from .train import (
    TrainConfig,
    fit_self_training,
    predict_arrays,
    pretrained_backbone,
    save_model,
)

ABLATION_ARMS = {
    "baseline": dict(use_dplg=False, use_lplr=False),
    "dplg": dict(use_dplg=True, use_lplr=False),
    "lplr": dict(use_dplg=False, use_lplr=True),
    "madm": dict(use_dplg=True, use_lplr=True),
}


@dataclass
class DataBundle:
    x_s: np.ndarray
    y_s: np.ndarray
    x_t: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    class_names: list[str] | None = None


def synthetic_bundle(cfg: TrainConfig, data_seed: int = 0, n_eval: int = 64) -> DataBundle:
    src, tgt, lab = synthetic_arrays(data_seed * 2, cfg.n_scenes, cfg.resolution, cfg.modality)
    _, vt, vl = synthetic_arrays(data_seed * 2 + 1, n_eval, cfg.resolution, cfg.modality)
    x_t = tgt.astype(np.float32) / 255
    if cfg.data_fraction < 1.0:
        keep = max(1, int(round(cfg.data_fraction * len(x_t))))
        x_t = x_t[np.sort(np.random.default_rng(data_seed).choice(len(x_t), keep, replace=False))]
    return DataBundle(src.astype(np.float32) / 255, lab, x_t, vt.astype(np.float32) / 255, vl)


def manifest_bundle(source: DatasetManifest, target: DatasetManifest, evaluation: DatasetManifest,
                    data_fraction: float = 1.0, seed: int = 0) -> DataBundle:
    x_s, y_s = load_arrays(source)
    if y_s is None:
        raise ValueError(f"source manifest {source.root} has no training labels")
    x_t, _ = load_arrays(target, fraction=data_fraction, seed=seed)
    x_e, y_e = load_arrays(evaluation, for_eval=True)
    if y_e is None:
        raise ValueError(f"evaluation manifest {evaluation.root} has no labels")
    return DataBundle(x_s, y_s, x_t, x_e, y_e, source.class_names or None)


def directory_bundle(root: str | Path, data_fraction: float = 1.0, seed: int = 0) -> DataBundle:
    """Bundle from a ``synth`` output directory (``source/`` and ``target/`` manifests)."""
    root = Path(root)
    return manifest_bundle(DatasetManifest.load(root / "source" / "train.json"),
                           DatasetManifest.load(root / "target" / "train.json"),
                           DatasetManifest.load(root / "target" / "val.json"),
                           data_fraction, seed)


def evaluate_model(model, images: np.ndarray, labels: np.ndarray, num_classes: int):
    cm = ConfusionMatrix.zeros(num_classes)
    preds = predict_arrays(model, images)
    for p, g in zip(preds, labels):
        cm = confusion_update(cm, p, g)
    return cm, preds


def code_hash() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.rglob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def run_training(cfg: TrainConfig, data: DataBundle, run_dir: str | Path | None = None,
                 backbone=None, eval_model: str = "teacher") -> dict:
    """Train, evaluate on the held-out target set, and optionally persist a run directory."""
    run_dir = None if run_dir is None else Path(run_dir)
    log_path = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        log_path = run_dir / "metrics.csv"

    ckpt_every = cfg.checkpoint_every

    def on_step(i, row, pair):
        if run_dir is not None and ckpt_every and (i + 1) % ckpt_every == 0:
            (run_dir / "checkpoints").mkdir(exist_ok=True)
            save_model(run_dir / "checkpoints" / f"iter_{i + 1:06d}.npz", pair.teacher, cfg,
                       {"iteration": i + 1})

    result = fit_self_training(cfg, data.x_s, data.y_s, data.x_t, backbone=backbone,
                               log_path=log_path, on_step=on_step)
    model = result.pair.teacher if eval_model == "teacher" else result.pair.student
    cm, preds = evaluate_model(model, data.x_eval, data.y_eval, cfg.num_classes)
    report = evaluation_report(cm, data.class_names)
    record = {
        "config": cfg.to_dict(),
        "code_version": code_hash(),
        "autoencoder_mae": result.ae_mae,
        "eval": report,
        "final_losses": result.history[-1] if result.history else None,
    }
    if run_dir is not None:
        save_model(run_dir / "model.npz", model, cfg)
        write_report(report, cm, run_dir)
        np.save(run_dir / "eval_predictions.npy", preds[:16].astype(np.uint8))
        (run_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    record["history"] = result.history
    record["model"] = model
    record["pair"] = result.pair
    return record


def ablation(cfg: TrainConfig, data: DataBundle, seeds=(0, 1, 2), arms=tuple(ABLATION_ARMS),
             out_dir: str | Path | None = None) -> dict[str, list[float]]:
    """Target mIoU per arm and seed; the pretrained autoencoder is shared across arms of a seed."""
    scores: dict[str, list[float]] = {arm: [] for arm in arms}
    for seed in seeds:
        seed_cfg = TrainConfig(**{**cfg.to_dict(), "seed": seed})
        backbone, _ = pretrained_backbone(seed_cfg, data.x_s, data.y_s, data.x_t)
        for arm in arms:
            arm_cfg = TrainConfig(**{**seed_cfg.to_dict(), **ABLATION_ARMS[arm]})
            run_dir = None if out_dir is None else Path(out_dir) / f"{arm}_seed{seed}"
            rec = run_training(arm_cfg, data, run_dir, backbone=backbone)
            scores[arm].append(rec["eval"]["mean_iou"])
    return scores
