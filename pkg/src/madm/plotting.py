"""Static figures from run directories."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .core import IGNORE_INDEX, Palette  # noqa: E402


def read_metrics(run_dir: Path) -> dict[str, np.ndarray]:
    with open(run_dir / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]} if rows else {}


def palette_grid(labels: np.ndarray, palette: Palette, cols: int = 4, scale: int = 2) -> np.ndarray:
    """Tile N x H x W label maps into one RGB image using exact palette colors."""
    n, h, w = labels.shape
    rows = -(-n // cols)
    idx = np.full((rows * h, cols * w), len(palette), dtype=np.int64)
    for i, lab in enumerate(labels):
        r, c = divmod(i, cols)
        idx[r * h:(r + 1) * h, c * w:(c + 1) * w] = np.where(lab == IGNORE_INDEX, len(palette), lab)
    rgb = palette.table[idx]
    return rgb.repeat(scale, 0).repeat(scale, 1)


def loss_figure(run_dirs: list[Path]):
    """One smoothed total-loss curve per run, overlaid on shared axes."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for run in run_dirs:
        m = read_metrics(run)
        if not m:
            continue
        total = m["total"]
        win = max(1, len(total) // 50)
        smooth = np.convolve(total, np.ones(win) / win, mode="valid")
        ax.plot(m["iteration"][win - 1:], smooth, label=run.name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("total loss")
    ax.legend(fontsize="small")
    fig.tight_layout()
    return fig


def plot_runs(run_dirs: list[Path], out_dir: Path) -> list[Path]:
    if not run_dirs:
        raise ValueError("no run directories given")
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []

    fig = loss_figure(run_dirs)
    files.append(out_dir / "loss_curves.png")
    fig.savefig(files[-1], dpi=100)
    plt.close(fig)

    scores = {}
    for run in run_dirs:
        report = run / "eval.json"
        if report.exists():
            scores[run.name] = json.loads(report.read_text())["mean_iou"]
    if scores:
        fig, ax = plt.subplots(figsize=(max(4, len(scores) * 1.2), 4))
        ax.bar(range(len(scores)), [100 * v for v in scores.values()])
        ax.set_xticks(range(len(scores)), list(scores), rotation=30, ha="right", fontsize="small")
        ax.set_ylabel("target mIoU (%)")
        fig.tight_layout()
        files.append(out_dir / "ablation.png")
        fig.savefig(files[-1], dpi=100)
        plt.close(fig)

    for run in run_dirs:
        preds = run / "eval_predictions.npy"
        if not preds.exists():
            continue
        cfg = json.loads((run / "config.json").read_text())
        palette = (Palette(tuple(map(tuple, cfg["palette"]))) if cfg.get("palette")
                   else Palette.default(cfg["num_classes"]))
        grid = palette_grid(np.load(preds).astype(np.int64), palette)
        files.append(out_dir / f"predictions_{run.name}.png")
        Image.fromarray(grid).save(files[-1])
    return files
