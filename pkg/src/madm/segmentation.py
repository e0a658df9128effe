"""Segmentation head, classification losses and mIoU evaluation."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import IGNORE_INDEX, ConfusionMatrix, LabelMap, ShapeError


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class SegLogits:
    values: np.ndarray  # H x W x K

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ShapeError(f"expected H x W x K logits, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("logits contain non-finite values")

    def argmax(self, num_classes: int | None = None) -> LabelMap:
        return LabelMap(self.values.argmax(axis=-1).astype(np.int64),
                        num_classes or self.values.shape[-1])


class SegHead(nn.Module):
    """Light all-MLP fusion decoder.

    Each feature scale is projected to ``width`` channels and resized to 1/4
    of the input; the optional full-resolution feature is projected and
    average-pooled onto the same grid. The concatenation is fused, classified
    and bilinearly upsampled back to the input size.
    """

    def __init__(self, in_channels: tuple[int, int, int], num_classes: int,
                 width: int = 64, use_hr: bool = True, hr_channels: int = 3):
        super().__init__()
        self.num_classes = num_classes
        self.use_hr = use_hr
        self.proj = nn.ModuleList(nn.Conv2d(c, width, 1) for c in in_channels)
        n_in = len(in_channels)
        if use_hr:
            self.hr_proj = nn.Conv2d(hr_channels, width, 1)
            n_in += 1
        self.fuse = nn.Sequential(
            nn.Conv2d(n_in * width, width, 1),
            nn.GroupNorm(8, width),
            nn.SiLU(),
        )
        self.classifier = nn.Conv2d(width, num_classes, 1)

    def forward(self, feats, hr: torch.Tensor | None, out_size) -> torch.Tensor:
        h, w = out_size
        grid = (h // 4, w // 4)
        parts = [
            F.interpolate(p(f), size=grid, mode="bilinear", align_corners=False)
            for p, f in zip(self.proj, feats)
        ]
        if self.use_hr:
            if hr is None:
                raise ValueError("head was built with the high-resolution branch; pass hr")
            parts.append(F.avg_pool2d(self.hr_proj(hr), 4))
        logits = self.classifier(self.fuse(torch.cat(parts, 1)))
        return F.interpolate(logits, size=(h, w), mode="bilinear", align_corners=False)


class SegOutput(NamedTuple):
    logits: torch.Tensor
    o: torch.Tensor
    hr: torch.Tensor | None
    feats: tuple


class SegmentationModel(nn.Module):
    """Backbone + head. ``use_hr`` feeds the decoded UNet output to the head."""

    def __init__(self, backbone, num_classes: int, head_width: int = 64, use_hr: bool = True):
        super().__init__()
        self.backbone = backbone
        self.num_classes = num_classes
        self.use_hr = use_hr
        self.head = SegHead(backbone.feature_channels, num_classes, head_width, use_hr)

    def encode(self, x):
        return self.backbone.encode(x)

    def forward_latent(self, z, out_size) -> SegOutput:
        feats, o = self.backbone.unet_forward(z)
        hr = self.backbone.decode(o) if self.use_hr else None
        return SegOutput(self.head(feats, hr, out_size), o, hr, feats)

    def forward(self, x) -> SegOutput:
        return self.forward_latent(self.encode(x), x.shape[-2:])

    @torch.no_grad()
    def predict(self, x: torch.Tensor, batch_size: int = 8) -> torch.Tensor:
        was = self.training
        self.eval()
        try:
            return torch.cat([self(x[i:i + batch_size]).logits.argmax(1)
                              for i in range(0, len(x), batch_size)])
        finally:
            self.train(was)


# -- losses ------------------------------------------------------------------

def pixel_ce(logits: torch.Tensor, labels: torch.Tensor, weight: torch.Tensor | None = None,
             ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    """Mean cross-entropy over non-ignored pixels of an N x K x H x W batch.

    ``weight`` scales each sample's pixels (length-N). Zero if every pixel is ignored.
    """
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ShapeError(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    per_px = F.cross_entropy(logits, labels, ignore_index=ignore_index, reduction="none")
    valid = (labels != ignore_index).to(logits.dtype)
    count = valid.sum()
    if count == 0:
        return logits.sum() * 0.0
    if weight is not None:
        per_px = per_px * weight.to(logits.dtype)[:, None, None]
    return (per_px * valid).sum() / count


def _logits_tensor(p) -> torch.Tensor:
    vals = p.values if isinstance(p, SegLogits) else np.asarray(p)
    return torch.from_numpy(np.ascontiguousarray(vals.transpose(2, 0, 1)))[None].to(torch.float64)


def ce_loss(p: SegLogits, y: LabelMap) -> float:
    if p.values.shape[:2] != y.shape:
        raise ShapeError(f"logits {p.values.shape[:2]} vs labels {y.shape}")
    labels = torch.from_numpy(np.asarray(y.classes, dtype=np.int64))[None]
    return float(pixel_ce(_logits_tensor(p), labels, ignore_index=y.ignore_value))


def weighted_target_loss(p_t: SegLogits, pl) -> float:
    return ce_loss(p_t, pl.labels) * pl.confidence_q


# -- evaluation ----------------------------------------------------------------

def confusion_update(cm: ConfusionMatrix, pred: LabelMap | np.ndarray,
                     gt: LabelMap | np.ndarray, ignore_value: int = IGNORE_INDEX) -> ConfusionMatrix:
    pred_a = np.asarray(pred.classes if isinstance(pred, LabelMap) else pred)
    gt_a = np.asarray(gt.classes if isinstance(gt, LabelMap) else gt)
    if isinstance(gt, LabelMap):
        ignore_value = gt.ignore_value
    if pred_a.shape != gt_a.shape:
        raise ShapeError(f"prediction {pred_a.shape} vs ground truth {gt_a.shape}")
    k = cm.num_classes
    keep = gt_a != ignore_value
    g, p = gt_a[keep].astype(np.int64), pred_a[keep].astype(np.int64)
    if g.size and (p.min() < 0 or p.max() >= k or g.min() < 0 or g.max() >= k):
        raise ValueError("class ids outside confusion matrix range on scored pixels")
    counts = np.bincount(g * k + p, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(cm.counts + counts)


def miou(cm: ConfusionMatrix, count_absent_as_zero: bool = False) -> tuple[np.ndarray, float]:
    """Per-class IoU and their mean.

    Classes that are neither labelled nor predicted have no defined IoU; they
    are NaN in ``per_class`` and left out of the mean unless
    ``count_absent_as_zero`` is set.
    """
    counts = cm.counts.astype(np.float64)
    if counts.sum() == 0:
        raise MetricError("confusion matrix is empty; mIoU undefined")
    inter = np.diag(counts)
    union = counts.sum(0) + counts.sum(1) - inter
    per_class = np.full(cm.num_classes, np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    if count_absent_as_zero:
        return per_class, float(np.nan_to_num(per_class, nan=0.0).mean())
    return per_class, float(per_class[present].mean())


def evaluation_report(cm: ConfusionMatrix, class_names=None,
                      count_absent_as_zero: bool = False) -> dict:
    per_class, mean = miou(cm, count_absent_as_zero)
    names = list(class_names) if class_names else [str(i) for i in range(cm.num_classes)]
    return {
        "mean_iou": mean,
        "per_class_iou": {n: (None if np.isnan(v) else float(v)) for n, v in zip(names, per_class)},
        "gt_pixels": {n: int(v) for n, v in zip(names, cm.counts.sum(1))},
        "pred_pixels": {n: int(v) for n, v in zip(names, cm.counts.sum(0))},
        "scored_pixels": int(cm.counts.sum()),
        "count_absent_as_zero": count_absent_as_zero,
    }


def write_report(report: dict, cm: ConfusionMatrix, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jpath = out_dir / "eval.json"
    jpath.write_text(json.dumps(report, indent=2, sort_keys=True))
    cpath = out_dir / "confusion.csv"
    with open(cpath, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gt\\pred", *range(cm.num_classes)])
        for i, row in enumerate(cm.counts):
            writer.writerow([i, *row.tolist()])
    return jpath, cpath
