"""Label palette codec and latent regression.

Labels are rendered to RGB through a palette, pushed through the backbone
encoder and used as a regression target for the UNet output. The decoder
applied to the UNet output then gives a full-resolution feature map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    LATENT_STRIDE,
    ImageSample,
    LabelMap,
    LatentTensor,
    Modality,
    Palette,
    ShapeError,
)


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class LatentRegressionTarget:
    target: LatentTensor
    valid_mask: np.ndarray

    def __post_init__(self):
        if self.valid_mask.shape != self.target.shape[:2]:
            raise ShapeError(
                f"mask {self.valid_mask.shape} does not match latent {self.target.shape[:2]}"
            )


def _color_lookup(classes, palette: Palette, ignore_value: int):
    """Map ids to rows of the palette table; ignore -> last row."""
    k = len(palette)
    valid = classes != ignore_value
    if (classes[valid] >= k).any() or (classes[valid] < 0).any():
        bad = sorted(set(classes[valid][(classes[valid] >= k) | (classes[valid] < 0)].tolist()))
        raise CodecError(f"class ids {bad} have no palette color (palette size {k})")
    return np.where(valid, classes, k)


def palette_encode(y: LabelMap, p: Palette) -> ImageSample:
    idx = _color_lookup(np.asarray(y.classes), p, y.ignore_value)
    rgb = p.table[idx].astype(np.float64) / 255.0
    return ImageSample(rgb, Modality.SYNTHETIC, "palette")


def palette_decode(img, p: Palette, num_classes: int | None = None,
                   ignore_value: int = 255) -> LabelMap:
    """Nearest palette color under the Chebyshev (L-inf) distance.

    Ties go to the lowest class id; the ignore color is ranked after every
    class. Accepts an ``ImageSample`` or an H x W x 3 array in [0, 1].
    """
    px = img.pixels if isinstance(img, ImageSample) else np.asarray(img)
    table = p.table.astype(np.float64) / 255.0
    dist = np.abs(px[:, :, None, :] - table[None, None]).max(axis=-1)
    idx = dist.argmin(axis=-1)
    classes = np.where(idx == len(p), ignore_value, idx).astype(np.int64)
    return LabelMap(classes, num_classes or len(p), ignore_value)


def palette_encode_tensor(labels: torch.Tensor, p: Palette, ignore_value: int = 255,
                          dtype=torch.float32) -> torch.Tensor:
    """Batched palette rendering: N x H x W ids -> N x 3 x H x W in [0, 1]."""
    table = torch.from_numpy(p.table.astype(np.float64) / 255.0).to(dtype)
    k = len(p)
    idx = torch.where(labels == ignore_value, torch.full_like(labels, k), labels)
    if (idx > k).any() or (idx < 0).any():
        raise CodecError(f"class ids outside palette of size {k}")
    return table[idx].permute(0, 3, 1, 2).contiguous()


def latent_valid_mask(valid: torch.Tensor | np.ndarray, stride: int = LATENT_STRIDE):
    """A latent cell is supervisable if its stride x stride pixel block has a non-ignored pixel."""
    if isinstance(valid, np.ndarray):
        h, w = valid.shape
        return valid.reshape(h // stride, stride, w // stride, stride).any(axis=(1, 3))
    return F.max_pool2d(valid[:, None].to(torch.float32), stride)[:, 0] > 0


def regression_target(y: LabelMap, p: Palette, backbone) -> LatentRegressionTarget:
    from .backbone import encode

    img = palette_encode(y, p)
    return LatentRegressionTarget(encode(backbone, img), latent_valid_mask(y.valid))


@torch.no_grad()
def regression_target_tensor(labels: torch.Tensor, p: Palette, backbone,
                             ignore_value: int = 255) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched target: ``(encode(palette(labels)), latent mask)``; no gradient."""
    dtype = next(backbone.parameters()).dtype
    target = backbone.encode(palette_encode_tensor(labels, p, ignore_value, dtype))
    return target, latent_valid_mask(labels != ignore_value)


def masked_l1(o: torch.Tensor, target: torch.Tensor, mask: torch.Tensor,
              weight: torch.Tensor | None = None) -> torch.Tensor:
    """Mean |o - target| over channels and masked cells (N x C x h x w tensors).

    ``weight`` is an optional per-sample factor applied to each cell before
    the mean. Returns 0 when the mask is empty.
    """
    if o.shape != target.shape:
        raise ShapeError(f"output {tuple(o.shape)} vs target {tuple(target.shape)}")
    m = mask.to(o.dtype)
    count = m.sum() * o.shape[1]
    if count == 0:
        return o.sum() * 0.0
    per_cell = (o - target).abs().sum(dim=1) * m
    if weight is not None:
        per_cell = per_cell * weight.to(o.dtype)[:, None, None]
    return per_cell.sum() / count


def latent_regression_loss(o: LatentTensor, tgt: LatentRegressionTarget) -> float:
    if o.shape != tgt.target.shape:
        raise ShapeError(f"output {o.shape} vs target {tgt.target.shape}")
    to_t = lambda a: torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)))[None]  # noqa: E731
    loss = masked_l1(to_t(o.values), to_t(tgt.target.values),
                     torch.from_numpy(tgt.valid_mask)[None])
    return float(loss)


def highres_feature(o, backbone):
    """Decoder output for the UNet prediction at full input resolution.

    Differentiable when ``o`` is a tensor (N x C x h x w); a ``LatentTensor``
    returns an H x W x 3 array.
    """
    if isinstance(o, LatentTensor):
        from .backbone import decode

        return decode(backbone, o)
    return backbone.decode(o)
