"""Latent-diffusion style backbone: encoder, single-step UNet, decoder.

``DeskBackbone`` is a small CPU-friendly stand-in for a pretrained latent
diffusion model. It keeps the same shape contract: an x8 strided encoder, a
conditioned UNet over the latent whose decoder path is tapped at 1/1, 1/2
and 1/4 of the latent grid, and a mirrored x8 decoder.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    DEFAULT_LATENT_CHANNELS,
    LATENT_STRIDE,
    ImageSample,
    LatentTensor,
    MultiScaleFeatures,
    ShapeError,
    check_spatial,
)

CHECKPOINT_SCHEMA_VERSION = 1


class BackboneInterface(nn.Module):
    """What the rest of the pipeline needs from a backbone.

    Subclasses provide ``encode``, ``decode`` and ``unet_forward`` on
    N x C x H x W tensors, plus a learnable ``condition`` vector.
    """

    kind: str = "abstract"
    latent_channels: int = DEFAULT_LATENT_CHANNELS
    feature_channels: tuple[int, int, int] = (0, 0, 0)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def unet_forward(self, z: torch.Tensor, c: torch.Tensor | None = None):
        raise NotImplementedError

    def encoder_decoder_parameters(self):
        raise NotImplementedError

    def manifest(self) -> dict:
        return {"kind": self.kind, "latent_channels": self.latent_channels}


def _groups(ch: int) -> int:
    return 8 if ch % 8 == 0 else 1


class ResBlock(nn.Module):
    def __init__(self, ch: int, cond_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(ch), ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.cond = nn.Linear(cond_dim, ch)
        self.norm2 = nn.GroupNorm(_groups(ch), ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, c):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.cond(c)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class DeskUNet(nn.Module):
    def __init__(self, latent_channels: int, widths=(32, 48, 64), cond_dim: int = 32):
        super().__init__()
        w1, w2, w3 = widths
        self.inp = nn.Conv2d(latent_channels, w1, 3, padding=1)
        self.down1 = ResBlock(w1, cond_dim)
        self.pool2 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.down2 = ResBlock(w2, cond_dim)
        self.pool3 = nn.Conv2d(w2, w3, 3, stride=2, padding=1)
        self.mid = ResBlock(w3, cond_dim)
        self.merge2 = nn.Conv2d(w3 + w2, w2, 1)
        self.up2 = ResBlock(w2, cond_dim)
        self.merge1 = nn.Conv2d(w2 + w1, w1, 1)
        self.up1 = ResBlock(w1, cond_dim)
        self.out_norm = nn.GroupNorm(_groups(w1), w1)
        self.out = nn.Conv2d(w1, latent_channels, 3, padding=1)

    def forward(self, z, c):
        h1 = self.down1(self.inp(z), c)
        h2 = self.down2(self.pool2(h1), c)
        f32 = self.mid(self.pool3(h2), c)
        u = F.interpolate(f32, scale_factor=2, mode="nearest")
        f16 = self.up2(self.merge2(torch.cat([u, h2], 1)), c)
        u = F.interpolate(f16, scale_factor=2, mode="nearest")
        f8 = self.up1(self.merge1(torch.cat([u, h1], 1)), c)
        o = self.out(F.silu(self.out_norm(f8)))
        return (f8, f16, f32), o


class DeskBackbone(BackboneInterface):
    """Strided-conv autoencoder plus a three-level conditioned UNet (< 2M parameters)."""

    kind = "desk"

    def __init__(self, latent_channels: int = DEFAULT_LATENT_CHANNELS,
                 enc_widths=(16, 24, 32), unet_widths=(32, 48, 64), cond_dim: int = 32):
        super().__init__()
        self.latent_channels = latent_channels
        self.enc_widths = tuple(enc_widths)
        self.unet_widths = tuple(unet_widths)
        self.cond_dim = cond_dim
        self.feature_channels = self.unet_widths
        e1, e2, e3 = self.enc_widths
        self.encoder = nn.Sequential(
            nn.Conv2d(3, e1, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(e1, e2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(e2, e3, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(e3, latent_channels, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, e3, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(e3, e2, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(e2, e1, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(e1, e1, 3, padding=1), nn.SiLU(),
            nn.Conv2d(e1, 3, 3, padding=1),
        )
        self.unet = DeskUNet(latent_channels, self.unet_widths, cond_dim)
        # condition-neutral start
        self.condition = nn.Parameter(torch.zeros(cond_dim))

    def encode(self, x):
        if x.shape[-1] % LATENT_STRIDE or x.shape[-2] % LATENT_STRIDE:
            raise ShapeError(f"input {tuple(x.shape[-2:])} is not a multiple of {LATENT_STRIDE}")
        return self.encoder(x)

    def decode(self, z):
        return self.decoder(z)

    def unet_forward(self, z, c=None):
        if c is None:
            c = self.condition
        c = c.expand(z.shape[0], -1) if c.dim() == 1 else c
        return self.unet(z, c)

    def encoder_decoder_parameters(self):
        yield from self.encoder.parameters()
        yield from self.decoder.parameters()

    def manifest(self):
        return {
            "kind": self.kind,
            "latent_channels": self.latent_channels,
            "enc_widths": list(self.enc_widths),
            "unet_widths": list(self.unet_widths),
            "cond_dim": self.cond_dim,
            "taps": [8, 16, 32],
        }


class StableDiffusionBackbone(BackboneInterface):
    """Adapter over a pretrained ``diffusers`` latent diffusion model.

    Multi-scale features are read from the 5th, 8th and 11th resnet blocks of
    the UNet decoder path via forward hooks. Requires ``diffusers`` and the
    model weights; not exercised by the test suite.
    """

    kind = "stable-diffusion"
    vae_scale = 0.18215

    def __init__(self, model_id: str = "CompVis/stable-diffusion-v1-4", cond_tokens: int = 77,
                 tap_blocks=(5, 8, 11)):
        super().__init__()
        from diffusers import AutoencoderKL, UNet2DConditionModel

        self.vae = AutoencoderKL.from_pretrained(model_id, subfolder="vae")
        self.unet = UNet2DConditionModel.from_pretrained(model_id, subfolder="unet")
        self.latent_channels = self.vae.config.latent_channels
        dim = self.unet.config.cross_attention_dim
        self.condition = nn.Parameter(torch.zeros(cond_tokens, dim))
        resnets = [r for blk in self.unet.up_blocks for r in blk.resnets]
        self.tap_blocks = tuple(tap_blocks)
        self._taps: dict[int, torch.Tensor] = {}
        for n in self.tap_blocks:
            resnets[n - 1].register_forward_hook(self._hook(n))
        self.feature_channels = tuple(resnets[n - 1].out_channels for n in self.tap_blocks)

    def _hook(self, n):
        def fn(_mod, _inp, out):
            self._taps[n] = out
        return fn

    def encode(self, x):
        return self.vae.encode(2 * x - 1).latent_dist.mean * self.vae_scale

    def decode(self, z):
        return (self.vae.decode(z / self.vae_scale).sample + 1) / 2

    def unet_forward(self, z, c=None):
        c = self.condition if c is None else c
        c = c.expand(z.shape[0], *c.shape) if c.dim() == 2 else c
        t = torch.zeros(z.shape[0], dtype=torch.long, device=z.device)
        o = self.unet(z, t, encoder_hidden_states=c).sample
        # taps come out coarse-to-fine; reorder to (1/8, 1/16, 1/32)
        feats = tuple(self._taps[n] for n in reversed(self.tap_blocks))
        return feats, o

    def encoder_decoder_parameters(self):
        yield from self.vae.parameters()

    def manifest(self):
        return {"kind": self.kind, "latent_channels": self.latent_channels,
                "taps": list(self.tap_blocks)}


def build_backbone(manifest: Mapping) -> BackboneInterface:
    kind = manifest.get("kind", "desk")
    if kind == "desk":
        return DeskBackbone(
            latent_channels=manifest.get("latent_channels", DEFAULT_LATENT_CHANNELS),
            enc_widths=tuple(manifest.get("enc_widths", (16, 24, 32))),
            unet_widths=tuple(manifest.get("unet_widths", (32, 48, 64))),
            cond_dim=manifest.get("cond_dim", 32),
        )
    if kind == "stable-diffusion":
        return StableDiffusionBackbone(manifest.get("model_id", "CompVis/stable-diffusion-v1-4"))
    raise ValueError(f"unknown backbone kind {kind!r}")


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# -- numpy-facing wrappers ---------------------------------------------------

def _to_nchw(arr: np.ndarray, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None].to(dtype)


def _param_dtype(module: nn.Module):
    return next(module.parameters()).dtype


@torch.no_grad()
def encode(backbone: BackboneInterface, x: ImageSample) -> LatentTensor:
    check_spatial(*x.shape)
    z = backbone.encode(_to_nchw(x.pixels, _param_dtype(backbone)))
    return LatentTensor(z[0].permute(1, 2, 0).cpu().numpy())


@torch.no_grad()
def decode(backbone: BackboneInterface, z: LatentTensor) -> np.ndarray:
    out = backbone.decode(_to_nchw(z.values, _param_dtype(backbone)))
    return out[0].permute(1, 2, 0).cpu().numpy()


@torch.no_grad()
def unet_forward(backbone: BackboneInterface, z: LatentTensor,
                 c: np.ndarray | None = None) -> tuple[MultiScaleFeatures, LatentTensor]:
    dtype = _param_dtype(backbone)
    cond = None if c is None else torch.as_tensor(c, dtype=dtype)
    feats, o = backbone.unet_forward(_to_nchw(z.values, dtype), cond)
    f8, f16, f32 = (f[0].permute(1, 2, 0).cpu().numpy() for f in feats)
    return MultiScaleFeatures(f8, f16, f32), LatentTensor(o[0].permute(1, 2, 0).cpu().numpy())


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path: str | Path, modules: Mapping[str, nn.Module], manifest: dict) -> Path:
    """Write named parameter arrays of several modules plus a JSON manifest to one ``.npz``."""
    arrays = {}
    for prefix, mod in modules.items():
        for name, tensor in mod.state_dict().items():
            arrays[f"{prefix}/{name}"] = tensor.detach().cpu().numpy()
    manifest = {"schema_version": CHECKPOINT_SCHEMA_VERSION, **manifest}
    arrays["__manifest__"] = np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, dict[str, torch.Tensor]]]:
    """Return ``(manifest, {prefix: state_dict})``."""
    try:
        with np.load(path) as data:
            manifest = json.loads(bytes(data["__manifest__"]).decode())
            states: dict[str, dict[str, torch.Tensor]] = {}
            for key in data.files:
                if key == "__manifest__":
                    continue
                prefix, name = key.split("/", 1)
                states.setdefault(prefix, {})[name] = torch.from_numpy(data[key].copy())
    except (OSError, KeyError, ValueError) as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if manifest.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise OSError(f"{path}: unsupported checkpoint schema {manifest.get('schema_version')}")
    return manifest, states
