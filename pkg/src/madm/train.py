"""Self-training engine: EMA teacher, class-mix augmentation, composite loss."""
from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import DeskBackbone, build_backbone, read_checkpoint, save_checkpoint
from .core import (
    IGNORE_INDEX,
    ImageSample,
    LabelMap,
    NoiseSchedule,
    Palette,
    ShapeError,
    derived_rng,
    linear_alpha_bar,
)
from .dplg import PseudoLabel, diffusion_step, teacher_predict
from .lplr import masked_l1, regression_target_tensor
from .segmentation import SegmentationModel, pixel_ce

log = logging.getLogger(__name__)

LOSS_KEYS = ("L_s", "L_t", "L_s_reg", "L_t_reg", "total")
LOG_COLUMNS = ("iteration", *LOSS_KEYS, "q_mean", "k")

# (gamma, beta, lambda_reg) per target modality at full scale
MODALITY_PRESETS = {
    "depth": (5000, 60, 1.0),
    "infrared": (8000, 50, 1.0),
    "event": (8000, 50, 10.0),
}
_SYNTH_TO_PRESET = {"inverse-depth": "depth", "thermal-like": "infrared", "edge": "event"}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    num_classes: int = 6
    resolution: int = 64
    iterations: int = 2000
    batch_size: int = 2
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta_dplg: int = 50
    gamma_dplg: int = 1600
    lambda_reg: float = 10.0
    ema_alpha: float = 0.999
    tau: float = 0.968
    seed: int = 0
    noise_form: str = "paper"
    schedule_steps: int = 1000
    use_dplg: bool = True
    use_lplr: bool = True
    q_on_reg: bool = True
    freeze_autoencoder: bool = True
    ae_steps: int = 600
    ae_lr: float = 3e-3
    head_width: int = 64
    latent_channels: int = 4
    enc_widths: tuple = (16, 24, 32)
    unet_widths: tuple = (32, 48, 64)
    cond_dim: int = 32
    jitter_strength: float = 0.25
    jitter_prob: float = 0.8
    blur_prob: float = 0.5
    blur_sigma: tuple = (0.15, 1.15)
    mix: bool = True
    modality: str = "edge"
    n_scenes: int = 200
    data_fraction: float = 1.0
    checkpoint_every: int = 0
    palette: list | None = None

    def __post_init__(self):
        self.enc_widths = tuple(self.enc_widths)
        self.unet_widths = tuple(self.unet_widths)
        self.blur_sigma = tuple(self.blur_sigma)
        problems = []
        for name in ("lr", "iterations", "batch_size", "resolution", "num_classes", "gamma_dplg"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        if self.lambda_reg < 0:
            problems.append("lambda_reg must be >= 0")
        if not 0.0 <= self.ema_alpha <= 1.0:
            problems.append("ema_alpha must lie in [0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            problems.append("tau must lie in [0, 1]")
        if self.noise_form not in ("paper", "standard"):
            problems.append("noise_form must be 'paper' or 'standard'")
        if self.resolution % 32:
            problems.append("resolution must be a multiple of 32")
        if not 0.0 < self.data_fraction <= 1.0:
            problems.append("data_fraction must lie in (0, 1]")
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - cls.keys())
        if unknown:
            raise KeyError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("enc_widths", "unet_widths", "blur_sigma"):
            d[k] = list(d[k])
        return d

    @classmethod
    def desk(cls, modality: str = "edge", **overrides) -> "TrainConfig":
        """Desk-scale defaults; the noise period is scaled to the shorter run."""
        gamma, beta, lam = MODALITY_PRESETS[_SYNTH_TO_PRESET.get(modality, modality)]
        iters = overrides.get("iterations", 2000)
        base = dict(modality=modality, gamma_dplg=max(1, round(gamma * iters / 10000)),
                    beta_dplg=beta, lambda_reg=lam)
        return cls(**{**base, **overrides})

    @classmethod
    def full_scale(cls, modality: str, **overrides) -> "TrainConfig":
        gamma, beta, lam = MODALITY_PRESETS[modality]
        base = dict(resolution=512, iterations=10000, batch_size=2, lr=5e-6, gamma_dplg=gamma,
                    beta_dplg=beta, lambda_reg=lam, num_classes=9 if modality == "infrared" else 11,
                    modality=modality, ae_steps=0)
        return cls(**{**base, **overrides})

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(linear_alpha_bar(self.schedule_steps), self.beta_dplg,
                             self.gamma_dplg)

    def get_palette(self) -> Palette:
        if self.palette is None:
            return Palette.default(self.num_classes)
        return Palette(tuple(tuple(c) for c in self.palette))

    def backbone_manifest(self) -> dict:
        return {"kind": "desk", "latent_channels": self.latent_channels,
                "enc_widths": list(self.enc_widths), "unet_widths": list(self.unet_widths),
                "cond_dim": self.cond_dim}


# -- models -------------------------------------------------------------------

def build_model(cfg: TrainConfig, backbone=None, seed: int | None = None,
                dtype=torch.float32) -> SegmentationModel:
    torch.manual_seed(cfg.seed if seed is None else seed)
    if backbone is None:
        backbone = build_backbone(cfg.backbone_manifest())
    model = SegmentationModel(backbone, cfg.num_classes, cfg.head_width, cfg.use_lplr)
    return model.to(dtype)


def set_autoencoder_trainable(model: SegmentationModel, trainable: bool) -> None:
    for p in model.backbone.encoder_decoder_parameters():
        p.requires_grad_(trainable)


class ModelPair:
    """Student plus a shape-congruent EMA teacher that never takes gradients."""

    def __init__(self, student: SegmentationModel, teacher: SegmentationModel | None = None):
        self.student = student
        self.teacher = copy.deepcopy(student) if teacher is None else teacher
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        s_shapes = [p.shape for p in self.student.parameters()]
        t_shapes = [p.shape for p in self.teacher.parameters()]
        if s_shapes != t_shapes:
            raise ShapeError("teacher and student parameter shapes differ")


def parameter_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@torch.no_grad()
def ema_update(pair: ModelPair, alpha: float) -> ModelPair:
    """teacher <- alpha * teacher + (1 - alpha) * student, for every parameter and buffer."""
    t_state, s_state = pair.teacher.state_dict(), pair.student.state_dict()
    if t_state.keys() != s_state.keys():
        raise ShapeError("teacher and student have different parameter names")
    for name, t in t_state.items():
        s = s_state[name]
        if t.shape != s.shape:
            raise ShapeError(f"{name}: teacher {tuple(t.shape)} vs student {tuple(s.shape)}")
        if not t.is_floating_point():
            t.copy_(s)
        elif alpha == 0.0:
            t.copy_(s)
        elif alpha != 1.0:
            t.mul_(alpha).add_(s, alpha=1.0 - alpha)
    return pair


def ema_alpha_at(i: int, alpha: float) -> float:
    """Warm-up: the teacher tracks the student closely for the first iterations."""
    return min(1.0 - 1.0 / (i + 1), alpha)


# -- augmentation ---------------------------------------------------------------

def _gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = max(1, math.ceil(3 * sigma))
    t = torch.arange(-radius, radius + 1, dtype=x.dtype)
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    k = k / k.sum()
    c = x.shape[1]
    x = F.pad(x, (radius, radius, radius, radius), mode="reflect")
    x = F.conv2d(x, k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    return F.conv2d(x, k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)


def _color_jitter(x: torch.Tensor, rng: np.random.Generator, s: float) -> torch.Tensor:
    b, c, sat = rng.uniform(1 - s, 1 + s, 3)
    x = (x * b).clamp(0, 1)
    gray = (x * torch.tensor([0.299, 0.587, 0.114], dtype=x.dtype)[:, None, None]).sum(0)
    x = ((x - gray.mean()) * c + gray.mean()).clamp(0, 1)
    gray = (x * torch.tensor([0.299, 0.587, 0.114], dtype=x.dtype)[:, None, None]).sum(0)
    return ((x - gray) * sat + gray).clamp(0, 1)


def class_mix_mask(y_s: torch.Tensor, rng: np.random.Generator,
                   ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    """Boolean mask covering ceil(n/2) randomly chosen classes present in ``y_s``."""
    present = [int(c) for c in torch.unique(y_s) if int(c) != ignore_index]
    if not present:
        return torch.zeros_like(y_s, dtype=torch.bool)
    n_pick = (len(present) + 1) // 2
    chosen = rng.choice(present, n_pick, replace=False)
    return torch.isin(y_s, torch.as_tensor(chosen, dtype=y_s.dtype))


def strong_augment_batch(x_t: torch.Tensor, x_s: torch.Tensor, y_s: torch.Tensor,
                         pseudo: torch.Tensor, rng: np.random.Generator, cfg: TrainConfig):
    """Class-mix source regions into target images, then jitter and blur pixels.

    Tensors are N x 3 x H x W (images) and N x H x W (labels). Returns the
    augmented images and the mixed labels.
    """
    if x_t.shape != x_s.shape or pseudo.shape != y_s.shape:
        raise ShapeError("source and target batches must share resolution")
    xs, ys = [], []
    for n in range(x_t.shape[0]):
        if cfg.mix:
            m = class_mix_mask(y_s[n], rng)
        else:
            m = torch.zeros_like(y_s[n], dtype=torch.bool)
        x = torch.where(m[None], x_s[n], x_t[n])
        y = torch.where(m, y_s[n], pseudo[n])
        if cfg.jitter_prob > 0 and rng.random() < cfg.jitter_prob:
            x = _color_jitter(x, rng, cfg.jitter_strength)
        if cfg.blur_prob > 0 and rng.random() < cfg.blur_prob:
            x = _gaussian_blur(x[None], float(rng.uniform(*cfg.blur_sigma)))[0]
        xs.append(x)
        ys.append(y)
    return torch.stack(xs), torch.stack(ys)


def _to_tensor_img(s: ImageSample, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(s.pixels.transpose(2, 0, 1))).to(dtype)


def strong_augment(x_t: ImageSample, src: tuple[ImageSample, LabelMap], pl: PseudoLabel,
                   rng: np.random.Generator, cfg: TrainConfig | None = None):
    """Single-sample form of :func:`strong_augment_batch` on domain types."""
    cfg = cfg or TrainConfig()
    x_s, y_s = src
    if x_t.shape != x_s.shape or y_s.shape != x_t.shape or pl.labels.shape != x_t.shape:
        raise ShapeError("source, target and pseudo-label resolutions differ")
    x, y = strong_augment_batch(
        _to_tensor_img(x_t, torch.float64)[None], _to_tensor_img(x_s, torch.float64)[None],
        torch.from_numpy(np.asarray(y_s.classes, dtype=np.int64))[None],
        torch.from_numpy(np.asarray(pl.labels.classes, dtype=np.int64))[None], rng, cfg)
    return (ImageSample(x[0].permute(1, 2, 0).numpy(), x_t.modality, x_t.id),
            LabelMap(y[0].numpy(), y_s.num_classes, y_s.ignore_value))


# -- one step ---------------------------------------------------------------------

@dataclass
class PreparedBatch:
    """Everything the student loss needs; constant with respect to student parameters."""

    x_s: torch.Tensor
    y_s: torch.Tensor
    x_mix: torch.Tensor
    y_mix: torch.Tensor
    q: torch.Tensor
    k: int
    reg_s: tuple | None = None
    reg_t: tuple | None = None


def prepare_batch(pair: ModelPair, x_s, y_s, x_t, i: int, cfg: TrainConfig,
                  rng: np.random.Generator, schedule: NoiseSchedule,
                  palette: Palette) -> PreparedBatch:
    k = diffusion_step(i, schedule) if cfg.use_dplg else 0
    noise_rng = np.random.default_rng(rng.integers(2 ** 63))
    pseudo, q = teacher_predict(pair.teacher, x_t, k, schedule, noise_rng, cfg.tau,
                                cfg.noise_form)
    x_mix, y_mix = strong_augment_batch(x_t, x_s, y_s, pseudo, rng, cfg)
    batch = PreparedBatch(x_s, y_s, x_mix, y_mix, q, k)
    if cfg.use_lplr:
        bb = pair.student.backbone
        batch.reg_s = regression_target_tensor(y_s, palette, bb)
        batch.reg_t = regression_target_tensor(y_mix, palette, bb)
    return batch


def compute_losses(student: SegmentationModel, batch: PreparedBatch,
                   cfg: TrainConfig) -> dict[str, torch.Tensor]:
    n = batch.x_s.shape[0]
    out = student(torch.cat([batch.x_s, batch.x_mix]))
    logits_s, logits_t = out.logits[:n], out.logits[n:]
    losses = {
        "L_s": pixel_ce(logits_s, batch.y_s),
        "L_t": pixel_ce(logits_t, batch.y_mix, weight=batch.q),
    }
    zero = out.logits.sum() * 0.0
    if cfg.use_lplr:
        losses["L_s_reg"] = masked_l1(out.o[:n], *batch.reg_s)
        w = batch.q if cfg.q_on_reg else None
        losses["L_t_reg"] = masked_l1(out.o[n:], *batch.reg_t, weight=w)
    else:
        losses["L_s_reg"] = losses["L_t_reg"] = zero
    lam = cfg.lambda_reg if cfg.use_lplr else 0.0
    losses["total"] = (losses["L_s"] + losses["L_t"]
                       + lam * (losses["L_s_reg"] + losses["L_t_reg"]))
    return losses


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def train_step(pair: ModelPair, optimizer, batch_s, batch_t, i: int, cfg: TrainConfig,
               rng: np.random.Generator, schedule: NoiseSchedule | None = None,
               palette: Palette | None = None) -> dict[str, float]:
    """Pseudo-label, augment, one optimizer update of the student, then EMA."""
    schedule = schedule or cfg.schedule()
    palette = palette or cfg.get_palette()
    x_s, y_s = batch_s
    batch = prepare_batch(pair, x_s, y_s, batch_t, i, cfg, rng, schedule, palette)
    pair.student.train()
    losses = compute_losses(pair.student, batch, cfg)
    values = {key: float(v.detach()) for key, v in losses.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise TrainingDiverged(f"non-finite loss at iteration {i}: {values}")
    optimizer.zero_grad(set_to_none=True)
    losses["total"].backward()
    optimizer.step()
    ema_update(pair, ema_alpha_at(i, cfg.ema_alpha))
    values["q_mean"] = float(batch.q.mean())
    values["k"] = batch.k
    return values


# -- autoencoder pretraining -------------------------------------------------------

def autoencoder_corpus(x_s: np.ndarray, y_s: np.ndarray, x_t: np.ndarray,
                       palette: Palette) -> np.ndarray:
    """Images the autoencoder must reconstruct: both modalities plus palette renderings."""
    rendered = palette.table[np.where(y_s == IGNORE_INDEX, len(palette), y_s)]
    return np.concatenate([x_s, x_t, rendered.astype(np.float32) / 255.0]).astype(np.float32)


@torch.no_grad()
def reconstruction_mae(backbone, images: np.ndarray, batch_size: int = 32) -> float:
    dtype = next(backbone.parameters()).dtype
    total, count = 0.0, 0
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(images[i:i + batch_size].transpose(0, 3, 1, 2)).to(dtype)
        total += float((backbone.decode(backbone.encode(x)) - x).abs().sum())
        count += x.numel()
    return total / count


def pretrain_autoencoder(backbone: DeskBackbone, corpus: np.ndarray, steps: int,
                         lr: float = 3e-3, batch_size: int = 16, seed: int = 0,
                         holdout: np.ndarray | None = None, target_mae: float = 0.1):
    """L1 reconstruction training of encoder + decoder; returns ``(backbone, heldout_mae)``."""
    params = list(backbone.encoder_decoder_parameters())
    dtype = params[0].dtype
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1))
    rng = derived_rng(seed, 7)
    data = torch.from_numpy(corpus.transpose(0, 3, 1, 2).copy()).to(dtype)
    backbone.train()
    for _ in range(steps):
        idx = torch.from_numpy(rng.choice(len(data), min(batch_size, len(data)), replace=False))
        x = data[idx]
        loss = (backbone.decode(backbone.encode(x)) - x).abs().mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
    mae = reconstruction_mae(backbone, corpus if holdout is None else holdout)
    if mae >= target_mae:
        log.warning("autoencoder reconstruction MAE %.4f did not reach %.2f in %d steps",
                    mae, target_mae, steps)
    return backbone, mae


# -- training loop ----------------------------------------------------------------

@dataclass
class TrainResult:
    pair: ModelPair
    history: list[dict] = field(default_factory=list)
    ae_mae: float | None = None


def _batch(arr: np.ndarray, idx: np.ndarray, dtype) -> torch.Tensor:
    return torch.from_numpy(arr[idx].transpose(0, 3, 1, 2).copy()).to(dtype)


def pretrained_backbone(cfg: TrainConfig, x_s, y_s, x_t, holdout=None):
    torch.manual_seed(cfg.seed)
    backbone = build_backbone(cfg.backbone_manifest())
    mae = None
    if cfg.ae_steps > 0:
        corpus = autoencoder_corpus(x_s, y_s, x_t, cfg.get_palette())
        backbone, mae = pretrain_autoencoder(backbone, corpus, cfg.ae_steps, cfg.ae_lr,
                                             seed=cfg.seed, holdout=holdout)
    return backbone, mae


def fit_self_training(cfg: TrainConfig, x_s: np.ndarray, y_s: np.ndarray, x_t: np.ndarray,
                      backbone=None, log_path: str | Path | None = None,
                      on_step: Callable[[int, dict, ModelPair], None] | None = None) -> TrainResult:
    """Run ``cfg.iterations`` self-training steps on in-memory arrays.

    ``x_s``/``x_t`` are N x H x W x 3 float arrays in [0, 1]; ``y_s`` N x H x W ids.
    A pretrained ``backbone`` may be passed in (it is deep-copied); otherwise
    one is built and its autoencoder pretrained for ``cfg.ae_steps`` steps.
    """
    torch.use_deterministic_algorithms(True)
    ae_mae = None
    if backbone is None:
        backbone, ae_mae = pretrained_backbone(cfg, x_s, y_s, x_t)
    else:
        backbone = copy.deepcopy(backbone)
    student = build_model(cfg, backbone, seed=cfg.seed + 1)
    set_autoencoder_trainable(student, not cfg.freeze_autoencoder)
    pair = ModelPair(student)
    opt = make_optimizer(student, cfg)
    schedule, palette = cfg.schedule(), cfg.get_palette()
    dtype = next(student.parameters()).dtype
    xs = x_s.astype(np.float32)
    ys = torch.from_numpy(y_s.astype(np.int64))
    xt = x_t.astype(np.float32)
    result = TrainResult(pair, ae_mae=ae_mae)
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
    try:
        for i in range(cfg.iterations):
            rng = derived_rng(cfg.seed, i)
            si = rng.choice(len(xs), cfg.batch_size, replace=len(xs) < cfg.batch_size)
            ti = rng.choice(len(xt), cfg.batch_size, replace=len(xt) < cfg.batch_size)
            vals = train_step(pair, opt, (_batch(xs, si, dtype), ys[si]), _batch(xt, ti, dtype),
                              i, cfg, rng, schedule, palette)
            row = {"iteration": i, **vals}
            result.history.append(row)
            if writer is not None:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            if on_step is not None:
                on_step(i, row, pair)
    finally:
        if fh is not None:
            fh.close()
    return result


# -- checkpoints --------------------------------------------------------------------

def save_model(path: str | Path, model: SegmentationModel, cfg: TrainConfig | None = None,
               extra: dict | None = None) -> Path:
    manifest = {
        "backbone": model.backbone.manifest(),
        "num_classes": model.num_classes,
        "head_width": model.head.classifier.in_channels,
        "use_hr": model.use_hr,
        "config": None if cfg is None else cfg.to_dict(),
        **(extra or {}),
    }
    return save_checkpoint(path, {"model": model}, manifest)


def load_model(path: str | Path) -> tuple[SegmentationModel, dict]:
    manifest, states = read_checkpoint(path)
    backbone = build_backbone(manifest["backbone"])
    model = SegmentationModel(backbone, manifest["num_classes"], manifest["head_width"],
                              manifest["use_hr"])
    state = states["model"]
    dtype = next(iter(state.values())).dtype
    model = model.to(dtype)
    model.load_state_dict(state)
    model.eval()
    return model, manifest


# -- distillation ------------------------------------------------------------------

def distill(teacher_ckpt: str | Path, student_arch: dict | None, cfg: TrainConfig,
            x_s: np.ndarray, y_s: np.ndarray, x_t: np.ndarray,
            out_path: str | Path | None = None, log_path: str | Path | None = None):
    """Self-train a fresh student against a frozen trained model (no latent noise).

    ``student_arch`` may override ``backbone`` (manifest dict), ``head_width``
    and ``use_hr``; by default the student shares the teacher's backbone
    layout, reuses its autoencoder weights and drops the high-resolution
    branch. Returns ``(student, teacher, history)`` and writes a checkpoint to
    ``out_path`` when given.
    """
    torch.use_deterministic_algorithms(True)
    teacher, manifest = load_model(teacher_ckpt)
    if manifest["num_classes"] != cfg.num_classes:
        raise ValueError(f"teacher has {manifest['num_classes']} classes, "
                         f"config expects {cfg.num_classes}")
    for p in teacher.parameters():
        p.requires_grad_(False)
    arch = {"backbone": manifest["backbone"], "head_width": cfg.head_width, "use_hr": False,
            **(student_arch or {})}
    torch.manual_seed(cfg.seed + 1)
    backbone = build_backbone(arch["backbone"])
    if arch["backbone"] == manifest["backbone"]:
        src = teacher.backbone
        backbone.encoder.load_state_dict(src.encoder.state_dict())
        backbone.decoder.load_state_dict(src.decoder.state_dict())
    student = SegmentationModel(backbone, cfg.num_classes, arch["head_width"], arch["use_hr"])
    student = student.to(next(teacher.parameters()).dtype)
    set_autoencoder_trainable(student, not cfg.freeze_autoencoder)
    opt = make_optimizer(student, cfg)
    schedule = cfg.schedule()
    dtype = next(student.parameters()).dtype
    ys = torch.from_numpy(y_s.astype(np.int64))
    dcfg = TrainConfig(**{**cfg.to_dict(), "use_lplr": False})
    history = []
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
    try:
        for i in range(cfg.iterations):
            rng = derived_rng(cfg.seed, i, 3)
            si = rng.choice(len(x_s), cfg.batch_size)
            ti = rng.choice(len(x_t), cfg.batch_size)
            x_sb, x_tb = _batch(x_s, si, dtype), _batch(x_t, ti, dtype)
            pseudo, q = teacher_predict(teacher, x_tb, 0, schedule, rng, cfg.tau, cfg.noise_form)
            x_mix, y_mix = strong_augment_batch(x_tb, x_sb, ys[si], pseudo, rng, dcfg)
            student.train()
            losses = compute_losses(student, PreparedBatch(x_sb, ys[si], x_mix, y_mix, q, 0), dcfg)
            vals = {k: float(v.detach()) for k, v in losses.items()}
            if not all(math.isfinite(v) for v in vals.values()):
                raise TrainingDiverged(f"non-finite loss at iteration {i}: {vals}")
            opt.zero_grad(set_to_none=True)
            losses["total"].backward()
            opt.step()
            row = {"iteration": i, **vals, "q_mean": float(q.mean()), "k": 0}
            history.append(row)
            if writer is not None:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    finally:
        if fh is not None:
            fh.close()
    if out_path is not None:
        save_model(out_path, student, cfg, {"distilled_from": str(teacher_ckpt)})
    return student, teacher, history


def predict_arrays(model: SegmentationModel, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(images.transpose(0, 3, 1, 2).copy()).to(dtype)
    return model.predict(x, batch_size).numpy()
