"""Pseudo-label generation with annealed latent noise on the teacher path."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch

from .core import ImageSample, LabelMap, LatentTensor, NoiseSchedule

NoiseForm = Literal["paper", "standard"]
DEFAULT_TAU = 0.968


@dataclass(frozen=True)
class PseudoLabel:
    labels: LabelMap
    confidence_q: float

    def __post_init__(self):
        if not 0.0 <= self.confidence_q <= 1.0:
            raise ValueError(f"confidence_q must be in [0, 1], got {self.confidence_q}")


def diffusion_step(i: int, schedule: NoiseSchedule) -> int:
    """Noise level for iteration ``i``: linear decay from ``beta`` to 0 over ``gamma`` iterations."""
    if i < 0:
        raise ValueError(f"iteration must be >= 0, got {i}")
    frac = max(0.0, 1.0 - i / schedule.gamma_dplg)
    # round-half-up; np.round would send 0.5 to the even neighbour
    return int(np.floor(schedule.beta_dplg * frac + 0.5))


def noise_coefficients(k: int, schedule: NoiseSchedule,
                       noise_form: NoiseForm = "paper") -> tuple[float, float]:
    if not 0 <= k <= schedule.max_step:
        raise ValueError(f"diffusion step {k} outside [0, {schedule.max_step}]")
    ab = float(schedule.alpha_bar[k])
    signal = np.sqrt(ab)
    if noise_form == "paper":
        noise = 1.0 - signal
    elif noise_form == "standard":
        noise = np.sqrt(1.0 - ab)
    else:
        raise ValueError(f"unknown noise_form {noise_form!r}")
    return float(signal), float(noise)


def q_sample(z, k: int, eps, schedule: NoiseSchedule, noise_form: NoiseForm = "paper"):
    """Forward-noise a latent to step ``k``.

    Works on ``LatentTensor``, numpy arrays or torch tensors; the return type
    follows ``z``. With ``noise_form="paper"`` the noise weight is
    ``1 - sqrt(alpha_bar_k)``; ``"standard"`` uses ``sqrt(1 - alpha_bar_k)``.
    """
    signal, noise = noise_coefficients(k, schedule, noise_form)
    if isinstance(z, LatentTensor):
        e = eps.values if isinstance(eps, LatentTensor) else np.asarray(eps)
        if e.shape != z.values.shape:
            raise ValueError(f"eps shape {e.shape} != latent shape {z.values.shape}")
        return LatentTensor(signal * z.values + noise * e)
    if tuple(eps.shape) != tuple(z.shape):
        raise ValueError(f"eps shape {tuple(eps.shape)} != latent shape {tuple(z.shape)}")
    return signal * z + noise * eps


def confidence(probs: torch.Tensor, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Per-sample fraction of pixels whose top softmax probability exceeds ``tau``.

    ``probs`` is N x K x H x W; returns a length-N tensor.
    """
    top = probs.max(dim=1).values
    return (top > tau).flatten(1).to(probs.dtype).mean(dim=1)


@torch.no_grad()
def teacher_predict(teacher, x: torch.Tensor, k: int, schedule: NoiseSchedule,
                    rng: np.random.Generator, tau: float = DEFAULT_TAU,
                    noise_form: NoiseForm = "paper") -> tuple[torch.Tensor, torch.Tensor]:
    """Batched teacher pass on a noised latent.

    Returns ``(labels N x H x W int64, q length-N)``. ``eps`` is drawn from
    ``rng`` so runs are reproducible independent of torch's global state.
    """
    was_training = teacher.training
    teacher.eval()
    try:
        z = teacher.encode(x)
        if k > 0:
            eps = torch.from_numpy(rng.standard_normal(tuple(z.shape))).to(z.dtype)
            z = q_sample(z, k, eps, schedule, noise_form)
        out = teacher.forward_latent(z, x.shape[-2:])
        probs = torch.softmax(out.logits, dim=1)
        return probs.argmax(dim=1), confidence(probs, tau)
    finally:
        teacher.train(was_training)


def generate_pseudo_label(teacher, x_t: ImageSample, i: int, schedule: NoiseSchedule,
                          rng: np.random.Generator, tau: float = DEFAULT_TAU,
                          noise_form: NoiseForm = "paper") -> PseudoLabel:
    """Single-sample pseudo-label at iteration ``i`` with annealed noise."""
    dtype = next(teacher.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(x_t.pixels.transpose(2, 0, 1)))[None].to(dtype)
    labels, q = teacher_predict(teacher, x, diffusion_step(i, schedule), schedule, rng,
                                tau, noise_form)
    return PseudoLabel(LabelMap(labels[0].numpy(), teacher.num_classes), float(q[0]))
