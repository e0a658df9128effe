"""Shared value types, RNG handling and shape conventions.

Arrays follow the H x W x C layout at the API boundary; modules that run
torch networks convert to N x C x H x W internally.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

IGNORE_INDEX = 255
LATENT_STRIDE = 8
DEFAULT_LATENT_CHANNELS = 4
PALETTE_MIN_MARGIN = 16

# Cityscapes train-id color table.
CITYSCAPES_COLORS: tuple[tuple[int, int, int], ...] = (
    (128, 64, 128),   # road
    (244, 35, 232),   # sidewalk
    (70, 70, 70),     # building
    (102, 102, 156),  # wall
    (190, 153, 153),  # fence
    (153, 153, 153),  # pole
    (250, 170, 30),   # traffic light
    (220, 220, 0),    # traffic sign
    (107, 142, 35),   # vegetation
    (152, 251, 152),  # terrain
    (70, 130, 180),   # sky
    (220, 20, 60),    # person
    (255, 0, 0),      # rider
    (0, 0, 142),      # car
    (0, 0, 70),       # truck
    (0, 60, 100),     # bus
    (0, 80, 100),     # train
    (0, 0, 230),      # motorcycle
    (119, 11, 32),    # bicycle
)
DEFAULT_IGNORE_COLOR = (0, 0, 0)


class ShapeError(ValueError):
    """Raised when an array does not satisfy the pipeline's shape contract."""


class PaletteError(ValueError):
    pass


class Modality(str, Enum):
    IMAGE = "image"
    DEPTH = "depth"
    INFRARED = "infrared"
    EVENT = "event"
    SYNTHETIC = "synthetic"


def seeded_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator; equal seeds give identical streams."""
    if seed < 0:
        raise ValueError(f"seed must be >= 0, got {seed}")
    return np.random.default_rng(seed)


def derived_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream keyed on ``(seed, *keys)``, e.g. (seed, iteration, stream)."""
    return np.random.default_rng([seed, *keys])


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


def check_spatial(h: int, w: int, multiple: int = LATENT_STRIDE) -> None:
    if h % multiple or w % multiple:
        raise ShapeError(f"spatial size {h}x{w} is not a multiple of {multiple}")


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray
    modality: Modality = Modality.IMAGE
    id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ShapeError(f"expected HxWx3 pixels, got shape {px.shape}")
        check_spatial(px.shape[0], px.shape[1])
        if not np.all(np.isfinite(px)) or px.min() < 0 or px.max() > 1:
            raise ValueError("pixel values must be finite and within [0, 1]")
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


@dataclass(frozen=True)
class LabelMap:
    classes: np.ndarray
    num_classes: int
    ignore_value: int = IGNORE_INDEX

    def __post_init__(self):
        cls = np.asarray(self.classes)
        if cls.ndim != 2:
            raise ShapeError(f"expected HxW label map, got shape {cls.shape}")
        if not np.issubdtype(cls.dtype, np.integer):
            raise TypeError("label map must hold integer class ids")
        bad = (cls != self.ignore_value) & ((cls < 0) | (cls >= self.num_classes))
        if bad.any():
            raise ValueError(
                f"label ids outside [0, {self.num_classes}) and != {self.ignore_value}: "
                f"{np.unique(cls[bad]).tolist()}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape

    @property
    def valid(self) -> np.ndarray:
        return self.classes != self.ignore_value


@dataclass(frozen=True)
class LatentTensor:
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ShapeError(f"expected h x w x C latent, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("latent contains non-finite values")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass(frozen=True)
class MultiScaleFeatures:
    f8: np.ndarray
    f16: np.ndarray
    f32: np.ndarray

    def check_against(self, h: int, w: int) -> None:
        for arr, stride in ((self.f8, 8), (self.f16, 16), (self.f32, 32)):
            if arr.shape[:2] != (h // stride, w // stride):
                raise ShapeError(
                    f"feature at 1/{stride} has shape {arr.shape[:2]}, "
                    f"expected {(h // stride, w // stride)}"
                )


@dataclass(frozen=True)
class Palette:
    """Injective class-id -> RGB mapping with a Chebyshev decodability margin."""

    colors: tuple[tuple[int, int, int], ...]
    ignore_color: tuple[int, int, int] = DEFAULT_IGNORE_COLOR

    def __post_init__(self):
        colors = tuple(tuple(int(v) for v in c) for c in self.colors)
        ignore = tuple(int(v) for v in self.ignore_color)
        object.__setattr__(self, "colors", colors)
        object.__setattr__(self, "ignore_color", ignore)
        for c in colors + (ignore,):
            if len(c) != 3 or min(c) < 0 or max(c) > 255:
                raise PaletteError(f"invalid RGB triple {c}")
        if not colors:
            raise PaletteError("palette needs at least one class color")
        allc = colors + (ignore,)
        if len(set(allc)) != len(allc):
            raise PaletteError("palette colors (including ignore color) must be distinct")
        if len(allc) > 1 and self.margin < PALETTE_MIN_MARGIN:
            raise PaletteError(
                f"minimum pairwise L-inf distance {self.margin} < {PALETTE_MIN_MARGIN}"
            )

    def __len__(self) -> int:
        return len(self.colors)

    @property
    def margin(self) -> int:
        allc = np.array(self.colors + (self.ignore_color,), dtype=np.int64)
        if len(allc) < 2:
            return 255
        return int(min(np.abs(a - b).max() for a, b in itertools.combinations(allc, 2)))

    @property
    def table(self) -> np.ndarray:
        """(K+1) x 3 uint8 array; the last row is the ignore color."""
        return np.array(self.colors + (self.ignore_color,), dtype=np.uint8)

    @classmethod
    def default(cls, num_classes: int) -> "Palette":
        if num_classes > len(CITYSCAPES_COLORS):
            raise PaletteError(f"default palette has only {len(CITYSCAPES_COLORS)} colors")
        return cls(CITYSCAPES_COLORS[:num_classes])

    def to_json(self) -> str:
        return json.dumps([list(c) for c in self.colors])

    @classmethod
    def from_json(cls, text: str, ignore_color: Sequence[int] = DEFAULT_IGNORE_COLOR) -> "Palette":
        return cls(tuple(tuple(c) for c in json.loads(text)), tuple(ignore_color))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Palette":
        return cls.from_json(Path(path).read_text())


def linear_alpha_bar(num_steps: int = 1000, beta_start: float = 1e-4,
                     beta_end: float = 0.02) -> np.ndarray:
    """Cumulative products of the DDPM linear variance schedule, with a leading 1."""
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray = field(default_factory=linear_alpha_bar)
    beta_dplg: int = 60
    gamma_dplg: int = 5000

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.ndim != 1 or ab[0] != 1.0:
            raise ValueError("alpha_bar must be 1-D with alpha_bar[0] == 1")
        if np.any(ab <= 0) or np.any(ab > 1) or np.any(np.diff(ab) > 0):
            raise ValueError("alpha_bar must lie in (0, 1] and be non-increasing")
        if self.beta_dplg < 0 or self.gamma_dplg <= 0:
            raise ValueError("need beta_dplg >= 0 and gamma_dplg > 0")
        if self.beta_dplg > self.max_step:
            raise ValueError(f"beta_dplg={self.beta_dplg} exceeds schedule length {self.max_step}")

    @property
    def max_step(self) -> int:
        return len(self.alpha_bar) - 1


@dataclass
class ConfusionMatrix:
    """Rows index ground truth, columns index prediction."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = self.counts.shape[0]
        if self.counts.shape != (k, k):
            raise ShapeError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)
