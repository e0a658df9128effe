"""Dataset manifests, class merging, and the synthetic paired-modality benchmark."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import IGNORE_INDEX, ImageSample, LabelMap, Modality, seeded_rng

SYNTH_CLASSES = ("ground", "block", "disc", "bar", "ring", "wedge")
SYNTH_MODALITIES = ("edge", "inverse-depth", "thermal-like")
_SYNTH_TARGET_TAG = {"edge": Modality.EVENT, "inverse-depth": Modality.DEPTH,
                     "thermal-like": Modality.INFRARED}

# per-class base color and stripe texture (period px, angle deg)
_SYNTH_COLORS = np.array([
    [0.30, 0.28, 0.26],
    [0.95, 0.35, 0.30],
    [0.35, 0.85, 0.45],
    [0.30, 0.45, 0.95],
    [0.98, 0.92, 0.40],
    [0.70, 0.30, 0.75],
])
_SYNTH_TEXTURE = [(8, 0), (4, 90), (6, 45), (4, 0), (5, 135), (6, 90)]
# stripe contrast; edge energy in the target scales with it
_SYNTH_CONTRAST = np.array([0.15, 0.9, 0.6, 0.75, 0.3, 0.45])
_THERMAL_LEVEL = np.array([0.70, 0.10, 0.95, 0.30, 0.05, 0.85])


class LoadError(OSError):
    pass


@dataclass
class DatasetManifest:
    root: str
    split: str
    modality: str
    pairs: list[tuple[str, str | None]]
    num_classes: int
    class_merge: dict[int, int] | None = None
    class_names: list[str] = field(default_factory=list)
    labels_for_training: bool = True

    def __post_init__(self):
        if self.split not in ("train", "val"):
            raise ValueError(f"split must be 'train' or 'val', got {self.split!r}")
        self.pairs = [tuple(p) for p in self.pairs]
        if self.class_merge is not None:
            self.class_merge = {int(k): int(v) for k, v in self.class_merge.items()}
            for v in self.class_merge.values():
                if v != IGNORE_INDEX and not 0 <= v < self.num_classes:
                    raise ValueError(f"merge target {v} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.pairs)

    def to_json(self) -> str:
        d = asdict(self)
        if d["class_merge"] is not None:
            d["class_merge"] = {str(k): v for k, v in d["class_merge"].items()}
        return json.dumps(d, indent=2)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        try:
            return cls(**json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise LoadError(f"cannot read manifest {path}: {exc}") from exc

    @classmethod
    def from_directory(cls, root: str | Path, split: str, modality: str, num_classes: int,
                       class_merge: dict[int, int] | None = None,
                       labels_for_training: bool = True) -> "DatasetManifest":
        """Pair ``<root>/<split>/images/*.png`` with same-named files under ``labels/``."""
        root = Path(root)
        img_dir, lab_dir = root / split / "images", root / split / "labels"
        pairs = []
        for img in sorted(img_dir.glob("*.png")):
            lab = lab_dir / img.name
            pairs.append((str(img.relative_to(root)),
                          str(lab.relative_to(root)) if lab.exists() else None))
        if not pairs:
            raise LoadError(f"no images under {img_dir}")
        return cls(str(root), split, modality, pairs, num_classes, class_merge,
                   labels_for_training=labels_for_training)


def load_merge_table(name: str) -> dict:
    """Bundled class-merge table, e.g. ``"cityscapes_to_11"``."""
    text = resources.files("madm").joinpath("merge_tables", f"{name}.json").read_text()
    table = json.loads(text)
    table["mapping"] = {int(k): int(v) for k, v in table["mapping"].items()}
    return table


def merge_classes(raw: np.ndarray, class_merge: dict[int, int] | None) -> np.ndarray:
    if class_merge is None:
        return raw.astype(np.int64)
    lut = np.full(256, -1, dtype=np.int64)
    for src, dst in class_merge.items():
        lut[src] = dst
    out = lut[raw]
    if (out < 0).any():
        missing = sorted(set(raw[out < 0].tolist()))
        raise LoadError(f"label ids {missing} are not covered by the class-merge map")
    return out


def _read_png(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot load {path}: {exc}") from exc


def load_pair(manifest: DatasetManifest, index: int, for_eval: bool = False):
    """Return ``(ImageSample, LabelMap | None)``.

    Labels of a manifest flagged ``labels_for_training=False`` are only
    returned when ``for_eval`` is set.
    """
    if not 0 <= index < len(manifest):
        raise IndexError(f"index {index} out of range for {len(manifest)} pairs")
    root = Path(manifest.root)
    img_rel, lab_rel = manifest.pairs[index]
    pixels = _read_png(root / img_rel, "RGB").astype(np.float64) / 255.0
    sample = ImageSample(pixels, _modality_tag(manifest.modality), Path(img_rel).stem)
    if lab_rel is None or not (manifest.labels_for_training or for_eval):
        return sample, None
    raw = _read_png(root / lab_rel, "L")
    labels = LabelMap(merge_classes(raw, manifest.class_merge), manifest.num_classes)
    if labels.shape != sample.shape:
        raise LoadError(f"{root / lab_rel}: label shape {labels.shape} != image {sample.shape}")
    return sample, labels


def _modality_tag(name: str) -> Modality:
    try:
        return Modality(name)
    except ValueError:
        return _SYNTH_TARGET_TAG.get(name, Modality.SYNTHETIC)


def load_arrays(manifest: DatasetManifest, for_eval: bool = False, fraction: float = 1.0,
                seed: int = 0):
    """Stack a manifest into ``(N x H x W x 3 float32, N x H x W int64 or None)``.

    ``fraction`` < 1 keeps a seeded random subset.
    """
    idx = np.arange(len(manifest))
    if fraction < 1.0:
        keep = max(1, int(round(fraction * len(idx))))
        idx = np.sort(seeded_rng(seed).choice(idx, keep, replace=False))
    xs, ys = [], []
    for i in idx:
        x, y = load_pair(manifest, int(i), for_eval)
        xs.append(x.pixels.astype(np.float32))
        ys.append(None if y is None else y.classes)
    labels = None if any(y is None for y in ys) else np.stack(ys)
    return np.stack(xs), labels


# -- synthetic benchmark ------------------------------------------------------

def _stripes(h, w, period, angle_deg, phase):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    t = np.deg2rad(angle_deg)
    u = xx * np.cos(t) + yy * np.sin(t)
    return (np.sin(2 * np.pi * (u / period + phase)) > 0).astype(np.float64)


def _shape_mask(cls, h, w, cy, cx, size, rng):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if cls == 1:    # block
        return (np.abs(dy) < size) & (np.abs(dx) < size * rng.uniform(0.7, 1.3))
    if cls == 2:    # disc
        return dy ** 2 + dx ** 2 < size ** 2
    if cls == 3:    # bar
        if rng.random() < 0.5:
            return (np.abs(dy) < size * 0.35) & (np.abs(dx) < size * 1.8)
        return (np.abs(dx) < size * 0.35) & (np.abs(dy) < size * 1.8)
    if cls == 4:    # ring
        r2 = dy ** 2 + dx ** 2
        return (r2 < size ** 2) & (r2 > (0.5 * size) ** 2)
    # wedge
    return (dy > -size) & (dy < size) & (np.abs(dx) < (dy + size) * 0.6)


def render_scene(rng: np.random.Generator, resolution: int):
    """One layout: ``(labels H x W, rgb H x W x 3, depth order per pixel)``."""
    h = w = resolution
    labels = np.zeros((h, w), dtype=np.int64)
    order = np.zeros((h, w), dtype=np.int64)
    rgb = np.empty((h, w, 3))
    tex = _stripes(h, w, *_SYNTH_TEXTURE[0], rng.random())
    a = _SYNTH_CONTRAST[0]
    rgb[:] = _SYNTH_COLORS[0] * (1 - a + a * tex[..., None])
    n_obj = int(rng.integers(3, 6))
    # at least two distinct object classes so every scene shows >= 3 classes
    classes = list(rng.choice(np.arange(1, 6), 2, replace=False))
    classes += list(rng.integers(1, 6, n_obj - 2))
    for depth, cls in enumerate(classes, start=1):
        size = rng.uniform(0.12, 0.26) * resolution
        cy, cx = rng.uniform(size, resolution - size, 2)
        mask = _shape_mask(int(cls), h, w, cy, cx, size, rng)
        tex = _stripes(h, w, *_SYNTH_TEXTURE[cls], rng.random())
        color = np.clip(_SYNTH_COLORS[cls] + rng.normal(0, 0.05, 3), 0, 1)
        a = _SYNTH_CONTRAST[cls]
        rgb[mask] = color * (1 - a + a * tex[mask][:, None])
        labels[mask] = cls
        order[mask] = depth
    rgb = np.clip(rgb + rng.normal(0, 0.02, rgb.shape), 0, 1)
    return labels, rgb, order


def modality_transform(rgb: np.ndarray, labels: np.ndarray, order: np.ndarray,
                       modality: str) -> np.ndarray:
    if modality == "edge":
        lum = rgb @ np.array([0.299, 0.587, 0.114])
        mag = np.hypot(ndimage.sobel(lum, 0), ndimage.sobel(lum, 1))
        out = np.clip(mag / 3.0, 0, 1)
    elif modality == "inverse-depth":
        out = np.where(order > 0, 0.25 + 0.75 * order / (order.max() + 1e-9), 0.1)
    elif modality == "thermal-like":
        out = ndimage.gaussian_filter(_THERMAL_LEVEL[labels], 1.0)
    else:
        raise ValueError(f"unknown synthetic modality {modality!r}; choose from {SYNTH_MODALITIES}")
    return np.repeat(out[..., None], 3, axis=2)


def synthetic_arrays(seed: int, n_scenes: int, resolution: int = 64, modality: str = "edge"):
    """In-memory paired scenes: ``(source uint8, target uint8, labels int64)``."""
    if resolution % 32:
        raise ValueError(f"resolution must be a multiple of 32, got {resolution}")
    if modality not in SYNTH_MODALITIES:
        raise ValueError(f"unknown synthetic modality {modality!r}; choose from {SYNTH_MODALITIES}")
    rng = seeded_rng(seed)
    src = np.empty((n_scenes, resolution, resolution, 3), dtype=np.uint8)
    tgt = np.empty_like(src)
    lab = np.empty((n_scenes, resolution, resolution), dtype=np.int64)
    for n in range(n_scenes):
        # occlusion can hide a class; redraw until three classes stay visible
        labels, rgb, order = render_scene(rng, resolution)
        while len(np.unique(labels)) < 3:
            labels, rgb, order = render_scene(rng, resolution)
        src[n] = np.round(rgb * 255).astype(np.uint8)
        tgt[n] = np.round(modality_transform(rgb, labels, order, modality) * 255).astype(np.uint8)
        lab[n] = labels
    return src, tgt, lab


def _write_split(root: Path, split: str, images: np.ndarray, labels: np.ndarray):
    (root / split / "images").mkdir(parents=True, exist_ok=True)
    (root / split / "labels").mkdir(parents=True, exist_ok=True)
    pairs = []
    for n, (img, lab) in enumerate(zip(images, labels)):
        name = f"{n:05d}.png"
        Image.fromarray(img).save(root / split / "images" / name)
        Image.fromarray(lab.astype(np.uint8), mode="L").save(root / split / "labels" / name)
        pairs.append((f"{split}/images/{name}", f"{split}/labels/{name}"))
    return pairs


def generate_synthetic(seed: int, n_scenes: int, resolution: int, modality: str,
                       out_dir: str | Path, n_val: int | None = None):
    """Write source/target datasets under ``out_dir`` and return their manifests.

    Returns ``{"source": {split: manifest}, "target": {split: manifest}}``.
    Target labels are marked evaluation-only. Validation scenes come from an
    independent stream keyed on the same seed.
    """
    out_dir = Path(out_dir)
    n_val = max(8, n_scenes // 4) if n_val is None else n_val
    num_classes = len(SYNTH_CLASSES)
    merge = {i: i for i in range(num_classes)} | {IGNORE_INDEX: IGNORE_INDEX}
    result: dict[str, dict[str, DatasetManifest]] = {"source": {}, "target": {}}
    for split, n, sub in (("train", n_scenes, 0), ("val", n_val, 1)):
        src, tgt, lab = synthetic_arrays(seed * 2 + sub, n, resolution, modality)
        for side, imgs, mod, train_labels in (("source", src, "synthetic", True),
                                              ("target", tgt, modality, False)):
            root = out_dir / side
            pairs = _write_split(root, split, imgs, lab)
            man = DatasetManifest(str(root), split, mod, pairs, num_classes, merge,
                                  list(SYNTH_CLASSES), labels_for_training=train_labels)
            man.save(root / f"{split}.json")
            result[side][split] = man
    return result
