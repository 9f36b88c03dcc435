"""Synthetic dataset generation and the two-view augmentation pipeline.

Classes are procedural texture families (bright structure on a dark
background) with per-sample phase/scale/hue jitter around a per-class
palette. Contrast, tint, low-frequency lighting, and pixel noise are
per-sample nuisances, so class identity lives mostly in texture geometry
rather than raw color statistics, while class-conditional mean images
stay separated and erasure-style corruptions reduce image variance on
average. Every sample is a pure function of (seed, split, index).

Augmentation order is frozen: random resized crop (area scale in
[0.6, 1.0], square aspect), horizontal flip (p = 0.5), then with
probability p one corruption family at severity 1..3, all drawn from the
per-view derived stream in that order.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import corruptions, imageio, rng as rng_mod

TEXTURE_FAMILIES = (
    "striped", "checker", "blob", "gradient", "ring", "noise_field", "grid", "diagonal",
)

_SPLIT_TAGS = {"train": 0, "test": 1}


@dataclass
class Dataset:
    images: np.ndarray            # (N, 3, S, S) float64 in [0, 1]
    labels: np.ndarray            # (N,) int64
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return self.images.shape[0]


def _grids(size):
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    return yy, xx


def _striped(size, u):
    yy, _ = _grids(size)
    period = u.uniform(0.7, 1.6) * size / 6.0
    phase = u.uniform(0.0, 0.5) * period
    duty = u.uniform(0.25, 0.45)
    return (np.mod(yy + phase, period) / period < duty).astype(np.float64)


def _checker(size, u):
    yy, xx = _grids(size)
    cell = u.uniform(0.7, 1.6) * size / 8.0
    py = u.uniform(0.0, 0.5) * cell
    px = u.uniform(0.0, 0.5) * cell
    iy = np.floor((yy + py) / cell).astype(np.int64)
    ix = np.floor((xx + px) / cell).astype(np.int64)
    return ((iy % 2 == 0) & (ix % 2 == 0)).astype(np.float64)


def _blob(size, u):
    yy, xx = _grids(size)
    anchors = np.array([[0.3, 0.3], [0.7, 0.7], [0.3, 0.7], [0.7, 0.3]])
    k = int(u.integers(2, 5))
    sigma = u.uniform(0.6, 1.6) * size / 8.0
    pattern = np.zeros((size, size), dtype=np.float64)
    for i in range(k):
        cy = (anchors[i, 0] + u.uniform(-0.12, 0.12)) * size
        cx = (anchors[i, 1] + u.uniform(-0.12, 0.12)) * size
        r2 = (yy - cy) ** 2 + (xx - cx) ** 2
        pattern += np.exp(-r2 / (2.0 * sigma * sigma))
    return np.clip(pattern, 0.0, 1.0)


def _gradient(size, u):
    yy, xx = _grids(size)
    angle = np.pi / 4.0 + u.uniform(-0.3, 0.3)
    proj = np.cos(angle) * xx + np.sin(angle) * yy
    t = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-12)
    # Cubic ramp keeps the mass dark-heavy.
    return t ** 3


def _ring(size, u):
    yy, xx = _grids(size)
    cy = (0.5 + u.uniform(-0.12, 0.12)) * size
    cx = (0.5 + u.uniform(-0.12, 0.12)) * size
    period = u.uniform(0.7, 1.6) * size / 5.0
    phase = u.uniform(0.0, 0.5)
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    duty = u.uniform(0.2, 0.4)
    return (np.mod(r / period + phase, 1.0) < duty).astype(np.float64)


def _noise_field(size, u):
    coarse = u.uniform(0.0, 1.0, size=(max(size // 4, 2), max(size // 4, 2)))
    up = np.kron(coarse, np.ones((4, 4)))[:size, :size]
    if up.shape != (size, size):
        up = np.pad(up, ((0, size - up.shape[0]), (0, size - up.shape[1])), mode="edge")
    q = u.uniform(0.55, 0.8)
    return (up > np.quantile(up, q)).astype(np.float64)


def _grid_tex(size, u):
    yy, xx = _grids(size)
    cell = u.uniform(0.7, 1.6) * size / 6.0
    py = u.uniform(0.0, 0.5) * cell
    px = u.uniform(0.0, 0.5) * cell
    width = u.uniform(0.8, 1.6)
    lines = (np.mod(yy + py, cell) < width) | (np.mod(xx + px, cell) < width)
    return lines.astype(np.float64)


def _diagonal(size, u):
    yy, xx = _grids(size)
    period = u.uniform(0.7, 1.6) * size / 4.0
    phase = u.uniform(0.0, 0.5) * period
    duty = u.uniform(0.25, 0.45)
    return (np.mod(xx + yy + phase, period) / period < duty).astype(np.float64)


_TEXTURES = {
    "striped": _striped,
    "checker": _checker,
    "blob": _blob,
    "gradient": _gradient,
    "ring": _ring,
    "noise_field": _noise_field,
    "grid": _grid_tex,
    "diagonal": _diagonal,
}


def _class_palette(class_index: int, num_classes: int) -> np.ndarray:
    theta = 2.0 * np.pi * class_index / num_classes
    gains = np.array([
        0.6 + 0.35 * np.cos(theta),
        0.6 + 0.35 * np.cos(theta - 2.0 * np.pi / 3.0),
        0.6 + 0.35 * np.cos(theta + 2.0 * np.pi / 3.0),
    ])
    return np.clip(gains, 0.2, 0.95)


def _lighting_field(size, u):
    # Bilinear ramp between four random corner intensities; a slow
    # multiplicative confounder shared by every class.
    corners = u.uniform(0.7, 1.3, size=(2, 2))
    t = np.linspace(0.0, 1.0, size)
    top = corners[0, 0] + (corners[0, 1] - corners[0, 0]) * t
    bottom = corners[1, 0] + (corners[1, 1] - corners[1, 0]) * t
    return np.outer(1.0 - t, top) + np.outer(t, bottom)


def synthesize_image(class_index: int, num_classes: int, size: int,
                     stream: np.random.Generator) -> np.ndarray:
    """Render one (3, size, size) sample of the given class."""
    family = TEXTURE_FAMILIES[class_index % len(TEXTURE_FAMILIES)]
    pattern = _TEXTURES[family](size, stream)
    bg = stream.uniform(0.03, 0.25)
    fg = stream.uniform(bg + 0.25, 0.95)
    value = bg + pattern * (fg - bg)
    gains = np.clip(
        _class_palette(class_index, num_classes) + stream.uniform(-0.3, 0.3, size=3),
        0.1, 1.0,
    )
    image = value[None, :, :] * gains[:, None, None]
    image = image * _lighting_field(size, stream)[None, :, :]
    sigma = stream.uniform(0.02, 0.09)
    image = image + stream.normal(0.0, sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def generate_synthetic_dataset(num_samples: int, num_classes: int, size: int,
                               seed: int, split: str = "train") -> Dataset:
    """Deterministic synthetic dataset; labels assigned round-robin."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    if split not in _SPLIT_TAGS:
        raise ValueError(f"split must be train or test, got {split!r}")
    split_tag = _SPLIT_TAGS[split]
    images = np.empty((num_samples, 3, size, size), dtype=np.float64)
    labels = np.empty(num_samples, dtype=np.int64)
    for i in range(num_samples):
        label = i % num_classes
        stream = rng_mod.derive(seed, rng_mod.PURPOSE_DATA, split_tag, i)
        images[i] = synthesize_image(label, num_classes, size, stream)
        labels[i] = label
    manifest = {
        "source": "synthetic",
        "num_samples": num_samples,
        "num_classes": num_classes,
        "size": size,
        "split": split,
        "seed": seed,
        "labels": labels.tolist(),
    }
    return Dataset(images=images, labels=labels, manifest=manifest)


def save_dataset(dataset: Dataset, out_dir: str, ppm_samples: int = 0) -> dict:
    """Write manifest.json + packed images (and optional PPM previews)."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = dict(dataset.manifest)
    manifest["images"] = "images.tssl"
    imageio.write_packed(os.path.join(out_dir, "images.tssl"), dataset.images)
    previews = []
    for i in range(min(ppm_samples, len(dataset))):
        name = f"sample_{i:04d}.ppm"
        imageio.write_ppm(os.path.join(out_dir, name), dataset.images[i])
        previews.append(name)
    if previews:
        manifest["previews"] = previews
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def load_dataset(path: str) -> Dataset:
    """Load a dataset directory written by save_dataset."""
    manifest_path = os.path.join(path, "manifest.json")
    with open(manifest_path) as f:
        manifest = json.load(f)
    images = imageio.read_packed(os.path.join(path, manifest["images"]))
    labels = np.asarray(manifest["labels"], dtype=np.int64)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"manifest lists {labels.shape[0]} labels but packed file holds "
            f"{images.shape[0]} images"
        )
    return Dataset(images=images, labels=labels, manifest=manifest)


# ---------------------------------------------------------------------------
# Augmentation

_RESIZE_CACHE = {}


def _resize_plan(src: int, dst: int):
    key = (src, dst)
    plan = _RESIZE_CACHE.get(key)
    if plan is None:
        centers = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
        i0 = np.floor(centers).astype(np.int64)
        frac = centers - i0
        i0c = np.clip(i0, 0, src - 1)
        i1c = np.clip(i0 + 1, 0, src - 1)
        plan = (i0c, i1c, frac)
        _RESIZE_CACHE[key] = plan
    return plan


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a (C, h, w) image to (C, size, size)."""
    _, h, w = image.shape
    r0, r1, fr = _resize_plan(h, size)
    c0, c1, fc = _resize_plan(w, size)
    rows = image[:, r0, :] * (1.0 - fr)[None, :, None] + image[:, r1, :] * fr[None, :, None]
    out = rows[:, :, c0] * (1.0 - fc)[None, None, :] + rows[:, :, c1] * fc[None, None, :]
    return out


@dataclass(frozen=True)
class AugmentConfig:
    out_size: int = 32
    crop_scale_min: float = 0.6
    crop_scale_max: float = 1.0
    corruption_prob: float = 0.5
    eligible_families: tuple = corruptions.CORRUPTION_FAMILIES
    severity_min: int = 1
    severity_max: int = 3


def augment_view(image: np.ndarray, stream: np.random.Generator,
                 config: AugmentConfig):
    """Produce one augmented view plus its family tag id.

    Draw order from the stream: crop area scale, crop top, crop left,
    flip coin, corruption coin, family index, severity, then any
    corruption-internal draws. Changing this order changes every seeded
    run, so it is frozen.
    """
    _, h, w = image.shape
    area = stream.uniform(config.crop_scale_min, config.crop_scale_max)
    side = max(1, int(round(min(h, w) * np.sqrt(area))))
    side = min(side, h, w)
    top = int(stream.integers(0, h - side + 1))
    left = int(stream.integers(0, w - side + 1))
    view = image[:, top : top + side, left : left + side]
    if side != config.out_size:
        view = resize_bilinear(view, config.out_size)
    else:
        view = view.copy()
    if stream.uniform() < 0.5:
        view = view[:, :, ::-1].copy()
    family_id = corruptions.FAMILY_IDS["clean"]
    if config.corruption_prob > 0 and stream.uniform() < config.corruption_prob:
        family = config.eligible_families[int(stream.integers(0, len(config.eligible_families)))]
        severity = int(stream.integers(config.severity_min, config.severity_max + 1))
        view = corruptions.apply_corruption(
            view, corruptions.CorruptionSpec(family, severity), stream
        )
        family_id = corruptions.FAMILY_IDS[family]
    return np.clip(view, 0.0, 1.0), family_id


def augment_pair(image: np.ndarray, seed: int, epoch: int, sample_index: int,
                 config: AugmentConfig):
    """The two training views of one sample with their family tags."""
    v1, f1 = augment_view(image, rng_mod.augment_stream(seed, epoch, sample_index, 0), config)
    v2, f2 = augment_view(image, rng_mod.augment_stream(seed, epoch, sample_index, 1), config)
    return (v1, f1), (v2, f2)
