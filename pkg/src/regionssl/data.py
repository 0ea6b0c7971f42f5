"""Image sources: a deterministic synthetic face generator and folder ingestion.

Synthetic samples are Gaussian-soft part blobs (eyes, brows, nose, mouth, jaw
accents) on a shaded oval. Each sample also yields binary ground-truth part
masks (for discovery scoring only; training never sees them) and a two-class
mouth-open/closed label for probe experiments. Everything is a pure function
of (spec, seed, index), so a manifest plus seed fixes the exact batch stream.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .config import DataConfig
from .errors import DatasetError

logger = logging.getLogger(__name__)

_IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}

# canonical part layout, fractions of canvas: (cy, cx, ry, rx)
_PART_GEOMETRY = {
    "left_eye": (0.42, 0.34, 0.045, 0.055),
    "right_eye": (0.42, 0.66, 0.045, 0.055),
    "left_brow": (0.31, 0.34, 0.020, 0.085),
    "right_brow": (0.31, 0.66, 0.020, 0.085),
    "nose": (0.56, 0.50, 0.075, 0.040),
    "mouth": (0.74, 0.50, 0.055, 0.125),
    "jaw": (0.88, 0.50, 0.030, 0.150),
}
PART_NAMES = tuple(_PART_GEOMETRY)


@dataclass
class SyntheticFaceSpec:
    canvas_size: int = 96
    n_parts: int = 7
    part_position_jitter: float = 0.06
    part_scale_jitter: float = 0.25
    color_palette_seed: int = 0
    # 0 renders with a fixed palette and lighting; 1 adds per-image color,
    # shading, exposure, and contrast variation (used by the labeled
    # classification set, where global pixel statistics must not give the
    # class away)
    photometric_jitter: float = 0.0

    @classmethod
    def from_data_config(cls, cfg: DataConfig) -> "SyntheticFaceSpec":
        return cls(canvas_size=cfg.image_size, n_parts=cfg.n_parts,
                   part_position_jitter=cfg.part_position_jitter,
                   part_scale_jitter=cfg.part_scale_jitter,
                   color_palette_seed=cfg.color_palette_seed)


@dataclass
class DatasetManifest:
    kind: str               # "synthetic" | "folder"
    count: int
    image_size: int
    checksum: str           # generator seed or sha256 of the file list
    skipped: int = 0


def _palette(spec: SyntheticFaceSpec) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(spec.color_palette_seed)
    def jitter(base, lo=0.9, hi=1.1):
        return np.clip(np.asarray(base) * rng.uniform(lo, hi, 3), 0.0, 1.0)
    return {
        "background": jitter((0.35, 0.45, 0.60)),
        "skin": jitter((0.82, 0.64, 0.52)),
        "eye": jitter((0.10, 0.10, 0.16)),
        "brow": jitter((0.25, 0.16, 0.10)),
        "nose": jitter((0.65, 0.45, 0.38)),
        "mouth": jitter((0.72, 0.22, 0.26)),
        "jaw": jitter((0.55, 0.38, 0.32)),
        "cavity": jitter((0.18, 0.08, 0.10)),
    }


def _image_palette(spec: SyntheticFaceSpec,
                   rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Base palette, plus per-image color variation when jitter is on.

    The spread at full jitter is deliberately wide: photometric nuisance is
    what separates an encoder that locates parts from one that reads global
    pixel statistics.
    """
    base = _palette(spec)
    j = spec.photometric_jitter
    out = {}
    for name, color in base.items():
        spread = (0.45 if name == "background" else 0.22) * j
        out[name] = np.clip(color * rng.uniform(1 - spread, 1 + spread, 3),
                            0.0, 1.0)
    return out


def _soft_blob(yy: np.ndarray, xx: np.ndarray, cy: float, cx: float,
               ry: float, rx: float) -> np.ndarray:
    d2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    return np.exp(-(d2 ** 1.5)).astype(np.float32)


def _paint(canvas: np.ndarray, alpha: np.ndarray, color: np.ndarray) -> None:
    canvas += alpha[..., None] * (color[None, None, :] - canvas)


def render_face(spec: SyntheticFaceSpec, rng: np.random.Generator,
                mouth_open: bool | None = None) -> tuple[np.ndarray, np.ndarray, int]:
    """Render one face; returns (image [3,S,S], masks [n_parts,S,S], mouth_open).

    ``mouth_open=None`` draws the state uniformly from ``rng``.
    """
    size = spec.canvas_size
    palette = _image_palette(spec, rng)
    ys = (np.arange(size, dtype=np.float32) + 0.5) / size
    yy, xx = np.meshgrid(ys, ys, indexing="ij")

    j = spec.photometric_jitter
    canvas = np.empty((size, size, 3), dtype=np.float32)
    canvas[:] = palette["background"][None, None, :]
    # vertical shading by default; jitter randomizes direction and strength
    angle = j * rng.uniform(0.0, 2.0 * math.pi)
    strength = 0.15 + j * rng.uniform(-0.05, 0.2)
    ramp = math.cos(angle) * (yy - 0.5) + math.sin(angle) * (xx - 0.5)
    canvas *= (1.0 + 2.0 * strength * ramp)[..., None]
    np.clip(canvas, 0.0, 1.0, out=canvas)

    face_dy, face_dx = rng.uniform(-spec.part_position_jitter,
                                   spec.part_position_jitter, 2)
    face_alpha = _soft_blob(yy, xx, 0.52 + face_dy, 0.50 + face_dx, 0.40, 0.34)
    skin = np.clip(palette["skin"] * rng.uniform(0.92, 1.08), 0.0, 1.0)
    _paint(canvas, face_alpha, skin)

    if mouth_open is None:
        mouth_open = bool(rng.integers(0, 2))

    masks = np.zeros((spec.n_parts, size, size), dtype=bool)
    for idx, name in enumerate(PART_NAMES[:spec.n_parts]):
        cy, cx, ry, rx = _PART_GEOMETRY[name]
        cy += face_dy + rng.uniform(-spec.part_position_jitter, spec.part_position_jitter)
        cx += face_dx + rng.uniform(-spec.part_position_jitter, spec.part_position_jitter)
        s = 1.0 + rng.uniform(-spec.part_scale_jitter, spec.part_scale_jitter)
        ry, rx = ry * s, rx * s
        # keep the blob inside the canvas
        cy = float(np.clip(cy, 2 * ry, 1 - 2 * ry))
        cx = float(np.clip(cx, 2 * rx, 1 - 2 * rx))
        color = palette["mouth" if name == "mouth" else name.split("_")[-1]]

        if name == "mouth" and mouth_open:
            gap = 2.6 * ry
            upper = _soft_blob(yy, xx, cy - gap / 2, cx, ry * 0.6, rx)
            lower = _soft_blob(yy, xx, cy + gap / 2, cx, ry * 0.6, rx)
            seam = _soft_blob(yy, xx, cy, cx, gap / 2, rx * 0.8)
            _paint(canvas, seam, palette["cavity"])
            _paint(canvas, upper, color)
            _paint(canvas, lower, color)
            alpha = np.maximum(np.maximum(upper, lower), seam)
        elif name == "jaw":
            left = _soft_blob(yy, xx, cy, cx - 0.6 * rx, ry, rx * 0.35)
            right = _soft_blob(yy, xx, cy, cx + 0.6 * rx, ry, rx * 0.35)
            _paint(canvas, left, color)
            _paint(canvas, right, color)
            alpha = np.maximum(left, right)
        else:
            alpha = _soft_blob(yy, xx, cy, cx, ry, rx)
            _paint(canvas, alpha, color)
        masks[idx] = alpha > 0.5

    # exposure and contrast nuisance: under jitter, global statistics vary
    # image to image far more than any class-dependent rendering detail
    canvas = 0.5 + (canvas - 0.5) * (1.0 + j * rng.uniform(-0.3, 0.3))
    canvas *= 1.0 + j * rng.uniform(-0.2, 0.2)
    np.clip(canvas, 0.0, 1.0, out=canvas)
    image = np.ascontiguousarray(canvas.transpose(2, 0, 1))
    return image, masks, int(mouth_open)


def _sample_rng(spec: SyntheticFaceSpec, seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, spec.color_palette_seed])


def synth_batch(spec: SyntheticFaceSpec, batch_size: int,
                seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Deterministic batch of synthetic faces plus binary part masks."""
    images, masks = [], []
    for i in range(batch_size):
        img, msk, _ = render_face(spec, _sample_rng(spec, seed, i))
        images.append(img)
        masks.append(msk)
    return (torch.from_numpy(np.stack(images)),
            torch.from_numpy(np.stack(masks)))


def synth_labeled_dataset(spec: SyntheticFaceSpec, n: int,
                          seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Mouth-open vs mouth-closed classification set, balanced by construction.

    Rendered at full photometric jitter regardless of ``spec``: the point of
    the task is that the label sits in a localized configuration while global
    statistics swing freely, so reading it takes more than pooled color
    moments.
    """
    spec = dataclasses.replace(spec, photometric_jitter=1.0)
    images, labels = [], []
    for i in range(n):
        state = bool(i % 2)
        img, _, label = render_face(spec, _sample_rng(spec, seed, i), mouth_open=state)
        images.append(img)
        labels.append(label)
    return (torch.from_numpy(np.stack(images)),
            torch.tensor(labels, dtype=torch.long))


def epoch_indices(n_items: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices for one training step under per-epoch reshuffling.

    Pure in (n_items, batch_size, seed, step), which makes resumption exact:
    step k always sees the same indices regardless of interruption.
    """
    steps_per_epoch = math.ceil(n_items / batch_size)
    epoch, offset = divmod(step, steps_per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n_items)
    return perm[offset * batch_size:(offset + 1) * batch_size]


class SyntheticSource:
    """Batch source backed by the synthetic generator; samples cached on demand."""

    kind = "synthetic"

    def __init__(self, spec: SyntheticFaceSpec, n_images: int, seed: int):
        if n_images < 1:
            raise DatasetError("synthetic source needs n_images >= 1")
        self.spec = spec
        self.n_items = n_images
        self.image_size = spec.canvas_size
        self.seed = seed
        self._cache: dict[int, torch.Tensor] = {}

    @property
    def manifest(self) -> DatasetManifest:
        return DatasetManifest(kind="synthetic", count=self.n_items,
                               image_size=self.image_size,
                               checksum=f"seed={self.seed}")

    def image(self, index: int) -> torch.Tensor:
        if index not in self._cache:
            img, _, _ = render_face(self.spec, _sample_rng(self.spec, self.seed, index))
            self._cache[index] = torch.from_numpy(img)
        return self._cache[index]

    def masks(self, index: int) -> torch.Tensor:
        img, msk, _ = render_face(self.spec, _sample_rng(self.spec, self.seed, index))
        return torch.from_numpy(msk)

    def batch(self, indices) -> torch.Tensor:
        return torch.stack([self.image(int(i)) for i in indices])

    def batch_for_step(self, step: int, batch_size: int, seed: int) -> torch.Tensor:
        return self.batch(epoch_indices(self.n_items, batch_size, seed, step))


class FolderSource:
    """Batch source over a flat directory of 8-bit images, preloaded at init."""

    kind = "folder"

    def __init__(self, path: str | Path, image_size: int):
        root = Path(path)
        if not root.is_dir():
            raise DatasetError(f"dataset folder not readable: {root}")
        files = sorted(p for p in root.iterdir()
                       if p.suffix.lower() in _IMAGE_EXTENSIONS)
        self.image_size = image_size
        self._images: list[torch.Tensor] = []
        self._names: list[str] = []
        skipped = 0
        for p in files:
            try:
                with Image.open(p) as im:
                    im = im.convert("RGB").resize((image_size, image_size),
                                                  Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
            except (OSError, UnidentifiedImageError, ValueError):
                logger.warning("skipping unreadable image file: %s", p)
                skipped += 1
                continue
            self._images.append(torch.from_numpy(arr.transpose(2, 0, 1)).contiguous())
            self._names.append(p.name)
        if not self._images:
            raise DatasetError(f"no decodable images in {root}")
        self.n_items = len(self._images)
        digest = hashlib.sha256("\n".join(self._names).encode()).hexdigest()
        self.manifest = DatasetManifest(kind="folder", count=self.n_items,
                                        image_size=image_size, checksum=digest,
                                        skipped=skipped)

    def image(self, index: int) -> torch.Tensor:
        return self._images[index]

    def batch(self, indices) -> torch.Tensor:
        return torch.stack([self._images[int(i)] for i in indices])

    def batch_for_step(self, step: int, batch_size: int, seed: int) -> torch.Tensor:
        return self.batch(epoch_indices(self.n_items, batch_size, seed, step))

    def epoch_batches(self, batch_size: int, seed: int, epoch: int = 0):
        """Yield one epoch of shuffled batches (last batch may be partial)."""
        steps_per_epoch = math.ceil(self.n_items / batch_size)
        for i in range(steps_per_epoch):
            yield self.batch_for_step(epoch * steps_per_epoch + i, batch_size, seed)


def load_folder(path: str | Path, image_size: int) -> FolderSource:
    return FolderSource(path, image_size)


def make_source(cfg: DataConfig, seed: int):
    if cfg.source == "folder":
        return load_folder(cfg.folder_path, cfg.image_size)
    return SyntheticSource(SyntheticFaceSpec.from_data_config(cfg),
                           cfg.n_images, seed)
