"""Two-view stochastic augmentation.

Each input image yields two independently augmented views via the standard
two-view recipe: random resized crop, horizontal flip, color jitter,
grayscale, Gaussian blur, solarization, normalization. Blur and solarization
probabilities differ per view (asymmetric recipe). All randomness is drawn
from explicit ``torch.Generator`` streams so a fixed seed reproduces the
exact output tensors.
"""

from __future__ import annotations

import math

import torch
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

from .config import AugmentationConfig
from .errors import ConfigurationError

_ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)
_BLUR_SIGMA_RANGE = (0.1, 2.0)
_SOLARIZE_THRESHOLD = 0.5


def _rand(g: torch.Generator) -> float:
    return torch.rand((), generator=g).item()


def _uniform(lo: float, hi: float, g: torch.Generator) -> float:
    return lo + (hi - lo) * _rand(g)


def _sample_crop_box(height: int, width: int, scale: tuple[float, float],
                     g: torch.Generator) -> tuple[int, int, int, int]:
    """Sample (top, left, h, w) for a random resized crop; center fallback."""
    area = height * width
    log_lo, log_hi = math.log(_ASPECT_RANGE[0]), math.log(_ASPECT_RANGE[1])
    for _ in range(10):
        target_area = area * _uniform(scale[0], scale[1], g)
        aspect = math.exp(_uniform(log_lo, log_hi, g))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(_rand(g) * (height - h + 1))
            left = int(_rand(g) * (width - w + 1))
            return top, left, h, w
    # fallback: largest centered box with in-range aspect
    in_ratio = width / height
    if in_ratio < _ASPECT_RANGE[0]:
        w = width
        h = int(round(w / _ASPECT_RANGE[0]))
    elif in_ratio > _ASPECT_RANGE[1]:
        h = height
        w = int(round(h * _ASPECT_RANGE[1]))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def _blur_kernel_size(crop_size: int) -> int:
    k = max(3, int(0.1 * crop_size))
    return k if k % 2 == 1 else k + 1


def _augment_one(img: torch.Tensor, cfg: AugmentationConfig, view: int,
                 g: torch.Generator) -> torch.Tensor:
    size = [cfg.crop_size, cfg.crop_size]
    top, left, h, w = _sample_crop_box(img.shape[-2], img.shape[-1],
                                       cfg.crop_scale_range, g)
    out = TF.resized_crop(img, top, left, h, w, size,
                          interpolation=InterpolationMode.BILINEAR, antialias=True)

    if _rand(g) < cfg.flip_prob:
        out = TF.hflip(out)

    if _rand(g) < cfg.jitter_prob:
        b, c, s, hu = cfg.jitter_strengths
        order = torch.randperm(4, generator=g).tolist()
        factors = {
            0: ("brightness", _uniform(max(0.0, 1 - b), 1 + b, g)),
            1: ("contrast", _uniform(max(0.0, 1 - c), 1 + c, g)),
            2: ("saturation", _uniform(max(0.0, 1 - s), 1 + s, g)),
            3: ("hue", _uniform(-hu, hu, g)),
        }
        for idx in order:
            kind, factor = factors[idx]
            if kind == "brightness":
                out = TF.adjust_brightness(out, factor)
            elif kind == "contrast":
                out = TF.adjust_contrast(out, factor)
            elif kind == "saturation":
                out = TF.adjust_saturation(out, factor)
            else:
                out = TF.adjust_hue(out, factor)

    if _rand(g) < cfg.grayscale_prob:
        out = TF.rgb_to_grayscale(out, num_output_channels=3)

    if _rand(g) < cfg.blur_probs[view]:
        sigma = _uniform(*_BLUR_SIGMA_RANGE, g)
        out = TF.gaussian_blur(out, _blur_kernel_size(cfg.crop_size), [sigma, sigma])

    if _rand(g) < cfg.solarize_probs[view]:
        out = torch.where(out >= _SOLARIZE_THRESHOLD, 1.0 - out, out)

    return TF.normalize(out, list(cfg.normalization_mean), list(cfg.normalization_std))


def generate_views(batch: torch.Tensor, cfg: AugmentationConfig,
                   seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Produce two augmented views of an image batch.

    Args:
        batch: float tensor [B, 3, H, W] with pixels in [0, 1].
        cfg: augmentation recipe; validated before use.
        seed: seeds two independent per-view sampling streams; identical
            (batch, cfg, seed) triples give bit-identical outputs.

    Returns:
        Two tensors, each [B, 3, crop_size, crop_size], normalized.
    """
    cfg.validate()
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ValueError(f"expected batch of shape [B, 3, H, W], got {tuple(batch.shape)}")
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    if not 0 <= cfg.crop_size:
        raise ConfigurationError("crop_size must be positive")

    master = torch.Generator().manual_seed(seed)
    view_seeds = torch.randint(0, 2**62, (2,), generator=master)
    batch = batch.to(torch.float32)

    views = []
    for view in range(2):
        g = torch.Generator().manual_seed(int(view_seeds[view]))
        views.append(torch.stack([_augment_one(img, cfg, view, g) for img in batch]))
    return views[0], views[1]
