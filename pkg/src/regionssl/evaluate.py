"""Frozen-encoder evaluation: linear probe, heatmap export, part discovery.

All three entry points treat the trained networks as read-only. Images come
in as float [0, 1] tensors and are channel-normalized here with the same
statistics the training views used; no other augmentation is applied.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.optimize import linear_sum_assignment

from .config import AugmentationConfig, EvalConfig
from .heatmap_head import compute_assignments
from .networks import BranchNetwork, project_dense


@dataclass
class ProbeReport:
    task: str
    accuracy: float
    n_train: int
    n_test: int
    encoder_frozen: bool
    seed: int
    epochs: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


@dataclass
class DiscoveryReport:
    mean_iou: float
    heatmap_scores: list[float]          # matched IoU per heatmap, 0 if unmatched
    assignment: list[tuple[int, int]]    # (heatmap index, part index) pairs
    iou_matrix: list[list[float]]        # [N, n_parts], averaged over images
    baseline_iou: float
    quantile: float
    n_images: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def normalize_images(images: torch.Tensor, aug: AugmentationConfig) -> torch.Tensor:
    mean = torch.tensor(aug.normalization_mean).view(1, 3, 1, 1)
    std = torch.tensor(aug.normalization_std).view(1, 3, 1, 1)
    return (images - mean) / std


@torch.no_grad()
def extract_features(branch: BranchNetwork, images: torch.Tensor,
                     aug: AugmentationConfig, batch_size: int = 64) -> torch.Tensor:
    """Pooled encoder features for a stack of [0, 1] images, in eval mode."""
    was_training = branch.training
    branch.eval()
    chunks = []
    normalized = normalize_images(images, aug)
    for start in range(0, normalized.shape[0], batch_size):
        chunks.append(branch.encode(normalized[start:start + batch_size]).pooled)
    if was_training:
        branch.train()
    return torch.cat(chunks)


def linear_probe(branch: BranchNetwork, train_images: torch.Tensor,
                 train_labels: torch.Tensor, test_images: torch.Tensor,
                 test_labels: torch.Tensor, cfg: EvalConfig,
                 aug: AugmentationConfig, seed: int = 0,
                 task: str = "probe") -> ProbeReport:
    """Train a linear classifier on frozen pooled features.

    The encoder is used only through ``extract_features`` and never enters
    the optimizer. Features are standardized with train-split statistics.
    """
    if train_images.shape[0] == 0:
        raise ValueError("linear probe needs at least one training example")
    if train_images.shape[0] != train_labels.shape[0]:
        raise ValueError(f"{train_images.shape[0]} train images but "
                         f"{train_labels.shape[0]} labels")
    if test_images.shape[0] != test_labels.shape[0]:
        raise ValueError(f"{test_images.shape[0]} test images but "
                         f"{test_labels.shape[0]} labels")
    cfg.validate()

    train_feats = extract_features(branch, train_images, aug, cfg.probe_batch_size)
    test_feats = extract_features(branch, test_images, aug, cfg.probe_batch_size)
    mean = train_feats.mean(dim=0, keepdim=True)
    std = train_feats.std(dim=0, keepdim=True).clamp_min(1e-6)
    train_feats = (train_feats - mean) / std
    test_feats = (test_feats - mean) / std

    n_classes = int(train_labels.max()) + 1
    generator = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    classifier = torch.nn.Linear(train_feats.shape[1], n_classes)
    optimizer = torch.optim.AdamW(classifier.parameters(),
                                  lr=cfg.probe_learning_rate, weight_decay=1e-4)
    n = train_feats.shape[0]
    for epoch in range(cfg.probe_epochs):
        lr = 0.5 * cfg.probe_learning_rate * (
            1.0 + math.cos(math.pi * epoch / cfg.probe_epochs))
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = torch.randperm(n, generator=generator)
        for start in range(0, n, cfg.probe_batch_size):
            idx = order[start:start + cfg.probe_batch_size]
            loss = F.cross_entropy(classifier(train_feats[idx]), train_labels[idx])
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

    with torch.no_grad():
        predictions = classifier(test_feats).argmax(dim=1)
        accuracy = float((predictions == test_labels).float().mean())
    return ProbeReport(task=task, accuracy=accuracy,
                       n_train=int(train_images.shape[0]),
                       n_test=int(test_images.shape[0]),
                       encoder_frozen=True, seed=seed, epochs=cfg.probe_epochs)


@torch.no_grad()
def image_heatmaps(branch: BranchNetwork, images: torch.Tensor,
                   aug: AugmentationConfig, temperature: float) -> torch.Tensor:
    """Assignment field for [0, 1] images, upsampled to input resolution.

    Bilinear upsampling is channel-shared, so per-pixel sums stay 1.
    """
    was_training = branch.training
    branch.eval()
    encoded = branch.encode(normalize_images(images, aug))
    dense = project_dense(encoded.feature_map, branch.local_projector)
    mask_embeddings = branch.head(encoded.feature_map)
    heatmaps = compute_assignments(dense, mask_embeddings, temperature).heatmaps
    if was_training:
        branch.train()
    return F.interpolate(heatmaps, size=images.shape[-2:], mode="bilinear",
                         align_corners=False)


def _to_png(array: np.ndarray, path: Path) -> None:
    Image.fromarray((array * 255.0 + 0.5).astype(np.uint8)).save(path)


_OVERLAY_COLORS = np.array(
    [[0.89, 0.10, 0.11], [0.22, 0.49, 0.72], [0.30, 0.69, 0.29],
     [0.60, 0.31, 0.64], [1.00, 0.50, 0.00], [1.00, 1.00, 0.20],
     [0.65, 0.34, 0.16], [0.97, 0.51, 0.75]], dtype=np.float32)


def export_heatmaps(branch: BranchNetwork, images: torch.Tensor,
                    out_dir: str | Path, aug: AugmentationConfig,
                    temperature: float = 0.1) -> list[Path]:
    """Write per-image region maps: one PNG per region, an overlay, and an npz.

    PNGs are min-max normalized to [0, 1] per region for visibility; the npz
    stores the raw float32 field under the key ``heatmaps``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    heatmaps = image_heatmaps(branch, images, aug, temperature)
    n_regions = heatmaps.shape[1]
    colors = _OVERLAY_COLORS
    if n_regions > colors.shape[0]:
        extra = np.random.default_rng(0).uniform(
            0.2, 1.0, size=(n_regions - colors.shape[0], 3)).astype(np.float32)
        colors = np.concatenate([colors, extra])
    written = []
    for i in range(images.shape[0]):
        field_np = heatmaps[i].numpy()
        npz_path = out_dir / f"image{i:03d}_heatmaps.npz"
        np.savez_compressed(npz_path, heatmaps=field_np.astype(np.float32))
        written.append(npz_path)
        for m in range(n_regions):
            channel = field_np[m]
            span = channel.max() - channel.min()
            scaled = (channel - channel.min()) / (span if span > 0 else 1.0)
            png_path = out_dir / f"image{i:03d}_region{m}.png"
            _to_png(scaled, png_path)
            written.append(png_path)
        base = images[i].permute(1, 2, 0).numpy()
        region_color = colors[field_np.argmax(axis=0)]
        overlay_path = out_dir / f"image{i:03d}_overlay.png"
        _to_png(np.clip(0.5 * base + 0.5 * region_color, 0.0, 1.0), overlay_path)
        written.append(overlay_path)
    return written


def threshold_by_mass(heatmap: torch.Tensor, quantile: float) -> torch.Tensor:
    """Pixels at or above the value where cumulative mass reaches ``quantile``.

    Works per channel on a [N, H, W] field; returns a bool tensor of the
    same shape. Ties at the cutoff value are all kept, so a channel that is
    constant over a support region keeps that whole region.
    """
    n, h, w = heatmap.shape
    flat = heatmap.reshape(n, h * w)
    values, _ = flat.sort(dim=1, descending=True)
    cumulative = values.cumsum(dim=1)
    total = cumulative[:, -1:].clamp_min(1e-12)
    # index of the pixel whose inclusion first reaches the quantile
    crossing = (cumulative < quantile * total).sum(dim=1, keepdim=True)
    cutoff = values.gather(1, crossing)
    return (flat >= cutoff).reshape(n, h, w)


def iou_matrix(pred_masks: torch.Tensor, true_masks: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU between [N, H, W] and [P, H, W] bool masks -> [N, P]."""
    p = pred_masks.reshape(pred_masks.shape[0], -1).float()
    t = true_masks.reshape(true_masks.shape[0], -1).float()
    intersection = p @ t.T
    union = p.sum(dim=1, keepdim=True) + t.sum(dim=1) - intersection
    return intersection / union.clamp_min(1.0)


def uniform_baseline_iou(part_masks: torch.Tensor, quantile: float) -> float:
    """Best-case IoU of an uninformed region against each part, averaged.

    A flat heatmap thresholded at mass quantile q keeps a fraction q of the
    canvas. Placed as favorably as possible against a part of area fraction
    p, the overlap is min(p, q) and the union max(p, q).
    """
    fractions = part_masks.reshape(part_masks.shape[0], -1).float().mean(dim=1)
    q = torch.full_like(fractions, quantile)
    best = torch.minimum(fractions, q) / torch.maximum(fractions, q).clamp_min(1e-12)
    return float(best.mean())


def score_discovery(branch: BranchNetwork, source, cfg: EvalConfig,
                    aug: AugmentationConfig,
                    temperature: float = 0.1) -> DiscoveryReport:
    """Match thresholded heatmaps to ground-truth parts over a synthetic set.

    One Hungarian assignment is computed on the image-averaged IoU matrix;
    the mean is taken over parts, so any part left unmatched (N < n_parts)
    drags the score down.
    """
    cfg.validate()
    n_images = min(cfg.discovery_images, source.n_items)
    q = cfg.discovery_quantile
    matrix_sum = None
    baseline_sum = 0.0
    for index in range(n_images):
        image = source.image(index).unsqueeze(0)
        true_masks = source.masks(index)
        heatmaps = image_heatmaps(branch, image, aug, temperature)[0]
        pred_masks = threshold_by_mass(heatmaps, q)
        matrix = iou_matrix(pred_masks, true_masks)
        matrix_sum = matrix if matrix_sum is None else matrix_sum + matrix
        baseline_sum += uniform_baseline_iou(true_masks, q)
    mean_matrix = matrix_sum / n_images
    rows, cols = linear_sum_assignment(-mean_matrix.numpy())
    n_heatmaps, n_parts = mean_matrix.shape
    scores = [0.0] * n_heatmaps
    for r, c in zip(rows, cols):
        scores[int(r)] = float(mean_matrix[r, c])
    matched_total = sum(float(mean_matrix[r, c]) for r, c in zip(rows, cols))
    return DiscoveryReport(
        mean_iou=matched_total / n_parts,
        heatmap_scores=scores,
        assignment=[(int(r), int(c)) for r, c in zip(rows, cols)],
        iou_matrix=[[float(v) for v in row] for row in mean_matrix],
        baseline_iou=baseline_sum / n_images,
        quantile=q,
        n_images=n_images)
