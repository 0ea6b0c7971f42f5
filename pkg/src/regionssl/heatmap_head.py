"""Region heatmap prediction from learnable queries.

N learnable query embeddings attend over the flattened encoder feature map
through a small pre-norm Transformer decoder; a terminal MLP maps each decoded
query to the shared embedding space, giving one mask embedding per region.
Cosine similarity between mask embeddings and the densely projected feature
map yields per-pixel assignment logits; a channelwise softmax turns those into
normalized heatmaps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

_NORM_EPS = 1e-8


@dataclass
class AssignmentField:
    """Per-pixel region assignments for one view/branch.

    similarities: cosine logits in [-1, 1], shape [B, N, H, W].
    heatmaps: softmax over the region axis of similarities / temperature;
        every pixel's channel vector sums to 1.
    """

    similarities: torch.Tensor
    heatmaps: torch.Tensor


def sinusoidal_positions(height: int, width: int, dim: int,
                         device=None, dtype=None) -> torch.Tensor:
    """Fixed 2-D sine/cosine position codes for a flattened H*W token grid."""
    if dim % 4 != 0:
        raise ValueError("position encoding dim must be divisible by 4")
    half = dim // 2
    freqs = torch.exp(torch.arange(0, half, 2, device=device, dtype=torch.float64)
                      * (-math.log(10000.0) / half))
    ys = torch.arange(height, device=device, dtype=torch.float64)
    xs = torch.arange(width, device=device, dtype=torch.float64)
    y_codes = torch.cat([torch.sin(ys[:, None] * freqs),
                         torch.cos(ys[:, None] * freqs)], dim=1)
    x_codes = torch.cat([torch.sin(xs[:, None] * freqs),
                         torch.cos(xs[:, None] * freqs)], dim=1)
    grid = torch.cat([y_codes[:, None, :].expand(height, width, half),
                      x_codes[None, :, :].expand(height, width, half)], dim=2)
    out_dtype = dtype if dtype is not None else torch.float32
    return grid.reshape(height * width, dim).to(out_dtype)


class RegionHeatmapHead(nn.Module):
    """Transformer decoder over region queries plus the assignment computation."""

    def __init__(self, in_channels: int, num_regions: int = 8,
                 decoder_dim: int = 256, embedding_dim: int = 256,
                 depth: int = 1, num_heads: int = 4):
        super().__init__()
        if depth < 1:
            raise ValueError("decoder depth must be >= 1")
        self.num_regions = num_regions
        self.decoder_dim = decoder_dim
        self.queries = nn.Parameter(torch.randn(num_regions, decoder_dim) * 0.02)
        self.input_proj = nn.Linear(in_channels, decoder_dim)
        layer = nn.TransformerDecoderLayer(
            d_model=decoder_dim, nhead=num_heads, dim_feedforward=4 * decoder_dim,
            dropout=0.0, batch_first=True, norm_first=True)
        self.decoder = nn.TransformerDecoder(layer, num_layers=depth,
                                             norm=nn.LayerNorm(decoder_dim))
        self.out_mlp = nn.Sequential(
            nn.Linear(decoder_dim, decoder_dim),
            nn.ReLU(inplace=True),
            nn.Linear(decoder_dim, embedding_dim),
        )

    def forward(self, feature_map: torch.Tensor) -> torch.Tensor:
        """Mask embeddings [B, N, D] from a feature map [B, C, H, W]."""
        if feature_map.ndim != 4:
            raise ValueError(f"expected [B, C, H, W], got {tuple(feature_map.shape)}")
        b, _, h, w = feature_map.shape
        if h * w == 0:
            raise ValueError("feature map has no spatial positions")
        tokens = self.input_proj(feature_map.flatten(2).transpose(1, 2))
        tokens = tokens + sinusoidal_positions(h, w, self.decoder_dim,
                                               device=tokens.device,
                                               dtype=tokens.dtype)
        queries = self.queries.unsqueeze(0).expand(b, -1, -1)
        decoded = self.decoder(queries, tokens)
        return self.out_mlp(decoded)


def compute_assignments(dense: torch.Tensor, mask_embeddings: torch.Tensor,
                        temperature: float = 0.1) -> AssignmentField:
    """Cosine similarities and softmax-normalized heatmaps.

    Args:
        dense: densely projected feature map [B, D, H, W].
        mask_embeddings: [B, N, D].
        temperature: softmax sharpness on the cosine logits; 1.0 gives the
            plain softmax of raw cosines.
    """
    if dense.ndim != 4 or mask_embeddings.ndim != 3:
        raise ValueError("expected dense [B, D, H, W] and mask embeddings [B, N, D]")
    if dense.shape[0] != mask_embeddings.shape[0] or dense.shape[1] != mask_embeddings.shape[2]:
        raise ValueError(
            f"dense {tuple(dense.shape)} incompatible with mask embeddings "
            f"{tuple(mask_embeddings.shape)}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    dense_unit = dense / (dense.norm(dim=1, keepdim=True) + _NORM_EPS)
    emb_unit = mask_embeddings / (mask_embeddings.norm(dim=2, keepdim=True) + _NORM_EPS)
    similarities = torch.einsum("bdhw,bnd->bnhw", dense_unit, emb_unit)
    heatmaps = torch.softmax(similarities / temperature, dim=1)
    return AssignmentField(similarities=similarities, heatmaps=heatmaps)


def pool_regions(feature_map: torch.Tensor, heatmaps: torch.Tensor) -> torch.Tensor:
    """Heatmap-weighted average pooling: region descriptors [B, N, C].

    Each output row m is the spatial mean of the feature map weighted by
    heatmap channel m, normalized by that channel's total mass.
    """
    if feature_map.ndim != 4 or heatmaps.ndim != 4:
        raise ValueError("expected [B, C, H, W] feature map and [B, N, H, W] heatmaps")
    if feature_map.shape[0] != heatmaps.shape[0] or feature_map.shape[2:] != heatmaps.shape[2:]:
        raise ValueError(
            f"feature map {tuple(feature_map.shape)} and heatmaps "
            f"{tuple(heatmaps.shape)} disagree")
    mass = heatmaps.sum(dim=(2, 3)) + _NORM_EPS
    weighted = torch.einsum("bnhw,bchw->bnc", heatmaps, feature_map)
    return weighted / mass.unsqueeze(-1)
