"""Online/momentum branch networks and the exponential-moving-average link.

A branch is encoder + global projector + local projector + region heatmap
head. The online branch additionally owns two predictors. The momentum branch
is a structural copy of the online branch that receives no gradients and is
updated only through ``ema_update``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .heatmap_head import RegionHeatmapHead


@dataclass
class EncoderOutput:
    feature_map: torch.Tensor  # [B, C, H, W], pre-pooling
    pooled: torch.Tensor       # [B, C], exact spatial mean of feature_map


class ResidualBlock(nn.Module):
    """Single 3x3 conv residual block; 1x1 projection when shape changes."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride, bias=False),
                nn.BatchNorm2d(out_channels))
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        skip = x if self.shortcut is None else self.shortcut(x)
        return self.act(self.bn(self.conv(x)) + skip)


class TinyEncoder(nn.Module):
    """Desk-scale residual encoder: total stride 32, final width 512."""

    feature_dim = 512

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 16, 3, 2, 1, bias=False),
            nn.BatchNorm2d(16),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1))
        self.stages = nn.Sequential(
            ResidualBlock(16, 32, 1),
            ResidualBlock(32, 64, 2),
            ResidualBlock(64, 128, 2),
            ResidualBlock(128, 512, 2))

    def forward(self, x):
        return self.stages(self.stem(x))


class ResNet50Encoder(nn.Module):
    """Standard 50-layer residual encoder (for real runs; heavy on CPU)."""

    feature_dim = 2048

    def __init__(self):
        super().__init__()
        from torchvision.models import resnet50
        net = resnet50(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stages = nn.Sequential(net.layer1, net.layer2, net.layer3, net.layer4)

    def forward(self, x):
        return self.stages(self.stem(x))


def build_encoder(kind: str) -> nn.Module:
    if kind == "tiny":
        return TinyEncoder()
    if kind == "resnet50":
        return ResNet50Encoder()
    raise ValueError(f"unknown encoder kind {kind!r}")


class MLPHead(nn.Module):
    """Two-layer MLP with batch normalization: Linear-BN-ReLU-Linear."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.BatchNorm1d(hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, out_dim))

    def forward(self, x):
        return self.net(x)


def project_dense(feature_map: torch.Tensor, projector: nn.Module) -> torch.Tensor:
    """Apply a projector independently at every spatial location.

    [B, C, H, W] -> [B, D, H, W]; output at (u, v) equals the projector applied
    to the C-vector at (u, v).
    """
    b, c, h, w = feature_map.shape
    rows = feature_map.permute(0, 2, 3, 1).reshape(b * h * w, c)
    projected = projector(rows)
    return projected.reshape(b, h, w, -1).permute(0, 3, 1, 2)


class BranchNetwork(nn.Module):
    """One Siamese branch: encoder, both projectors, region heatmap head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.encoder = build_encoder(cfg.encoder)
        c = self.encoder.feature_dim
        self.global_projector = MLPHead(c, cfg.projector_hidden_dim, cfg.embedding_dim)
        self.local_projector = MLPHead(c, cfg.projector_hidden_dim, cfg.embedding_dim)
        self.head = RegionHeatmapHead(
            in_channels=c, num_regions=cfg.num_regions, decoder_dim=cfg.decoder_dim,
            embedding_dim=cfg.embedding_dim, depth=cfg.decoder_depth,
            num_heads=cfg.decoder_heads)

    def encode(self, view: torch.Tensor) -> EncoderOutput:
        if view.ndim != 4 or view.shape[1] != 3:
            raise ValueError(f"expected view [B, 3, S, S], got {tuple(view.shape)}")
        feature_map = self.encoder(view)
        return EncoderOutput(feature_map=feature_map,
                             pooled=feature_map.mean(dim=(2, 3)))


class MomentumPair(nn.Module):
    """Online branch (gradient-trained, with predictors) plus momentum copy."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.online = BranchNetwork(cfg)
        self.momentum = copy.deepcopy(self.online)
        self.momentum.requires_grad_(False)
        d = cfg.embedding_dim
        self.global_predictor = MLPHead(d, cfg.predictor_hidden_dim, d)
        self.local_predictor = MLPHead(d, cfg.predictor_hidden_dim, d)

    def trainable_parameters(self):
        for module in (self.online, self.global_predictor, self.local_predictor):
            yield from module.parameters()


def build_model_pair(cfg: ModelConfig, seed: int | None = None) -> MomentumPair:
    if seed is not None:
        torch.manual_seed(seed)
    return MomentumPair(cfg)


@torch.no_grad()
def ema_update(pair: MomentumPair, tau: float) -> None:
    """Momentum update: every momentum parameter becomes tau*xi + (1-tau)*theta.

    Floating-point buffers (batch-norm statistics) follow the same rule;
    integer buffers are copied. Predictors have no momentum counterpart.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    online_params = dict(pair.online.named_parameters())
    momentum_params = dict(pair.momentum.named_parameters())
    if online_params.keys() != momentum_params.keys():
        raise RuntimeError("online/momentum parameter topology mismatch")
    for name, target in momentum_params.items():
        source = online_params[name]
        if source.shape != target.shape:
            raise RuntimeError(f"shape mismatch for parameter {name!r}")
        target.mul_(tau).add_(source, alpha=1.0 - tau)
    for (name, target), (_, source) in zip(pair.momentum.named_buffers(),
                                           pair.online.named_buffers()):
        if target.dtype.is_floating_point:
            target.mul_(tau).add_(source, alpha=1.0 - tau)
        else:
            target.copy_(source)
