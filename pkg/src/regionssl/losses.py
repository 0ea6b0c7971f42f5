"""Training objectives.

Three pieces: (1) a pixel-level relation loss, cross-entropy between the
online branch's per-pixel region assignments and balanced targets from the
momentum branch; (2) an embedding consistency loss, negative cosine similarity
between predicted online embeddings and momentum targets, mixing one global
term with N region terms; (3) the overall objective combining both. Target
balancing uses iterative row/column rescaling of the exponentiated logits so
the per-region mass over a batch of pixels approaches uniform, plus a
mean-entropy regularizer that rewards spread-out average predictions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

_LOG_EPS = 1e-12
_COS_EPS = 1e-8


@dataclass
class ViewEmbeddings:
    """Global plus per-region embeddings for one view through one branch."""

    global_embedding: torch.Tensor   # [B, D]
    local_embeddings: torch.Tensor   # [B, N, D]


def sinkhorn_normalize(logits: torch.Tensor, n_iters: int = 3,
                       epsilon: float = 0.05) -> torch.Tensor:
    """Balanced soft assignments from pixel-to-region logits.

    Exponentiates logits/epsilon, then alternates region-axis and pixel-axis
    rescaling so region marginals approach P/N while every pixel's row sums
    to exactly 1. Runs in float64 without gradients; row order is preserved.

    Args:
        logits: [P, N] raw scores for P pixels over N regions.
        n_iters: rescaling iterations (>= 1).
        epsilon: entropy regularization scale (> 0).

    Returns:
        [P, N] float64 tensor of positive entries; rows sum to 1.
    """
    if logits.ndim != 2:
        raise ValueError(f"expected [P, N] logits, got {tuple(logits.shape)}")
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite assignment logits")
    with torch.no_grad():
        p, n = logits.shape
        q = logits.to(torch.float64) / epsilon
        q = torch.exp(q - q.max())
        q = q / q.sum()
        for _ in range(n_iters):
            # clamps only matter when a marginal fully underflows to zero
            q = q / (q.sum(dim=0, keepdim=True).clamp_min(1e-300) * n)
            q = q / (q.sum(dim=1, keepdim=True).clamp_min(1e-300) * p)
        return q * p                                    # rows sum to 1


def relation_ce(s: torch.Tensor, s_hat: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Cross-entropy -sum(s_hat * log s) along ``dim``; s is clamped at 1e-12."""
    return -(s_hat * torch.log(s.clamp_min(_LOG_EPS))).sum(dim)


def semantic_relation_loss(s_view1: torch.Tensor, s_hat_view1: torch.Tensor,
                           s_view2: torch.Tensor, s_hat_view2: torch.Tensor) -> torch.Tensor:
    """Spatial-mean cross-entropy summed over both views, averaged over batch.

    All inputs are [B, N, H, W]; the hatted fields are balanced momentum
    targets and must already be detached from the graph.
    """
    fields = (s_view1, s_hat_view1, s_view2, s_hat_view2)
    if any(f.ndim != 4 for f in fields) or len({f.shape for f in fields}) != 1:
        raise ValueError("assignment fields must share one [B, N, H, W] shape")
    ce1 = relation_ce(s_view1, s_hat_view1, dim=1)
    ce2 = relation_ce(s_view2, s_hat_view2, dim=1)
    return ce1.mean() + ce2.mean()


def memax_regularizer(s: torch.Tensor) -> torch.Tensor:
    """Negative entropy of the mean assignment; minimum -log N at uniform usage."""
    if s.ndim != 2:
        raise ValueError(f"expected [P, N] assignments, got {tuple(s.shape)}")
    mean = s.mean(dim=0)
    return (mean * torch.log(mean.clamp_min(_LOG_EPS))).sum()


def cosine_similarity(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Cosine along the last axis with an additive norm guard (never NaN)."""
    num = (u * v).sum(dim=-1)
    return num / ((u.norm(dim=-1) + _COS_EPS) * (v.norm(dim=-1) + _COS_EPS))


def consistency_terms(online: ViewEmbeddings, target: ViewEmbeddings,
                      predict_global: Callable, predict_local: Callable
                      ) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample global cosine [B] and per-region cosines [B, N]."""
    predicted_global = predict_global(online.global_embedding)
    b, n, d = online.local_embeddings.shape
    predicted_local = predict_local(online.local_embeddings.reshape(b * n, d))
    global_cos = cosine_similarity(predicted_global, target.global_embedding)
    local_cos = cosine_similarity(predicted_local.reshape(b, n, d),
                                  target.local_embeddings)
    return global_cos, local_cos


def consistency_sim(online: ViewEmbeddings, target: ViewEmbeddings,
                    predict_global: Callable, predict_local: Callable,
                    lambda_c: float) -> torch.Tensor:
    """One direction of the consistency objective.

    -(lambda_c * global cosine + (1 - lambda_c) * mean region cosine),
    averaged over the batch. ``target`` embeddings must be detached.
    """
    global_cos, local_cos = consistency_terms(online, target,
                                              predict_global, predict_local)
    return -(lambda_c * global_cos.mean()
             + (1.0 - lambda_c) * local_cos.mean())


def semantic_consistency_loss(online_1: ViewEmbeddings, target_2: ViewEmbeddings,
                              online_2: ViewEmbeddings, target_1: ViewEmbeddings,
                              predict_global: Callable, predict_local: Callable,
                              lambda_c: float) -> torch.Tensor:
    """Symmetrized consistency: view1-online vs view2-target plus the reverse."""
    return (consistency_sim(online_1, target_2, predict_global, predict_local, lambda_c)
            + consistency_sim(online_2, target_1, predict_global, predict_local, lambda_c))


def total_loss(consistency: torch.Tensor, relation: torch.Tensor,
               lambda_r: float) -> torch.Tensor:
    """Overall objective: consistency + lambda_r * relation."""
    return consistency + lambda_r * relation


def flatten_assignments(assignments: torch.Tensor) -> torch.Tensor:
    """[B, N, H, W] -> [B*H*W, N]; [P, N] passes through unchanged."""
    if assignments.ndim == 2:
        return assignments
    if assignments.ndim == 4:
        b, n, h, w = assignments.shape
        return assignments.permute(0, 2, 3, 1).reshape(b * h * w, n)
    raise ValueError(f"expected [P, N] or [B, N, H, W], got {tuple(assignments.shape)}")


def unflatten_assignments(flat: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Inverse of ``flatten_assignments`` for a [B, N, H, W] reference shape."""
    b, n, h, w = like.shape
    return flat.reshape(b, h, w, n).permute(0, 3, 1, 2)


def mean_assignment_entropy(assignments: torch.Tensor) -> torch.Tensor:
    """Entropy of the average assignment distribution (cluster-usage metric)."""
    mean = flatten_assignments(assignments).mean(dim=0)
    return -(mean * torch.log(mean.clamp_min(_LOG_EPS))).sum()
