"""Training loop: two views through both branches, losses, optimizer, EMA.

Per step: augment the batch into two views; run each view through the online
and momentum branches; balance the momentum branch's per-pixel assignments to
form relation targets; compute the relation, consistency, and mean-entropy
terms; step the optimizer on online parameters only; momentum-update the
second branch. Batches are a pure function of (seed, step), so resuming from
a checkpoint replays the identical stream.
"""

from __future__ import annotations

import hashlib
import json
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from . import losses
from .augmentation import generate_views
from .config import RunConfig, config_from_dict, config_to_dict
from .errors import CheckpointError
from .heatmap_head import compute_assignments, pool_regions
from .networks import (BranchNetwork, MomentumPair, build_model_pair, ema_update,
                       project_dense)

CHECKPOINT_FORMAT = 1
SCALAR_LOG_NAME = "scalars.jsonl"


@dataclass
class StepReport:
    step: int
    total: float
    consistency: float
    relation: float
    memax: float
    cluster_entropy: float
    global_cosine: float
    local_cosine: float
    tau: float
    learning_rate: float
    wall_ms: float

    def scalars(self) -> dict:
        return asdict(self)

    def all_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.scalars().values())


@dataclass
class BranchViewForward:
    """Everything one branch computes for one view."""

    feature_map: torch.Tensor        # [B, C, H, W]
    pooled: torch.Tensor             # [B, C]
    global_embedding: torch.Tensor   # [B, D]
    dense: torch.Tensor              # [B, D, H, W]
    mask_embeddings: torch.Tensor    # [B, N, D]
    similarities: torch.Tensor       # [B, N, H, W]
    heatmaps: torch.Tensor           # [B, N, H, W]
    local_embeddings: torch.Tensor   # [B, N, D]

    def embeddings(self) -> losses.ViewEmbeddings:
        return losses.ViewEmbeddings(global_embedding=self.global_embedding,
                                     local_embeddings=self.local_embeddings)


@dataclass
class PairForward:
    online_1: BranchViewForward
    online_2: BranchViewForward
    momentum_1: BranchViewForward
    momentum_2: BranchViewForward
    targets_1: torch.Tensor          # balanced momentum assignments, view 1
    targets_2: torch.Tensor


def branch_forward(branch: BranchNetwork, view: torch.Tensor,
                   temperature: float) -> BranchViewForward:
    encoded = branch.encode(view)
    global_embedding = branch.global_projector(encoded.pooled)
    dense = project_dense(encoded.feature_map, branch.local_projector)
    mask_embeddings = branch.head(encoded.feature_map)
    assignment = compute_assignments(dense, mask_embeddings, temperature)
    region_features = pool_regions(encoded.feature_map, assignment.heatmaps)
    b, n, c = region_features.shape
    local_embeddings = branch.local_projector(
        region_features.reshape(b * n, c)).reshape(b, n, -1)
    return BranchViewForward(
        feature_map=encoded.feature_map, pooled=encoded.pooled,
        global_embedding=global_embedding, dense=dense,
        mask_embeddings=mask_embeddings, similarities=assignment.similarities,
        heatmaps=assignment.heatmaps, local_embeddings=local_embeddings)


def forward_views(pair: MomentumPair, view1: torch.Tensor, view2: torch.Tensor,
                  cfg: RunConfig) -> PairForward:
    t = cfg.loss.assign_temperature
    online_1 = branch_forward(pair.online, view1, t)
    online_2 = branch_forward(pair.online, view2, t)
    with torch.no_grad():
        momentum_1 = branch_forward(pair.momentum, view1, t)
        momentum_2 = branch_forward(pair.momentum, view2, t)
        targets = []
        for fwd in (momentum_1, momentum_2):
            flat = losses.flatten_assignments(fwd.similarities / t)
            balanced = losses.sinkhorn_normalize(flat, cfg.loss.sinkhorn_iters,
                                                 cfg.loss.sinkhorn_epsilon)
            targets.append(losses.unflatten_assignments(
                balanced.to(fwd.similarities.dtype), fwd.similarities))
    return PairForward(online_1=online_1, online_2=online_2,
                       momentum_1=momentum_1, momentum_2=momentum_2,
                       targets_1=targets[0], targets_2=targets[1])


def compute_losses(pair: MomentumPair, fwd: PairForward,
                   cfg: RunConfig) -> dict[str, torch.Tensor]:
    """All objective terms plus logged diagnostics, as graph tensors."""
    lw = cfg.loss
    relation = losses.semantic_relation_loss(
        fwd.online_1.heatmaps, fwd.targets_1,
        fwd.online_2.heatmaps, fwd.targets_2)
    memax = 0.5 * (losses.memax_regularizer(losses.flatten_assignments(fwd.online_1.heatmaps))
                   + losses.memax_regularizer(losses.flatten_assignments(fwd.online_2.heatmaps)))

    g12, l12 = losses.consistency_terms(
        fwd.online_1.embeddings(), fwd.momentum_2.embeddings(),
        pair.global_predictor, pair.local_predictor)
    g21, l21 = losses.consistency_terms(
        fwd.online_2.embeddings(), fwd.momentum_1.embeddings(),
        pair.global_predictor, pair.local_predictor)
    consistency = (-(lw.lambda_c * g12.mean() + (1 - lw.lambda_c) * l12.mean())
                   - (lw.lambda_c * g21.mean() + (1 - lw.lambda_c) * l21.mean()))

    total = losses.total_loss(consistency, relation, lw.lambda_r) \
        + lw.lambda_memax * memax
    student = torch.cat([losses.flatten_assignments(fwd.online_1.heatmaps),
                         losses.flatten_assignments(fwd.online_2.heatmaps)])
    return {
        "total": total,
        "consistency": consistency,
        "relation": relation,
        "memax": memax,
        "cluster_entropy": losses.mean_assignment_entropy(student),
        "global_cosine": 0.5 * (g12.mean() + g21.mean()),
        "local_cosine": 0.5 * (l12.mean() + l21.mean()),
    }


def learning_rate_at(step: int, cfg: RunConfig) -> float:
    """Linear warmup to base rate, then cosine decay to zero."""
    base = cfg.train.base_learning_rate
    warmup = cfg.train.warmup_steps
    total = cfg.train.total_steps
    if step < warmup:
        return base * (step + 1) / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return 0.5 * base * (1.0 + math.cos(math.pi * progress))


def tau_at(step: int, cfg: RunConfig) -> float:
    """Cosine increase from tau_base at step 0 to tau_final at total_steps."""
    base, final = cfg.train.tau_base, cfg.train.tau_final
    total = max(1, cfg.train.total_steps)
    progress = min(1.0, step / total)
    return final - (final - base) * 0.5 * (1.0 + math.cos(math.pi * progress))


def step_seed(seed: int, step: int) -> int:
    return (seed * 1_000_003 + step) % (2**62)


class BatchPrefetcher:
    """Bounded FIFO prefetch of deterministic per-step batches."""

    def __init__(self, source, batch_size: int, seed: int,
                 start_step: int, end_step: int, depth: int):
        self._queue: queue.Queue = queue.Queue(maxsize=depth)
        self._thread = threading.Thread(
            target=self._produce,
            args=(source, batch_size, seed, start_step, end_step), daemon=True)
        self._thread.start()

    def _produce(self, source, batch_size, seed, start_step, end_step):
        for step in range(start_step, end_step):
            self._queue.put((step, source.batch_for_step(step, batch_size, seed)))

    def get(self) -> tuple[int, torch.Tensor]:
        return self._queue.get()

    def queued(self) -> int:
        return self._queue.qsize()


class Trainer:
    """Owns the model pair, optimizer, and step counter for one run."""

    def __init__(self, cfg: RunConfig, output_dir: str | Path | None = None):
        cfg.validate()
        self.cfg = cfg
        self.output_dir = Path(output_dir if output_dir is not None
                               else cfg.train.output_dir)
        self.pair = build_model_pair(cfg.model, seed=cfg.train.seed)
        self.optimizer = torch.optim.AdamW(
            self.pair.trainable_parameters(),
            lr=cfg.train.base_learning_rate,
            weight_decay=cfg.train.weight_decay)
        self.step = 0

    # -- single step ------------------------------------------------------

    def train_step(self, batch: torch.Tensor, step: int | None = None) -> StepReport:
        if step is None:
            step = self.step
        start = time.perf_counter()
        view1, view2 = generate_views(batch, self.cfg.augmentation,
                                      step_seed(self.cfg.train.seed, step))
        self.pair.train()
        fwd = forward_views(self.pair, view1, view2, self.cfg)
        terms = compute_losses(self.pair, fwd, self.cfg)

        lr = learning_rate_at(step, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        terms["total"].backward()
        self.optimizer.step()
        tau = tau_at(step, self.cfg)
        ema_update(self.pair, tau)

        scalars = {k: float(v.detach()) for k, v in terms.items()}
        report = StepReport(
            step=step,
            total=scalars["total"],
            consistency=scalars["consistency"],
            relation=scalars["relation"],
            memax=scalars["memax"],
            cluster_entropy=scalars["cluster_entropy"],
            global_cosine=scalars["global_cosine"],
            local_cosine=scalars["local_cosine"],
            tau=tau,
            learning_rate=lr,
            wall_ms=(time.perf_counter() - start) * 1000.0)
        if not report.all_finite():
            path = self._write_diagnostic(report, batch)
            raise RuntimeError(f"non-finite loss at step {step}; diagnostic "
                               f"snapshot written to {path}")
        self.step = step + 1
        return report

    def _write_diagnostic(self, report: StepReport, batch: torch.Tensor) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        snapshot = {
            "step": report.step,
            "scalars": report.scalars(),
            "batch_sha256": hashlib.sha256(
                batch.detach().cpu().numpy().tobytes()).hexdigest(),
        }
        path = self.output_dir / f"diagnostic_step{report.step}.json"
        path.write_text(json.dumps(snapshot, indent=2))
        return path

    # -- checkpointing ----------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "format": CHECKPOINT_FORMAT,
            "step": self.step,
            "model": self.pair.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "config": config_to_dict(self.cfg),
        }, path)
        return path

    def load_checkpoint(self, path: str | Path) -> None:
        payload = load_checkpoint_payload(path)
        saved_cfg = config_from_dict(payload["config"])
        if saved_cfg.model != self.cfg.model:
            raise CheckpointError(
                f"checkpoint model topology {saved_cfg.model} does not match "
                f"configured topology {self.cfg.model}")
        try:
            self.pair.load_state_dict(payload["model"])
        except RuntimeError as exc:
            raise CheckpointError(f"cannot load model state from {path}: {exc}") from exc
        self.optimizer.load_state_dict(payload["optimizer"])
        self.step = int(payload["step"])

    # -- full loop --------------------------------------------------------

    def fit(self, source, resume: str | Path | None = None) -> Path:
        """Run the configured number of steps; returns the final checkpoint path.

        Writes a checkpoint every ``checkpoint_every`` steps, a final
        checkpoint at the end, and appends one JSON line of scalars per
        ``log_every`` steps to ``scalars.jsonl`` in the output directory.
        """
        if resume is not None:
            self.load_checkpoint(resume)
        train = self.cfg.train
        self.output_dir.mkdir(parents=True, exist_ok=True)
        log_path = self.output_dir / SCALAR_LOG_NAME
        prefetcher = None
        if train.prefetch_batches > 0:
            prefetcher = BatchPrefetcher(source, train.batch_size, train.seed,
                                         self.step, train.total_steps,
                                         train.prefetch_batches)
        with open(log_path, "a") as log:
            while self.step < train.total_steps:
                step = self.step
                if prefetcher is not None:
                    fetched_step, batch = prefetcher.get()
                    assert fetched_step == step
                else:
                    batch = source.batch_for_step(step, train.batch_size, train.seed)
                report = self.train_step(batch, step)
                if (step + 1) % train.log_every == 0 or step + 1 == train.total_steps:
                    log.write(json.dumps(report.scalars()) + "\n")
                    log.flush()
                if (step + 1) % train.checkpoint_every == 0 \
                        and step + 1 < train.total_steps:
                    self.save_checkpoint(self.output_dir / f"checkpoint_step{step + 1}.pt")
        return self.save_checkpoint(self.output_dir / "checkpoint_final.pt")


def load_checkpoint_payload(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unrecognized checkpoint format in {path}")
    return payload


def restore_pair(path: str | Path) -> tuple[MomentumPair, RunConfig, int]:
    """Rebuild a model pair and its config from a checkpoint file."""
    payload = load_checkpoint_payload(path)
    cfg = config_from_dict(payload["config"])
    pair = build_model_pair(cfg.model)
    pair.load_state_dict(payload["model"])
    return pair, cfg, int(payload["step"])
