from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..cloud import AugmentConfig, PointCloud, augment_pair, cloud_from_volume, normalize
from ..objective import ObjectiveConfig, objective
from ..voxel import VoxelVolume
from .checkpoint import load_model, save_model
from .config import ModelConfig
from .network import CompletionTransformer, TrainingDivergedError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    min_lr_ratio: float = 0.05
    warmup: int = 50
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)


@dataclass
class TrainResult:
    model: CompletionTransformer
    losses: list
    step: int
    optimizer: torch.optim.Optimizer | None = None


def make_pair(defective: VoxelVolume, defect: VoxelVolume) -> tuple[PointCloud, PointCloud]:
    """Normalized (input, target) clouds sharing the input's transform."""
    src = normalize(cloud_from_volume(defective))
    tgt = cloud_from_volume(defect)
    return src, PointCloud(src.transform.apply(tgt.points), src.transform, "normalized")


class _ObjectiveFn(torch.autograd.Function):
    """Batch mean of the numpy objective, backpropagating its analytic gradient."""

    @staticmethod
    def forward(ctx, pred, targets, cfg):
        preds = pred.detach().double().numpy()
        grads, values = [], []
        for p, t in zip(preds, targets):
            lv = objective(p, t, cfg)
            values.append(lv.value)
            grads.append(lv.gradient)
        b = len(values)
        ctx.save_for_backward(torch.from_numpy(np.stack(grads) / b).to(pred.dtype))
        return pred.new_tensor(float(np.mean(values)))

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out * grad, None, None


def objective_loss(pred: torch.Tensor, targets: list[np.ndarray], cfg: ObjectiveConfig):
    return _ObjectiveFn.apply(pred, targets, cfg)


def make_optimizer(model: CompletionTransformer, lr: float = 1e-3) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr)


def _lr_at(step: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    progress = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    cosine = 0.5 * (1 + math.cos(math.pi * min(progress, 1.0)))
    return cfg.lr * (cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * cosine)


def downsample_target(tgt: PointCloud, n_out: int, seed) -> PointCloud:
    """Seeded uniform subsample of a defect cloud to exactly ``n_out`` points."""
    rng = np.random.default_rng(seed)
    return tgt.subset(rng.choice(len(tgt), n_out, replace=len(tgt) < n_out))


def _sample(rng, src: PointCloud, tgt: PointCloud, mcfg: ModelConfig, tcfg: TrainConfig):
    n = len(src)
    idx = rng.choice(n, mcfg.group_in, replace=n < mcfg.group_in)
    group, target = augment_pair(src.subset(idx), tgt, tcfg.augment, rng)
    if len(group) != mcfg.group_in:
        # refill a cropped group to the model budget
        fill = rng.choice(len(group), mcfg.group_in - len(group))
        group = group.with_points(np.concatenate([group.points, group.points[fill]]))
    start = int(rng.integers(mcfg.group_in))
    return group.points, target.points, start


def train(
    dataset: list[tuple[PointCloud, PointCloud]],
    model_cfg: ModelConfig | None = None,
    train_cfg: TrainConfig | None = None,
    checkpoint: str | Path | None = None,
    resume: str | Path | None = None,
    callback=None,
) -> TrainResult:
    """Fit the completion model on (defective, defect) cloud pairs.

    Every step draws ``batch_size`` random groups of ``group_in`` points from
    the defective clouds; each is paired with its case's defect, subsampled
    once (seeded) to ``group_out`` points. Everything is seeded from
    ``train_cfg.seed``; with ``resume`` the model, optimizer moments, step
    counter and sampler state continue from a checkpoint.
    """
    if not dataset:
        raise ValueError("training needs at least one (defective, defect) pair")
    tcfg = train_cfg or TrainConfig()
    torch.manual_seed(tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    losses: list[float] = []
    step0 = 0
    if resume is not None:
        model, optimizer, extra = load_model(resume, lambda m: make_optimizer(m, tcfg.lr))
        step0 = int(extra.get("step", 0))
        losses = list(extra.get("losses", []))
        if "rng_state" in extra:
            rng.bit_generator.state = extra["rng_state"]
        if "torch_rng" in extra:
            torch.set_rng_state(torch.tensor(extra["torch_rng"], dtype=torch.uint8))
    else:
        model = CompletionTransformer(model_cfg or ModelConfig())
        optimizer = make_optimizer(model, tcfg.lr)
    mcfg = model.config
    targets = [
        downsample_target(tgt, mcfg.group_out, [tcfg.seed, i]) for i, (_, tgt) in enumerate(dataset)
    ]

    def _save(path, step):
        extra = {
            "step": step,
            "losses": losses,
            "rng_state": rng.bit_generator.state,
            "torch_rng": torch.get_rng_state().tolist(),
        }
        save_model(model, path, optimizer, extra)

    model.train()
    for step in range(step0, tcfg.steps):
        for g in optimizer.param_groups:
            g["lr"] = _lr_at(step, tcfg)
        picks = rng.integers(len(dataset), size=tcfg.batch_size)
        batch = [_sample(rng, dataset[i][0], targets[i], mcfg, tcfg) for i in picks]
        points = torch.as_tensor(np.stack([b[0] for b in batch]), dtype=torch.float32)
        try:
            pred = model(points, [b[2] for b in batch])
            loss = objective_loss(pred, [b[1] for b in batch], tcfg.objective)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at step {step}")
        except TrainingDivergedError:
            # parameters still hold the last successful update
            if checkpoint is not None:
                _save(checkpoint, step)
                log.error("diverged at step %d; saved last good state to %s", step, checkpoint)
            raise
        optimizer.zero_grad()
        loss.backward()
        if tcfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
        optimizer.step()
        losses.append(value)
        if callback is not None:
            callback(step, value)
        if checkpoint is not None and tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
            _save(checkpoint, step + 1)
    if checkpoint is not None:
        _save(checkpoint, tcfg.steps)
    model.eval()
    return TrainResult(model, losses, tcfg.steps, optimizer)
