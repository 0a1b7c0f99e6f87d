"""Supervised training loop and transfer-learning orchestration.

Each epoch shuffles the scene list, then per scene: geometric and
chromatic augmentation, voxel subsampling, sphere cropping, one
forward/backward pass; gradients average over the batch and feed AdamW
under a one-cycle schedule. Validation runs per epoch on a single voxel
subsample per scene (the fast path). Per-scene randomness derives from
(seed, epoch, scene index), so data order cannot change results.

The loss, optimizer, and schedule primitives live in the losses and optim
modules and are re-exported here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import io as _io
from .augment import AugmentConfig, apply_chromatic, apply_geometric
from .cloud import IGNORE_LABEL, DatasetManifest
from .evaluation import ConfusionMatrix, fast_eval, metrics
from .labels import LabelSpace
from .losses import cross_entropy, lovasz_softmax, softmax, total_loss  # noqa: F401
from .network import (Model, backward_from_cache, forward_with_cache,
                      load_checkpoint, reinit_head)
from .optim import (AdamWConfig, AdamWState, OneCycleConfig, adamw_step,  # noqa: F401
                    onecycle_lr)
from .sampling import sphere_crop, voxel_grid_sample

BASELINE_MAX_LR = 0.006
FINETUNE_MAX_LR = 0.001


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the last model and history for dumps."""

    def __init__(self, message, model=None, history=None):
        super().__init__(message)
        self.model = model
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 1e-4
    batch_size: int = 2
    max_lr: float = BASELINE_MAX_LR
    onecycle: OneCycleConfig = field(default_factory=OneCycleConfig)
    adamw: AdamWConfig = field(default_factory=AdamWConfig)
    seed: int = 0
    voxel_size: float = 0.025
    crop_points: int = 100_000
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.max_epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("max_epochs >= 0, batch_size >= 1, patience >= 1 required")
        if self.max_lr <= 0 or self.min_delta < 0:
            raise ValueError("max_lr must be positive, min_delta non-negative")
        if self.voxel_size <= 0 or self.crop_points < 1:
            raise ValueError("voxel_size and crop_points must be positive")


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    miou: list = field(default_factory=list)
    macc: list = field(default_factory=list)
    allacc: list = field(default_factory=list)
    stop_reason: str = ""

    def __len__(self):
        return len(self.loss)

    def append(self, loss, lr, miou, macc, allacc):
        self.loss.append(float(loss))
        self.lr.append(float(lr))
        self.miou.append(float(miou))
        self.macc.append(float(macc))
        self.allacc.append(float(allacc))

    def to_table(self) -> str:
        lines = ["epoch\tloss\tlr\tmIoU\tmAcc\tallAcc"]
        for e in range(len(self.loss)):
            lines.append(f"{e}\t{self.loss[e]!r}\t{self.lr[e]!r}\t{self.miou[e]!r}"
                         f"\t{self.macc[e]!r}\t{self.allacc[e]!r}")
        lines.append(f"# stop_reason\t{self.stop_reason}")
        return "\n".join(lines) + "\n"


@dataclass
class EarlyStopTracker:
    """Stop once the epoch loss fails to improve by min_delta for patience epochs."""

    patience: int
    min_delta: float
    best: float = float("inf")
    streak: int = 0

    def update(self, loss: float) -> bool:
        if loss < self.best - self.min_delta:
            self.best = loss
            self.streak = 0
        else:
            self.streak += 1
        return self.streak >= self.patience


def _load_scenes(manifest: DatasetManifest, loader):
    scenes = []
    for sid, path in manifest.scenes():
        pc = loader(path)
        if pc.labels is None:
            raise ValueError(f"scene {sid!r} carries no labels")
        if pc.colors is None:
            raise ValueError(f"scene {sid!r} carries no colors (input features)")
        scenes.append(pc)
    if not scenes:
        raise ValueError("empty manifest")
    return scenes


def _scene_pass(model: Model, pc, cfg: TrainConfig, rng):
    """Augment, subsample, crop, and run one forward/backward. Returns
    (loss, grads) or None when the sample ends up below neighborhood size."""
    aug = apply_geometric(pc, cfg.augment, rng)
    aug = apply_chromatic(aug, cfg.augment, rng)
    si = voxel_grid_sample(aug.positions, cfg.voxel_size, rng)
    sub = aug.take(si.kept)
    crop = sphere_crop(sub.positions, cfg.crop_points, rng)
    sub = sub.take(crop)
    if len(sub) < model.config.k_neighbors:
        return None
    logits, ctx = forward_with_cache(model, sub.positions, sub.colors)
    loss, dlogits = total_loss(logits, sub.labels)
    grads = backward_from_cache(model, ctx, dlogits)
    return loss, grads


def _validate_epoch(model, val_scenes, cfg, epoch):
    conf = ConfusionMatrix.empty(model.config.num_classes)
    for i, pc in enumerate(val_scenes):
        labels, _ = fast_eval(model, pc, cfg.voxel_size,
                              seed=np.random.default_rng([cfg.seed, epoch, 10_000 + i]))
        conf.add(labels, pc.labels)
    rep = metrics(conf)
    return rep.miou, rep.macc, rep.allacc


def train(model: Model, train_manifest: DatasetManifest,
          val_manifest: DatasetManifest, label_space: LabelSpace,
          cfg: TrainConfig, loader=None, epoch_callback=None):
    """Run the full loop; returns (trained model, history).

    ``epoch_callback(epoch, model, history)``, when given, fires after each
    epoch's validation entry is appended.
    """
    loader = loader or _io.load_pointcloud
    train_scenes = _load_scenes(train_manifest, loader)
    val_scenes = _load_scenes(val_manifest, loader)
    for pc in train_scenes + val_scenes:
        bad = pc.labels[(pc.labels != IGNORE_LABEL)
                        & (pc.labels >= len(label_space.classes))]
        if len(bad):
            raise ValueError("scene labels fall outside the training label space")

    n = len(train_scenes)
    steps_per_epoch = -(-n // cfg.batch_size)
    total_steps = max(1, cfg.max_epochs * steps_per_epoch)
    history = TrainHistory()
    tracker = EarlyStopTracker(cfg.patience, cfg.min_delta)
    state = AdamWState()
    step = 0

    model = Model(params=dict(model.params), config=model.config,
                  label_space=label_space.name, step=model.step)
    for epoch in range(cfg.max_epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        epoch_losses = []
        epoch_lr = None
        for b0 in range(0, n, cfg.batch_size):
            batch = order[b0:b0 + cfg.batch_size]
            summed: dict[str, np.ndarray] = {}
            used = 0
            for scene_idx in batch:
                rng = np.random.default_rng([cfg.seed, epoch, int(scene_idx)])
                out = _scene_pass(model, train_scenes[scene_idx], cfg, rng)
                if out is None:
                    continue
                loss, grads = out
                epoch_losses.append(loss)
                used += 1
                for k, g in grads.items():
                    summed[k] = summed.get(k, 0.0) + g
            lr = onecycle_lr(min(step, total_steps - 1), total_steps,
                             cfg.max_lr, cfg.onecycle)
            if epoch_lr is None:
                epoch_lr = lr
            if used:
                mean_grads = {k: g / used for k, g in summed.items()}
                params, state = adamw_step(model.params, mean_grads, state,
                                           lr, cfg.adamw)
                model = model.with_params(params)
            step += 1

        epoch_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        if not np.isfinite(epoch_loss):
            history.stop_reason = "diverged"
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}",
                                   model=model, history=history)
        miou, macc, allacc = _validate_epoch(model, val_scenes, cfg, epoch)
        history.append(epoch_loss, epoch_lr, miou, macc, allacc)
        if epoch_callback is not None:
            epoch_callback(epoch, model, history)
        if tracker.update(epoch_loss):
            history.stop_reason = "early_stop"
            break
    if not history.stop_reason:
        history.stop_reason = "max_epochs"
    model.step = model.step + step
    return model, history


def finetune(pretrained, target_space: LabelSpace,
             train_manifest: DatasetManifest, val_manifest: DatasetManifest,
             cfg: TrainConfig, loader=None, epoch_callback=None):
    """Head-reinitialized continuation of a pretrained model.

    The segmentation head is replaced by a fresh seeded one sized for the
    target space; the backbone stays trainable. The learning-rate peak must
    not exceed the baseline peak (0.006); the conventional fine-tune value
    is 0.001.
    """
    model = load_checkpoint(pretrained) if isinstance(pretrained, (bytes, bytearray)) \
        else pretrained
    if cfg.max_lr > BASELINE_MAX_LR:
        raise ValueError(f"fine-tune max_lr {cfg.max_lr} exceeds the baseline "
                         f"peak {BASELINE_MAX_LR}")
    model = reinit_head(model, len(target_space.classes), seed=cfg.seed)
    if cfg.max_epochs == 0:
        history = TrainHistory(stop_reason="max_epochs")
        model.label_space = target_space.name
        return model, history
    return train(model, train_manifest, val_manifest, target_space, cfg,
                 loader=loader, epoch_callback=epoch_callback)
