"""Training loop: seeded shuffling over a resample plan, per-epoch
checkpoints, validation IoU, and the stepped learning-rate schedule."""

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .model import save_model
from .sampler import augment


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr0: float = 5e-4
    lr_decay: float = 0.8
    lr_step_epochs: int = 5
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr0 > 0:
            raise ValueError("epochs and batch_size must be >= 1, lr0 > 0")
        return self


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_iou: float
    checkpoint: str | None
    seconds: float


def lr_at(epoch, cfg):
    """Stepped decay: lr0 * decay^(epoch // step)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_step_epochs)


def validation_iou(model, val_specs, dataset, batch_size=16, threshold=0.5):
    """Tumor-channel IoU over all validation patches (no augmentation, no
    re-sampling), binarized at the given probability threshold."""
    inter = 0
    union = 0
    for start in range(0, len(val_specs), batch_size):
        chunk = val_specs[start:start + batch_size]
        imgs, tgts = zip(*(dataset.load(s) for s in chunk))
        out = model.forward(np.stack(imgs), training=False)
        pred = out.final.data[:, 0] >= threshold
        truth = np.stack(tgts)[:, 0] >= 0.5
        inter += int((pred & truth).sum())
        union += int((pred | truth).sum())
    return 1.0 if union == 0 else inter / union


def train(model, plan, dataset, val_specs, cfg, out_dir=None, augment_cfg=None):
    """Run the full loop; returns one EpochReport per epoch.

    Deterministic for a fixed seed: the shuffle order and every patch's
    augmentation stream derive from (seed, epoch, position).
    """
    cfg.validate()
    if plan.total == 0:
        raise ValueError("resample plan is empty")
    if not val_specs:
        raise ValueError("validation set is empty")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    shuffle_rng = np.random.default_rng(cfg.seed)
    instances = plan.expanded_indices()
    reports = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        order = shuffle_rng.permutation(len(instances))
        losses = []
        for b, start in enumerate(range(0, len(instances), cfg.batch_size)):
            batch = instances[order[start:start + cfg.batch_size]]
            imgs, tgts = [], []
            for j, patch_idx in enumerate(batch):
                img, tgt = dataset.load(plan.specs[patch_idx])
                if augment_cfg is not None:
                    img, tgt = augment(img, tgt, augment_cfg,
                                       seed=[cfg.seed, epoch, start + j])
                imgs.append(img)
                tgts.append(tgt)
            x = np.stack(imgs)
            y = np.stack(tgts)
            model.store.zero_grad()
            out = model.forward(x, training=True)
            loss = model.loss(out, y)
            value = float(loss.data)
            if not np.isfinite(value):
                raise RuntimeError(
                    f"non-finite loss ({value}) at epoch {epoch}, batch {b}")
            nn.backward(loss)
            nn.adam_step(model.store, lr=lr)
            losses.append(value)
        iou = validation_iou(model, val_specs, dataset,
                             batch_size=max(cfg.batch_size, 8))
        ckpt = None
        if out_dir is not None:
            ckpt = str(save_model(model, out_dir / f"epoch_{epoch:03d}"))
        reports.append(EpochReport(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            val_iou=float(iou),
            checkpoint=ckpt,
            seconds=time.perf_counter() - t0,
        ))
    return reports


def select_top_epochs(reports, n=5):
    """Best n epochs by validation IoU; ties go to the earlier epoch."""
    if not reports:
        raise ValueError("no epoch reports")
    ranked = sorted(reports, key=lambda r: (-r.val_iou, r.epoch))
    return ranked[:n]
