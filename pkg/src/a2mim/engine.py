"""Pre-training, fine-tuning and linear probing loops.

Randomness inside a run is derived from ``(seed, epoch)`` for data order and
from ``(seed, step)`` for masks, never from global RNG state, so a run
resumed from a checkpoint continues with the same streams as an
uninterrupted one.
"""

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, restore_model, restore_optimizer, save_checkpoint
from .data import check_batch, make_batches
from .errors import ConfigError, NumericError
from .masking import fill_with_mean, generate_random_mask, upsample_mask_to_pixels
from .spectral import total_loss

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "lr_schedule",
    "make_optimizer",
    "pretrain_step",
    "pretrain",
    "finetune",
    "linear_probe",
    "evaluate_accuracy",
    "MetricLog",
]

REFERENCE_BATCH = 256
METRIC_FIELDS = ("step", "epoch", "lr", "l_spa", "l_freq", "total", "acc")


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    epochs: int = 30
    batch_size: int = 128
    # learning rate at REFERENCE_BATCH; scaled linearly with batch_size
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    warmup_epochs: float = 3
    schedule: str = "cosine"
    milestone_epoch: int = None
    mask_ratio: float = 0.6
    mask_patch_size: int = 4
    lambda_freq: float = 0.1
    normalize_omega: bool = False
    fill: str = "image"
    # None: max-norm 5 for transformers, off for CNNs
    clip_grad: float = None
    augment: bool = True
    checkpoint_every: int = 0
    num_workers: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune", "linear_probe"):
            raise ConfigError(f"unknown phase {self.phase!r}", key="train.phase")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ConfigError("epochs must be a non-negative integer", key="train.epochs")
        if self.epochs < 1 and self.phase == "pretrain":
            raise ConfigError("pre-training needs epochs >= 1", key="train.epochs")
        if not self.lr >= 0:
            raise ConfigError("learning rate must be >= 0", key="train.lr")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask ratio must lie in [0, 1]", key="mask.ratio")
        if self.lambda_freq < 0:
            raise ConfigError("lambda must be >= 0", key="train.lambda_freq")
        if self.schedule not in ("cosine", "step"):
            raise ConfigError(f"unknown schedule {self.schedule!r}", key="train.schedule")
        if self.batch_size <= 0:
            raise ConfigError("batch size must be positive", key="train.batch_size")
        self.betas = tuple(self.betas)

    @property
    def scaled_lr(self):
        return self.lr * self.batch_size / REFERENCE_BATCH

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_schedule(step, cfg, steps_per_epoch):
    """Linear warmup from 0, then cosine decay to 0 at the last step (or x0.1 step decay)."""
    total = max(1, int(cfg.epochs * steps_per_epoch))
    warmup = int(round(cfg.warmup_epochs * steps_per_epoch))
    warmup = min(warmup, total - 1)
    base = cfg.scaled_lr
    if step < warmup:
        return base * step / warmup
    if cfg.schedule == "step":
        milestone = cfg.milestone_epoch
        if milestone is not None and step >= milestone * steps_per_epoch:
            return base * 0.1
        return base
    span = max(1, total - 1 - warmup)
    progress = min(1.0, (step - warmup) / span)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(model, cfg, params=None):
    """AdamW; biases, norms, position/mask tokens are exempt from weight decay."""
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    if params is not None:
        keep = {id(p) for p in params}
        named = [(n, p) for n, p in named if id(p) in keep]
    decay = [p for n, p in named if p.ndim >= 2]
    no_decay = [p for n, p in named if p.ndim < 2]
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW([g for g in groups if g["params"]], lr=cfg.scaled_lr, betas=cfg.betas)


def _step_generator(seed, step):
    state = np.random.SeedSequence([int(seed), int(step), 7]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def _clip_value(model, cfg):
    if cfg.clip_grad is not None:
        return cfg.clip_grad if cfg.clip_grad > 0 else None
    return 5.0 if model.family == "transformer" else None


def _set_lr(optimizer, lr):
    for g in optimizer.param_groups:
        g["lr"] = lr


def masked_inputs(model, pixels, cfg, generator):
    """Draw masks and build the RGB-mean-filled input for one batch."""
    side = pixels.shape[-1] // cfg.mask_patch_size
    mask = generate_random_mask((side, side), cfg.mask_ratio, seed=-1, batch_size=pixels.shape[0],
                                patch_size=cfg.mask_patch_size, generator=generator)
    px = upsample_mask_to_pixels(mask)
    # normalized space: the dataset mean is the zero vector
    filled = fill_with_mean(pixels, px, source=cfg.fill, dataset_mean=(0.0, 0.0, 0.0))
    return mask, px, filled


def reconstruct(model, pixels, mask, cfg):
    px = upsample_mask_to_pixels(mask)
    filled = fill_with_mean(pixels, px, source=cfg.fill, dataset_mean=(0.0, 0.0, 0.0))
    feats = model.forward_features(filled, model.feature_mask_for(mask))
    return model.decode_to_image(feats), px, filled


def pretrain_step(model, batch, cfg, optimizer, step=0, lr=None, generator=None):
    """One A2MIM update: mask, fill, inject, decode, loss, optimizer step."""
    check_batch(batch, cfg.mask_patch_size)
    if generator is None:
        generator = _step_generator(cfg.seed, step)
    x = batch.pixels
    mask, px, filled = masked_inputs(model, x, cfg, generator)
    feats = model.forward_features(filled, model.feature_mask_for(mask))
    pred = model.decode_to_image(feats)
    terms = total_loss(pred, x, px, lam=cfg.lambda_freq, normalize_omega=cfg.normalize_omega)
    if not torch.isfinite(terms.total):
        digest = hashlib.sha256(x.detach().numpy().tobytes()).hexdigest()[:16]
        raise NumericError(f"non-finite loss at step {step} (inputs sha256 {digest})")
    if lr is not None:
        _set_lr(optimizer, lr)
    optimizer.zero_grad(set_to_none=True)
    terms.total.backward()
    clip = _clip_value(model, cfg)
    if clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), clip)
    optimizer.step()
    return replace(terms, l_spa=terms.l_spa.detach(), l_freq=terms.l_freq.detach(), total=terms.total.detach())


class MetricLog:
    """Per-step and per-epoch records, written as ``metrics.csv`` / ``epochs.csv``."""

    def __init__(self, steps=None, epochs=None):
        self.steps = list(steps or [])
        self.epochs = list(epochs or [])

    def add_step(self, **rec):
        self.steps.append(rec)

    def add_epoch(self, **rec):
        self.epochs.append(rec)

    @staticmethod
    def _write(path, rows, fields):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: ("" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                            for k in fields})

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self._write(out_dir / "metrics.csv", self.steps, METRIC_FIELDS)
        self._write(out_dir / "epochs.csv", self.epochs, METRIC_FIELDS[1:])


def _mean(values):
    return float(np.mean(values)) if values else float("nan")


def pretrain(model, dataset, cfg, out_dir=None, resume=None, run_config=None):
    """Pre-train ``model`` with the A2MIM objective; returns ``(model, MetricLog)``.

    ``resume`` is a checkpoint directory written by an earlier call with the
    same configuration.
    """
    if cfg.phase != "pretrain":
        raise ConfigError("pretrain expects phase='pretrain'", key="train.phase")
    dataset.spec.check_patch(cfg.mask_patch_size)
    optimizer = make_optimizer(model, cfg)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    metrics = MetricLog()
    start_epoch = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        restore_model(model, ckpt)
        restore_optimizer(optimizer, model, ckpt)
        start_epoch = ckpt.epoch
        metrics = MetricLog(ckpt.manifest["rng"].get("step_records", []), ckpt.manifest["metrics"])
    out_dir = Path(out_dir) if out_dir else None
    snapshot = {"train": cfg.to_dict(), "data": _spec_dict(dataset.spec), **(run_config or {})}
    step = start_epoch * steps_per_epoch
    model.train()
    for epoch in range(start_epoch, cfg.epochs):
        acc = {"l_spa": [], "l_freq": [], "total": []}
        for batch in make_batches(dataset, cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=epoch,
                                  augment=cfg.augment, with_labels=False, num_workers=cfg.num_workers):
            lr = lr_schedule(step, cfg, steps_per_epoch)
            terms = pretrain_step(model, batch, cfg, optimizer, step=step, lr=lr)
            l_spa, l_freq = float(terms.l_spa), float(terms.l_freq)
            total = l_spa + cfg.lambda_freq * l_freq
            metrics.add_step(step=step, epoch=epoch, lr=lr, l_spa=l_spa, l_freq=l_freq, total=total)
            for k, v in (("l_spa", l_spa), ("l_freq", l_freq), ("total", total)):
                acc[k].append(v)
            step += 1
        metrics.add_epoch(epoch=epoch, lr=lr, **{k: _mean(v) for k, v in acc.items()})
        log.info("pretrain epoch %d: total %.4f (spa %.4f freq %.4f)", epoch,
                 metrics.epochs[-1]["total"], metrics.epochs[-1]["l_spa"], metrics.epochs[-1]["l_freq"])
        last = epoch + 1 == cfg.epochs
        if out_dir and (last or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0)):
            name = "final" if last else f"epoch_{epoch + 1:04d}"
            save_checkpoint(out_dir / "checkpoints" / name, model, optimizer, epoch=epoch + 1,
                            config=snapshot, metrics=metrics.epochs,
                            rng={"seed": cfg.seed, "next_step": step, "step_records": metrics.steps},
                            complete=last)
    if out_dir:
        metrics.write(out_dir)
    return model, metrics


def _spec_dict(spec):
    d = asdict(spec)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


@torch.no_grad()
def evaluate_accuracy(model, dataset, batch_size=256, pixels_fn=None):
    """Top-1 accuracy without augmentation; ``pixels_fn(batch)`` may alter inputs."""
    was_training = model.training
    model.eval()
    correct = 0
    for batch in make_batches(dataset, batch_size, shuffle=False):
        x = batch.pixels if pixels_fn is None else pixels_fn(batch)
        correct += int((model.classify(x).argmax(1) == batch.labels).sum())
    model.train(was_training)
    return correct / len(dataset)


def _require_labels(dataset):
    if getattr(dataset, "labels", None) is None or len(dataset.labels) != len(dataset):
        raise ConfigError("labels are required for this phase", key="data.root")


def finetune(model, train_set, val_set, cfg, out_dir=None, run_config=None):
    """Supervised training of backbone + head; returns ``(model, accuracy_history, MetricLog)``.

    ``accuracy_history[0]`` is the accuracy before any update.
    """
    _require_labels(train_set)
    _require_labels(val_set)
    if model.head is None:
        model.attach_head(train_set.num_classes)
    optimizer = make_optimizer(model, cfg)
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    metrics = MetricLog()
    history = [evaluate_accuracy(model, val_set)]
    metrics.add_epoch(epoch=-1, acc=history[0])
    step = 0
    clip = _clip_value(model, cfg)
    for epoch in range(int(cfg.epochs)):
        model.train()
        losses = []
        for batch in make_batches(train_set, cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=epoch,
                                  augment=cfg.augment, num_workers=cfg.num_workers):
            lr = lr_schedule(step, cfg, steps_per_epoch)
            _set_lr(optimizer, lr)
            loss = F.cross_entropy(model.classify(batch.pixels), batch.labels)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite fine-tuning loss at step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), clip)
            optimizer.step()
            losses.append(float(loss.detach()))
            metrics.add_step(step=step, epoch=epoch, lr=lr, total=losses[-1])
            step += 1
        history.append(evaluate_accuracy(model, val_set))
        metrics.add_epoch(epoch=epoch, lr=lr, total=_mean(losses), acc=history[-1])
        log.info("finetune epoch %d: loss %.4f acc %.4f", epoch, _mean(losses), history[-1])
    if out_dir:
        out_dir = Path(out_dir)
        metrics.write(out_dir)
        snapshot = {"train": cfg.to_dict(), "data": _spec_dict(train_set.spec), **(run_config or {})}
        save_checkpoint(out_dir / "checkpoints" / "final", model, optimizer, epoch=int(cfg.epochs),
                        config=snapshot, metrics=metrics.epochs, rng={"seed": cfg.seed}, kind="finetune")
    return model, history, metrics


@torch.no_grad()
def pooled_features(model, dataset, batch_size=256):
    model.eval()
    feats, labels = [], []
    for batch in make_batches(dataset, batch_size, shuffle=False):
        feats.append(model.pooled(model.forward_features(batch.pixels)))
        labels.append(batch.labels)
    return torch.cat(feats), torch.cat(labels)


def linear_probe(model, train_set, val_set, cfg):
    """Train an affine classifier on frozen pooled features; returns ``(accuracy, head)``.

    The backbone is never updated: features are extracted once in eval mode.
    """
    _require_labels(train_set)
    _require_labels(val_set)
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        xtr, ytr = pooled_features(model, train_set)
        xva, yva = pooled_features(model, val_set)
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    mu, sd = xtr.mean(0), xtr.std(0).clamp_min(1e-6)
    xtr, xva = (xtr - mu) / sd, (xva - mu) / sd
    g = torch.Generator().manual_seed(int(cfg.seed))
    head = torch.nn.Linear(xtr.shape[1], train_set.num_classes)
    with torch.no_grad():
        head.weight.normal_(0, 0.01, generator=g)
        head.bias.zero_()
    opt = torch.optim.AdamW(head.parameters(), lr=cfg.scaled_lr, weight_decay=cfg.weight_decay, betas=cfg.betas)
    n = xtr.shape[0]
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    step = 0
    for epoch in range(int(cfg.epochs)):
        order = np.random.default_rng([int(cfg.seed), epoch]).permutation(n)
        for i in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[i:i + cfg.batch_size])
            _set_lr(opt, lr_schedule(step, cfg, steps_per_epoch))
            loss = F.cross_entropy(head(xtr[idx]), ytr[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
    with torch.no_grad():
        acc = float((head(xva).argmax(1) == yva).float().mean())
    # fold the standardization into the affine map
    with torch.no_grad():
        w = head.weight / sd
        b = head.bias - (w * mu).sum(1)
        head.weight.copy_(w)
        head.bias.copy_(b)
    return acc, head
