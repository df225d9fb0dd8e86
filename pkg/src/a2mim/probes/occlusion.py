"""Top-1 accuracy of a classifier as a growing fraction of patches is hidden."""

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ..data import make_batches
from ..engine import evaluate_accuracy
from ..errors import ConfigError, GeometryError, NumericError
from ..masking import fill_with_mean, generate_random_mask, masked_count
from .report import write_csv, write_json

__all__ = ["OcclusionReport", "occlusion_curve", "salient_patch_ranking"]


@dataclass
class OcclusionReport:
    mode: str
    patch_size: int
    ratios: list
    top1: list
    n_eval: int
    seeds: list
    provenance: dict = field(default_factory=dict)

    def rows(self):
        return [(r, a) for r, a in zip(self.ratios, self.top1)]

    def write(self, out_dir, stem="occlusion"):
        write_csv(f"{out_dir}/{stem}.csv", ["ratio", "top1"], self.rows())
        write_json(f"{out_dir}/{stem}.json", asdict(self))


def _patch_sums(values, patch_size):
    """Sum ``(B, H, W)`` values over non-overlapping patches -> ``(B, N)``."""
    b, h, w = values.shape
    if h % patch_size or w % patch_size:
        raise GeometryError(f"image {h}x{w} not divisible by patch {patch_size}")
    hp, wp = h // patch_size, w // patch_size
    return values.reshape(b, hp, patch_size, wp, patch_size).sum(dim=(2, 4)).reshape(b, hp * wp)


def salient_patch_ranking(model, images, labels, patch_size):
    """Patch indices sorted by saliency, most salient first.

    Saliency is the per-patch sum of the absolute input gradient of the
    true-class logit; ties keep index order.  Accepts one image ``(3, H, W)``
    with an int label, or a batch.
    """
    single = images.dim() == 3
    x = images.unsqueeze(0) if single else images
    y = torch.as_tensor([labels] if single else labels).reshape(-1)
    was_training = model.training
    model.eval()
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        logits = model.classify(x)
        picked = logits.gather(1, y.view(-1, 1)).sum()
        if picked.requires_grad:
            (grad,) = torch.autograd.grad(picked, x, allow_unused=True)
        else:
            grad = None
    model.train(was_training)
    if grad is None:
        grad = torch.zeros_like(x)
    if not torch.isfinite(grad).all():
        raise NumericError("non-finite input gradient while ranking patches")
    sal = _patch_sums(grad.abs().sum(1), patch_size).numpy()
    order = np.stack([np.argsort(-s, kind="stable") for s in sal])
    return order[0] if single else order


def _occlude(pixels, grid, patch_size):
    px = grid.repeat_interleave(patch_size, dim=-2).repeat_interleave(patch_size, dim=-1)
    return fill_with_mean(pixels, px, source="image")


def occlusion_curve(model, dataset, ratios, mode="random", patch_size=4, seed=0, batch_size=256):
    """Accuracy after hiding ``round(ratio * N)`` patches per image.

    Random mode draws an independent mask per image from ``(seed, image
    index, ratio index)``; salient mode hides the highest-saliency patches.
    Hidden pixels take the image's per-channel mean.  Ratio 0 is the clean
    accuracy, with no masking code involved.
    """
    ratios = [float(r) for r in ratios]
    if any(not 0 <= r <= 1 for r in ratios):
        raise ConfigError("occlusion ratios must lie in [0, 1]", key="probe.ratios")
    if any(b <= a for a, b in zip(ratios, ratios[1:])):
        raise ConfigError("occlusion ratios must be strictly increasing", key="probe.ratios")
    if mode not in ("random", "salient"):
        raise ConfigError(f"unknown occlusion mode {mode!r}", key="probe.mode")
    if len(dataset) == 0:
        raise ConfigError("empty evaluation split", key="data.root")
    side = dataset.spec.image_size
    if side % patch_size:
        raise GeometryError(f"image side {side} not divisible by occlusion patch {patch_size}")
    hp = side // patch_size
    n_patches = hp * hp

    rankings = None
    if mode == "salient" and any(r > 0 for r in ratios):
        rankings = {}
        for batch in make_batches(dataset, batch_size, shuffle=False):
            order = salient_patch_ranking(model, batch.pixels, batch.labels, patch_size)
            for i, o in zip(batch.indices, order):
                rankings[int(i)] = o

    top1 = []
    for k, ratio in enumerate(ratios):
        if ratio == 0:
            top1.append(evaluate_accuracy(model, dataset, batch_size))
            continue
        count = masked_count(ratio, n_patches)

        def occluded(batch, ratio=ratio, k=k, count=count):
            grids = []
            for i in batch.indices:
                if mode == "random":
                    state = np.random.SeedSequence([seed, int(i), k]).generate_state(1)[0]
                    g = torch.Generator().manual_seed(int(state))
                    grids.append(generate_random_mask((hp, hp), ratio, 0, generator=g).grid)
                else:
                    flat = torch.zeros(n_patches, dtype=torch.bool)
                    flat[torch.from_numpy(rankings[int(i)][:count])] = True
                    grids.append(flat.view(hp, hp))
            return _occlude(batch.pixels, torch.stack(grids), patch_size)

        top1.append(evaluate_accuracy(model, dataset, batch_size, pixels_fn=occluded))
    return OcclusionReport(mode=mode, patch_size=patch_size, ratios=ratios, top1=top1,
                           n_eval=len(dataset), seeds=[seed])
