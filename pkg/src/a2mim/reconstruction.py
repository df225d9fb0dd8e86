"""Reconstruction quality and image grids for pre-trained models."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import denormalize_images, make_batches
from .masking import fill_with_mean, generate_random_mask, upsample_mask_to_pixels

__all__ = ["masked_psnr", "reconstruct_masked", "reconstruction_psnr", "ReconstructionGrid",
           "render_reconstruction_grid"]


def masked_psnr(a, b, pixel_mask, peak=1.0):
    """PSNR between ``a`` and ``b`` (``(B, 3, H, W)``) over masked pixels only."""
    m = pixel_mask.unsqueeze(1).expand_as(a) if pixel_mask.dim() == 3 else pixel_mask
    if not m.any():
        return float("inf")
    mse = float(((a.double() - b.double())[m] ** 2).mean())
    return float("inf") if mse == 0 else 10.0 * np.log10(peak ** 2 / mse)


@torch.no_grad()
def reconstruct_masked(model, pixels, mask, fill="image"):
    """Return ``(prediction, pixel mask, filled input)`` for a given PatchMask."""
    px = upsample_mask_to_pixels(mask)
    filled = fill_with_mean(pixels, px, source=fill, dataset_mean=(0.0, 0.0, 0.0))
    was_training = model.training
    model.eval()
    pred = model.decode_to_image(model.forward_features(filled, model.feature_mask_for(mask)))
    model.train(was_training)
    return pred, px, filled


def _batch_mask(pixels, ratio, patch_size, seed):
    side = pixels.shape[-1] // patch_size
    return generate_random_mask((side, side), ratio, seed, batch_size=pixels.shape[0], patch_size=patch_size)


@torch.no_grad()
def reconstruction_psnr(model, dataset, ratio=0.6, patch_size=4, seed=0, batch_size=256, fill="image"):
    """Masked-region PSNR of predictions and of the mean-filled input, in [0, 1] pixel units.

    Masks are drawn per batch from ``(seed, batch index)``; returns
    ``(psnr_prediction, psnr_filled)`` pooled over every masked pixel.
    """
    sq_pred = sq_fill = 0.0
    count = 0
    mean, std = dataset.spec.mean, dataset.spec.std
    for k, batch in enumerate(make_batches(dataset, batch_size, shuffle=False, with_labels=False)):
        batch_seed = int(np.random.SeedSequence([seed, k]).generate_state(1)[0])
        mask = _batch_mask(batch.pixels, ratio, patch_size, seed=batch_seed)
        pred, px, filled = reconstruct_masked(model, batch.pixels, mask, fill)
        orig = denormalize_images(batch.pixels, mean, std).double()
        m = px.unsqueeze(1).expand_as(orig)
        sq_pred += float(((denormalize_images(pred, mean, std, clamp=True).double() - orig)[m] ** 2).sum())
        sq_fill += float(((denormalize_images(filled, mean, std).double() - orig)[m] ** 2).sum())
        count += int(m.sum())
    if count == 0:
        return float("inf"), float("inf")
    return tuple(10.0 * np.log10(count / s) if s > 0 else float("inf") for s in (sq_pred, sq_fill))


@dataclass
class ReconstructionGrid:
    image: np.ndarray
    psnr_prediction: float
    psnr_filled: float

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(self.image).save(path)
        return path


def _to_uint8(x):
    return (x.clamp(0, 1).permute(1, 2, 0).numpy() * 255.0 + 0.5).astype(np.uint8)


def render_reconstruction_grid(model, pixels, mean, std, ratio=0.6, patch_size=4, seed=0, fill="image",
                               scale=4, gutter=2):
    """One row per image: original | mean-filled masked input | prediction on masked regions.

    The prediction panel pastes original pixels wherever the mask is off.
    """
    mask = _batch_mask(pixels, ratio, patch_size, seed)
    pred, px, filled = reconstruct_masked(model, pixels, mask, fill)
    composite = torch.where(px.unsqueeze(1), pred, pixels)
    panels = [denormalize_images(t, mean, std, clamp=True) for t in (pixels, filled, composite)]
    orig = denormalize_images(pixels, mean, std)
    psnr_pred = masked_psnr(panels[2], orig, px)
    psnr_fill = masked_psnr(denormalize_images(filled, mean, std), orig, px)

    b, _, h, w = pixels.shape
    cell_h, cell_w = h * scale, w * scale
    canvas = np.full((b * cell_h + (b + 1) * gutter, 3 * cell_w + 4 * gutter, 3), 255, dtype=np.uint8)
    for r in range(b):
        for c, panel in enumerate(panels):
            tile = np.kron(_to_uint8(panel[r]), np.ones((scale, scale, 1), dtype=np.uint8))
            y = gutter + r * (cell_h + gutter)
            x = gutter + c * (cell_w + gutter)
            canvas[y:y + cell_h, x:x + cell_w] = tile
    return ReconstructionGrid(canvas, psnr_pred, psnr_fill)
