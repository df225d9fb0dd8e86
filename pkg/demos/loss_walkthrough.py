"""One masked reconstruction step by hand: mask, mean fill, token injection and both loss terms.

Runs in seconds with a randomly initialized tiny transformer.

    python3 demos/loss_walkthrough.py
"""

import torch

from a2mim.backbones import BackboneConfig, build_backbone
from a2mim.masking import fill_with_mean, generate_random_mask, upsample_mask_to_pixels
from a2mim.spectral import dft2, total_loss


def main():
    torch.manual_seed(0)
    model = build_backbone(BackboneConfig(depth=2, width=64, heads=2), seed=0)
    images = torch.rand(2, 3, 32, 32)

    mask = generate_random_mask((8, 8), 0.6, seed=0, batch_size=2, patch_size=4)
    pixel_mask = upsample_mask_to_pixels(mask)
    filled = fill_with_mean(images, pixel_mask, source="image")
    print(f"masked patches per image: {mask.grid.flatten(1).sum(1).tolist()} of 64")

    features = model.forward_features(filled, model.feature_mask_for(mask))
    pred = model.decode_to_image(features)
    terms = total_loss(pred, images, pixel_mask, lam=0.1)
    print(f"l_spa {terms.l_spa.item():.4f}  l_freq {terms.l_freq.item():.4f}  total {terms.total.item():.4f}")

    # with the error-magnitude weight, the frequency term is a squared spectral error,
    # which Parseval turns back into a pixel-space sum of squares
    err = (pred - images).detach()
    spectral = (dft2(err).abs() ** 2).sum() / (3 * 32 * 32 * 2)
    pixel = (err ** 2).sum() / 3 / 2
    print(f"mean spectral energy / (3HW) {float(spectral):.4f} vs pixel sum of squares / 3 {float(pixel):.4f}")

    terms.total.backward()
    grad = model.mask_token.values.grad
    print(f"mask token gradient norm {float(grad.norm()):.4e}")


if __name__ == "__main__":
    main()
