"""Masked image modeling for transformers and CNNs with an additive mask token and a frequency loss."""

from .backbones import BackboneConfig, build_backbone
from .data import DatasetSpec, ImageBatch, load_image_folder, make_batches
from .engine import TrainConfig, finetune, linear_probe, pretrain
from .masking import PatchMask, fill_with_mean, generate_random_mask, inject_mask_token
from .spectral import loss_freq, loss_spa, total_loss

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "build_backbone", "DatasetSpec", "ImageBatch", "load_image_folder", "make_batches",
    "TrainConfig", "finetune", "linear_probe", "pretrain", "PatchMask", "fill_with_mean",
    "generate_random_mask", "inject_mask_token", "loss_freq", "loss_spa", "total_loss",
]
