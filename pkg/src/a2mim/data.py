"""Image-folder ingestion, normalization, augmentation and batching.

Datasets are small enough to decode once into memory.  Every random choice
(shuffle order, crop box, flip) is drawn from a generator seeded by
``(seed, epoch)`` or ``(seed, epoch, item)``, so a batch stream is a pure
function of its arguments no matter how many workers prepare it.
"""

import json
import logging
import math
import queue
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, EmptyDatasetError, GeometryError, ImageLoadError

log = logging.getLogger(__name__)

__all__ = [
    "DatasetSpec",
    "ImageBatch",
    "ImageFolderDataset",
    "load_image_folder",
    "make_batches",
    "normalize_images",
    "denormalize_images",
    "compute_mean_std",
]

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass
class DatasetSpec:
    root: str
    split: str = "train"
    num_classes: int = None
    image_size: int = 32
    # None: measured on the split itself at load time
    mean: tuple = None
    std: tuple = None
    crop_scale: tuple = (0.8, 1.0)
    hflip: bool = True
    seed: int = 0

    def __post_init__(self):
        lo, hi = (float(v) for v in self.crop_scale)
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError(f"crop scale range {self.crop_scale} must lie in (0, 1]", key="data.crop_scale")
        self.crop_scale = (lo, hi)
        if self.std is not None and any(s <= 0 for s in self.std):
            raise ConfigError("std components must be > 0", key="data.std")

    def check_patch(self, mask_patch_size):
        if self.image_size % mask_patch_size:
            raise ConfigError(
                f"image size {self.image_size} is not a multiple of mask patch {mask_patch_size}",
                key="mask.patch_size")
        if self.image_size < 2 * mask_patch_size:
            raise ConfigError("image side must be at least twice the mask patch size", key="mask.patch_size")


@dataclass
class ImageBatch:
    pixels: torch.Tensor
    labels: torch.Tensor = None
    mean: tuple = (0.0, 0.0, 0.0)
    std: tuple = (1.0, 1.0, 1.0)
    indices: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return self.pixels.shape[0]


def normalize_images(raw, mean, std):
    std_t = torch.as_tensor(std, dtype=raw.dtype)
    if (std_t <= 0).any():
        raise ConfigError("std components must be > 0", key="data.std")
    shape = (-1, 1, 1)
    return (raw - torch.as_tensor(mean, dtype=raw.dtype).view(shape)) / std_t.view(shape)


def denormalize_images(x, mean, std, clamp=False):
    std_t = torch.as_tensor(std, dtype=x.dtype)
    if (std_t <= 0).any():
        raise ConfigError("std components must be > 0", key="data.std")
    shape = (-1, 1, 1)
    out = x * std_t.view(shape) + torch.as_tensor(mean, dtype=x.dtype).view(shape)
    return out.clamp(0, 1) if clamp else out


class ImageFolderDataset:
    """Directory-per-class images decoded into a uint8 array ``(N, H, W, 3)``."""

    def __init__(self, spec, images, labels, paths, classes):
        self.spec = spec
        self.images = images
        self.labels = labels
        self.paths = paths
        self.classes = classes
        self.class_to_idx = {c: i for i, c in enumerate(classes)}
        if spec.mean is None or spec.std is None:
            mean, std = compute_mean_std(images)
            spec.mean = spec.mean or mean
            spec.std = spec.std or std

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return self.spec.num_classes or len(self.classes)

    def save_class_index(self, path):
        Path(path).write_text(json.dumps(self.class_to_idx, indent=2, sort_keys=True))

    def raw(self, indices):
        """Float pixels in [0, 1], shape ``(B, 3, H, W)``, no augmentation."""
        arr = self.images[np.asarray(indices)]
        return torch.from_numpy(arr).permute(0, 3, 1, 2).float().div_(255.0)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return ImageFolderDataset(self.spec, self.images[indices], self.labels[indices],
                                  [self.paths[i] for i in indices], self.classes)


def compute_mean_std(images):
    x = images.reshape(-1, 3).astype(np.float64) / 255.0
    mean = tuple(float(v) for v in x.mean(axis=0))
    std = tuple(float(max(v, 1e-6)) for v in x.std(axis=0))
    return mean, std


def _decode(path, size):
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8)


def load_image_folder(spec):
    """Decode ``root/split/<class>/*`` into memory.

    Classes are indexed alphabetically; items are ordered by class then file
    name, so iteration order never depends on the file system.
    """
    root = Path(spec.root)
    if not root.is_dir():
        raise ConfigError(f"dataset root {root} does not exist", key="data.root")
    base = root / spec.split if spec.split and (root / spec.split).is_dir() else root
    classes = sorted(p.name for p in base.iterdir() if p.is_dir())
    files, labels = [], []
    for idx, name in enumerate(classes):
        for f in sorted((base / name).iterdir()):
            if f.suffix.lower() in IMAGE_SUFFIXES:
                files.append(f)
                labels.append(idx)
    if not files:
        raise EmptyDatasetError(f"no images found under {base}", key="data.root")
    if spec.num_classes is not None and len(classes) > spec.num_classes:
        raise ConfigError(f"found {len(classes)} classes, expected {spec.num_classes}", key="data.num_classes")
    images, bad = [], []
    for f in files:
        try:
            images.append(_decode(f, spec.image_size))
        except (UnidentifiedImageError, OSError):
            bad.append(f)
    if bad:
        raise ImageLoadError(bad)
    log.info("loaded %d images in %d classes from %s", len(files), len(classes), base)
    return ImageFolderDataset(spec, np.stack(images), np.asarray(labels, dtype=np.int64),
                              [str(f) for f in files], classes)


def crop_box(rng, height, width, scale, ratio=(3 / 4, 4 / 3)):
    """Random-resized-crop box ``(top, left, h, w)``; center crop after 10 misses."""
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    side = min(height, width)
    return (height - side) // 2, (width - side) // 2, side, side


def augment_item(img, rng, spec):
    """img: float tensor (3, H, W) in [0, 1]."""
    _, h, w = img.shape
    top, left, ch, cw = crop_box(rng, h, w, spec.crop_scale)
    crop = img[:, top:top + ch, left:left + cw]
    if (ch, cw) != (spec.image_size, spec.image_size):
        crop = F.interpolate(crop[None], size=(spec.image_size, spec.image_size),
                             mode="bilinear", align_corners=False)[0]
    if spec.hflip and rng.random() < 0.5:
        crop = crop.flip(-1)
    return crop


def _epoch_order(n, shuffle, seed, epoch):
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def _prepare(dataset, idx, augment, seed, epoch, with_labels):
    raw = dataset.raw(idx)
    if augment:
        raw = torch.stack([
            augment_item(raw[k], np.random.default_rng([int(seed), int(epoch), int(i), 1]), dataset.spec)
            for k, i in enumerate(idx)
        ])
    spec = dataset.spec
    labels = torch.from_numpy(dataset.labels[idx]) if with_labels else None
    return ImageBatch(normalize_images(raw, spec.mean, spec.std), labels, tuple(spec.mean), tuple(spec.std), idx)


def make_batches(dataset, batch_size, shuffle=True, seed=0, epoch=0, drop_last=False, augment=False,
                 with_labels=True, num_workers=0, prefetch=2):
    """Yield :class:`ImageBatch` objects covering one epoch.

    The order is fixed by ``(seed, epoch)``; ``num_workers > 0`` prepares
    batches in background threads feeding a bounded queue without changing
    the sequence.
    """
    if batch_size <= 0:
        raise ConfigError(f"batch size must be positive, got {batch_size}", key="train.batch_size")
    n = len(dataset)
    if drop_last and batch_size > n:
        raise ConfigError("batch size exceeds dataset size with drop_last", key="train.batch_size")
    order = _epoch_order(n, shuffle, seed, epoch)
    stop = n - n % batch_size if drop_last else n
    chunks = [order[i:min(i + batch_size, stop)] for i in range(0, stop, batch_size)]

    def job(idx):
        return _prepare(dataset, idx, augment, seed, epoch, with_labels)

    if num_workers <= 0:
        for idx in chunks:
            yield job(idx)
        return

    # ordered map over a thread pool, at most `prefetch` batches in flight
    q = queue.Queue(maxsize=max(1, prefetch))
    done = object()

    def producer():
        with ThreadPoolExecutor(num_workers) as pool:
            pending = deque()
            for idx in chunks:
                pending.append(pool.submit(job, idx))
                if len(pending) >= num_workers + prefetch:
                    q.put(pending.popleft().result())
            while pending:
                q.put(pending.popleft().result())
        q.put(done)

    t = threading.Thread(target=producer, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    t.join()


def check_batch(batch, mask_patch_size, num_classes=None):
    b, c, h, w = batch.pixels.shape
    if c != 3 or b < 1:
        raise GeometryError(f"bad batch shape {tuple(batch.pixels.shape)}")
    if h % mask_patch_size or w % mask_patch_size:
        raise GeometryError(f"image {h}x{w} not divisible by mask patch {mask_patch_size}")
    if batch.labels is not None and num_classes is not None:
        if batch.labels.min() < 0 or batch.labels.max() >= num_classes:
            raise ConfigError("labels outside [0, C)", key="data.num_classes")
