"""Patch masks, RGB-mean filling and additive mask-token injection.

A :class:`PatchMask` is a boolean grid over non-overlapping image patches
(``True`` = hidden).  The pre-training input is built as::

    x_mask = x * (1 - M) + mean(x) * M

and the learnable token is added, not substituted, to an intermediate
feature map ``z``::

    z_mask = z + T * D(M)

where ``D`` resamples the patch grid to the feature resolution.
"""

import base64
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, GeometryError

__all__ = [
    "PatchMask",
    "MaskToken",
    "masked_count",
    "generate_random_mask",
    "upsample_mask_to_pixels",
    "downsample_mask_to_grid",
    "fill_with_mean",
    "inject_mask_token",
    "mask_to_bytes",
    "mask_from_bytes",
]


def round_half_up(x):
    """Round half away from zero (``round`` in Python is banker's rounding)."""
    x = round(x, 9)  # absorb float noise such as 0.35 * 10 = 3.4999999999999996
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def masked_count(ratio, n):
    return round_half_up(ratio * n)


@dataclass
class PatchMask:
    """Boolean patch grid, shape ``(Hp, Wp)`` or batched ``(B, Hp, Wp)``."""

    grid: torch.Tensor
    patch_size: int
    ratio_requested: float = float("nan")
    seed: int = -1

    def __post_init__(self):
        if self.grid.dtype != torch.bool:
            self.grid = self.grid.bool()
        if self.grid.dim() not in (2, 3):
            raise GeometryError(f"mask grid must be 2-D or 3-D, got shape {tuple(self.grid.shape)}")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1", key="mask.patch_size")

    @property
    def grid_shape(self):
        return tuple(self.grid.shape[-2:])

    @property
    def pixel_shape(self):
        hp, wp = self.grid_shape
        return hp * self.patch_size, wp * self.patch_size

    @property
    def num_masked(self):
        return int(self.grid.sum())

    def __getitem__(self, i):
        if self.grid.dim() != 3:
            raise IndexError("only batched masks can be indexed")
        return PatchMask(self.grid[i], self.patch_size, self.ratio_requested, self.seed)


class MaskToken(nn.Module):
    """Learnable vector added to the features at ``injection_point``."""

    def __init__(self, width, injection_point, std=0.02):
        super().__init__()
        self.injection_point = injection_point
        self.values = nn.Parameter(torch.zeros(width))
        nn.init.normal_(self.values, mean=0.0, std=std)

    @property
    def width(self):
        return self.values.numel()

    def forward(self, features, feature_mask):
        return inject_mask_token(features, self.values, feature_mask)


def _balanced_subsets(n, k, b, generator):
    """``b`` uniformly random ``k``-subsets of ``range(n)`` with balanced cell coverage.

    Masks come in blocks of ``n / gcd(n, k)``: within a block, mask ``t`` takes
    the cyclic window ``[t k, t k + k)`` of one fresh random permutation, so
    every cell is used equally often per block while each single mask is still
    a uniform draw without replacement.  The batch order is shuffled afterwards.
    """
    block = n // math.gcd(n, k)
    n_blocks = -(-b // block)
    perms = torch.stack([torch.randperm(n, generator=generator) for _ in range(n_blocks)])
    offsets = (torch.arange(block)[:, None] * k + torch.arange(k)[None, :]) % n
    cells = perms[:, offsets].reshape(n_blocks * block, k)
    order = torch.randperm(n_blocks * block, generator=generator)[:b]
    return cells[order]


def generate_random_mask(grid_shape, ratio, seed, batch_size=None, patch_size=1, generator=None):
    """Mask exactly ``round(ratio * N)`` patches chosen uniformly without replacement.

    With ``batch_size`` set, a mask is drawn for every image and the grid has
    shape ``(B, Hp, Wp)``; the batch is stratified so that every cell is
    masked at nearly the same rate.  A caller-supplied ``generator`` takes
    precedence over ``seed``.
    """
    if not 0.0 <= ratio <= 1.0 or not math.isfinite(ratio):
        raise ConfigError(f"mask ratio must lie in [0, 1], got {ratio}", key="mask.ratio")
    hp, wp = (int(s) for s in grid_shape)
    if hp < 1 or wp < 1:
        raise GeometryError(f"grid dims must be >= 1, got {grid_shape}")
    n = hp * wp
    k = masked_count(ratio, n)
    if generator is None:
        generator = torch.Generator().manual_seed(int(seed))
    b = 1 if batch_size is None else int(batch_size)
    grid = torch.zeros(b, n, dtype=torch.bool)
    if 0 < k < n:
        grid.scatter_(1, _balanced_subsets(n, k, b, generator), True)
    elif k == n:
        grid[:] = True
    grid = grid.view(b, hp, wp)
    if batch_size is None:
        grid = grid[0]
    return PatchMask(grid, int(patch_size), float(ratio), int(seed))


def upsample_mask_to_pixels(mask):
    """Expand each grid cell to a ``patch_size x patch_size`` block."""
    p = mask.patch_size
    return mask.grid.repeat_interleave(p, dim=-2).repeat_interleave(p, dim=-1)


def _resample_axis(grid, axis, src, dst):
    if dst == src:
        return grid
    if dst > src:
        if dst % src:
            raise GeometryError(f"feature size {dst} is not an integer multiple of mask grid {src}")
        return grid.repeat_interleave(dst // src, dim=axis)
    if src % dst:
        raise GeometryError(f"mask grid {src} is not an integer multiple of feature size {dst}")
    k = src // dst
    shape = list(grid.shape)
    shape[axis:axis + 1] = [dst, k]
    # a coarse cell is masked only if every covered patch is masked
    return grid.reshape(shape).all(dim=axis + 1)


def downsample_mask_to_grid(mask, feature_hw):
    """Resample the patch grid to a feature map of spatial size ``feature_hw``."""
    grid = mask.grid if isinstance(mask, PatchMask) else mask.bool()
    h, w = (int(s) for s in feature_hw)
    hp, wp = grid.shape[-2:]
    out = _resample_axis(grid, grid.dim() - 2, hp, h)
    out = _resample_axis(out, out.dim() - 1, wp, w)
    return out


def fill_with_mean(pixels, pixel_mask, source="image", dataset_mean=None):
    """Replace masked pixels by a per-channel mean.

    ``pixels`` is ``(B, 3, H, W)`` (or ``(3, H, W)``); ``pixel_mask`` is
    ``(B, H, W)`` or ``(H, W)``.  ``source`` selects the fill value:

    - ``"image"``: mean of each image channel over all its pixels (its DC term)
    - ``"visible"``: mean over unmasked pixels only; falls back to ``"image"``
      for a fully masked image
    - ``"dataset"``: the fixed per-channel ``dataset_mean``
    """
    squeeze = pixels.dim() == 3
    x = pixels.unsqueeze(0) if squeeze else pixels
    m = pixel_mask.bool()
    if m.dim() == 2:
        m = m.unsqueeze(0).expand(x.shape[0], -1, -1)
    if x.dim() != 4 or m.shape != (x.shape[0], *x.shape[-2:]):
        raise GeometryError(
            f"mask shape {tuple(pixel_mask.shape)} does not match image shape {tuple(pixels.shape)}")
    m4 = m.unsqueeze(1)
    if source == "image":
        fill = x.mean(dim=(-2, -1), keepdim=True)
    elif source == "visible":
        vis = (~m4).to(x.dtype)
        count = vis.sum(dim=(-2, -1), keepdim=True)
        vis_mean = (x * vis).sum(dim=(-2, -1), keepdim=True) / count.clamp_min(1)
        fill = torch.where(count > 0, vis_mean, x.mean(dim=(-2, -1), keepdim=True))
    elif source == "dataset":
        if dataset_mean is None:
            raise ConfigError("dataset_mean is required for source='dataset'", key="mask.fill")
        fill = torch.as_tensor(dataset_mean, dtype=x.dtype, device=x.device).view(1, -1, 1, 1)
    else:
        raise ConfigError(f"unknown fill source {source!r}", key="mask.fill")
    out = torch.where(m4, fill.expand_as(x), x)
    return out[0] if squeeze else out


def inject_mask_token(features, token, feature_mask):
    """Add ``token`` to ``features`` at masked positions; other positions are untouched.

    Accepts CNN maps ``(B, C, h, w)`` with a ``(B, h, w)``/``(h, w)`` mask, or
    token sequences ``(B, N, C)`` with a ``(B, N)``/``(N,)`` mask.
    """
    token = token.reshape(-1)
    m = feature_mask.bool()
    if features.dim() == 4:
        b, c, h, w = features.shape
        if token.numel() != c:
            raise GeometryError(f"token width {token.numel()} != feature channels {c}")
        if m.shape[-2:] != (h, w):
            raise GeometryError(f"feature mask {tuple(m.shape)} does not match feature map {(h, w)}")
        m = m.expand(b, h, w).unsqueeze(1)
        t = token.view(1, c, 1, 1)
    elif features.dim() == 3:
        b, n, c = features.shape
        if token.numel() != c:
            raise GeometryError(f"token width {token.numel()} != feature channels {c}")
        if m.dim() == 3:
            m = m.flatten(-2)
        if m.shape[-1] != n:
            raise GeometryError(f"feature mask has {m.shape[-1]} positions, sequence has {n}")
        m = m.expand(b, n).unsqueeze(-1)
        t = token.view(1, 1, c)
    else:
        raise GeometryError(f"unsupported feature rank {features.dim()}")
    # where() keeps unmasked entries bit-identical (x + 0.0 would turn -0.0 into +0.0)
    return torch.where(m, features + t, features)


# --- serialization -----------------------------------------------------------
#
# Little-endian layout:
#   4s   magic  b"PMSK"
#   B    format version (1)
#   H H  grid height, grid width
#   H    patch size
#   d    requested ratio (float64)
#   q    seed (int64)
#   B    value of the first run (0 or 1)
#   I    number of runs R
#   R*I  run lengths over the row-major flattened grid
_MAGIC = b"PMSK"
_HEADER = struct.Struct("<4sBHHHdqBI")


def mask_to_bytes(mask):
    grid = mask.grid
    if grid.dim() != 2:
        raise GeometryError("serialize one mask at a time")
    flat = grid.flatten().numpy().astype(np.uint8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).astype("<u4")
    hp, wp = grid.shape
    head = _HEADER.pack(_MAGIC, 1, hp, wp, mask.patch_size, mask.ratio_requested,
                        mask.seed, int(flat[0]) if flat.size else 0, runs.size)
    return head + runs.tobytes()


def mask_from_bytes(data):
    if len(data) < _HEADER.size:
        raise GeometryError("truncated mask record")
    magic, version, hp, wp, patch, ratio, seed, first, nruns = _HEADER.unpack_from(data)
    if magic != _MAGIC or version != 1:
        raise GeometryError("not a mask record")
    runs = np.frombuffer(data, dtype="<u4", count=nruns, offset=_HEADER.size)
    if runs.sum() != hp * wp:
        raise GeometryError("run lengths do not cover the grid")
    values = (np.arange(nruns) + first) % 2
    flat = np.repeat(values, runs).astype(bool)
    grid = torch.from_numpy(flat.reshape(hp, wp).copy())
    return PatchMask(grid, patch, ratio, seed)


def mask_to_b64(mask):
    return base64.b64encode(mask_to_bytes(mask)).decode("ascii")


def mask_from_b64(text):
    return mask_from_bytes(base64.b64decode(text))
