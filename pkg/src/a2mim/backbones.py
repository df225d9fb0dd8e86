"""Tiny Transformer and residual CNN encoders with a shared MIM interface.

Both families expose

- ``forward_features(x, feature_mask=None, token=None, return_taps=False)``
  adding the mask token exactly once at ``injection_point``;
- ``decode_to_image(final)``: linear per-position map to ``3 * r**2`` values
  followed by a pixel shuffle (``r`` is the total downsampling factor);
- ``classify(x)``: pooled final features through a linear head.

Injection points: for the Transformer, layer ``l`` in ``0..L`` is the token
sequence entering block ``l`` (``L`` = after the last block, before the final
norm).  For the CNN, stage ``s`` in ``1..4`` is the output of stage ``s``.
"""

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, GeometryError
from .masking import MaskToken, downsample_mask_to_grid, inject_mask_token, round_half_up

__all__ = [
    "BackboneConfig",
    "FeatureMap",
    "VisionTransformer",
    "ResNet",
    "build_backbone",
    "default_injection",
]


@dataclass
class BackboneConfig:
    family: str = "transformer"
    image_size: int = 32
    # transformer
    depth: int = 6
    width: int = 192
    heads: int = 3
    patch_size: int = 4
    mlp_ratio: float = 4.0
    # cnn
    stage_blocks: tuple = (2, 2, 2, 2)
    stage_widths: tuple = (32, 64, 128, 256)
    # None picks the family default
    injection_point: int = None
    num_classes: int = None

    def __post_init__(self):
        self.stage_blocks = tuple(int(b) for b in self.stage_blocks)
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        if self.injection_point is None:
            self.injection_point = default_injection(self)

    def to_dict(self):
        d = asdict(self)
        d["stage_blocks"] = list(self.stage_blocks)
        d["stage_widths"] = list(self.stage_widths)
        return d


def default_injection(cfg):
    if cfg.family == "cnn":
        return 3
    # medium layer, about 3/4 of the depth
    return round_half_up(0.75 * cfg.depth)


@dataclass
class FeatureMap:
    values: torch.Tensor
    depth: str
    taps: list = field(default_factory=list)


def sincos_pos_embed(width, grid):
    """Fixed 2-D sine-cosine position embedding, shape ``(grid*grid, width)``."""
    if width % 4:
        raise ConfigError("transformer width must be divisible by 4", key="model.width")
    quarter = width // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    ys, xs = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    out_y = np.einsum("n,d->nd", ys.reshape(-1), omega)
    out_x = np.einsum("n,d->nd", xs.reshape(-1), omega)
    emb = np.concatenate([np.sin(out_x), np.cos(out_x), np.sin(out_y), np.cos(out_y)], axis=1)
    return torch.from_numpy(emb).float()


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ConfigError("width must be divisible by heads", key="model.heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        x = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(x.transpose(1, 2).reshape(b, n, c))


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class _Backbone(nn.Module):
    family = None

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.head = None

    # subclasses define: final_width, stride, injection_hw, _run(x, inject)

    def num_parameters(self):
        return sum(p.numel() for p in self.parameters())

    def attach_head(self, num_classes):
        self.cfg.num_classes = int(num_classes)
        self.head = nn.Linear(self.final_width, int(num_classes))
        nn.init.trunc_normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)
        return self.head

    def feature_mask_for(self, patch_mask):
        """Resample a patch mask (grid or PatchMask) to the injection resolution."""
        return downsample_mask_to_grid(patch_mask, self.injection_hw)

    def forward_features(self, x, feature_mask=None, token=None, return_taps=False):
        if x.shape[-2:] != (self.cfg.image_size, self.cfg.image_size):
            raise GeometryError(f"expected {self.cfg.image_size}px input, got {tuple(x.shape[-2:])}")
        inject = None
        if feature_mask is not None:
            if feature_mask.shape[-2:] != self.injection_hw:
                raise GeometryError(
                    f"feature mask {tuple(feature_mask.shape[-2:])} does not match injection "
                    f"resolution {self.injection_hw}")
            tok = self.mask_token.values if token is None else torch.as_tensor(token)
            inject = (tok, feature_mask)
        return self._run(x, inject, return_taps)

    def decode_to_image(self, final):
        if isinstance(final, FeatureMap):
            final = final.values
        grid = self._to_grid(final)
        out = self.decoder(grid)
        return F.pixel_shuffle(out, self.stride)

    def pooled(self, final):
        if isinstance(final, FeatureMap):
            final = final.values
        return self._to_grid(final).mean(dim=(-2, -1))

    def classify(self, x):
        if self.head is None:
            raise ConfigError("model has no classification head attached", key="data.num_classes")
        return self.head(self.pooled(self.forward_features(x)))

    def forward(self, x):
        return self.classify(x)


class VisionTransformer(_Backbone):
    family = "transformer"

    def __init__(self, cfg):
        super().__init__(cfg)
        if cfg.image_size % cfg.patch_size:
            raise ConfigError("patch size must divide the input side", key="model.patch_size")
        if not 0 <= cfg.injection_point <= cfg.depth:
            raise ConfigError(
                f"injection layer {cfg.injection_point} outside 0..{cfg.depth}", key="model.injection_point")
        self.grid = cfg.image_size // cfg.patch_size
        self.stride = cfg.patch_size
        self.final_width = cfg.width
        self.injection_hw = (self.grid, self.grid)
        self.patch_embed = nn.Conv2d(3, cfg.width, cfg.patch_size, cfg.patch_size)
        self.register_buffer("pos_embed", sincos_pos_embed(cfg.width, self.grid)[None], persistent=False)
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.width)
        self.decoder = nn.Conv2d(cfg.width, 3 * cfg.patch_size**2, 1)
        self.mask_token = MaskToken(cfg.width, cfg.injection_point)
        self.apply(self._init_weights)
        w = self.patch_embed.weight.data
        nn.init.xavier_uniform_(w.view(w.shape[0], -1))
        if cfg.num_classes:
            self.attach_head(cfg.num_classes)

    @staticmethod
    def _init_weights(m):
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    @property
    def num_tokens(self):
        return self.grid * self.grid

    def depth_labels(self):
        return [f"layer{i}" for i in range(self.cfg.depth + 1)]

    def _to_grid(self, tokens):
        b, n, c = tokens.shape
        return tokens.transpose(1, 2).reshape(b, c, self.grid, self.grid)

    def _run(self, x, inject, return_taps):
        z = self.patch_embed(x).flatten(2).transpose(1, 2) + self.pos_embed
        taps = []
        point = self.cfg.injection_point
        for i in range(self.cfg.depth + 1):
            if inject is not None and i == point:
                z = inject_mask_token(z, inject[0], inject[1])
            if return_taps:
                taps.append((f"layer{i}", z))
            if i < self.cfg.depth:
                z = self.blocks[i](z)
        return FeatureMap(self.norm(z), depth="final", taps=taps)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        nn.init.zeros_(self.bn2.weight)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class ResNet(_Backbone):
    family = "cnn"

    def __init__(self, cfg):
        super().__init__(cfg)
        n_stages = len(cfg.stage_widths)
        if len(cfg.stage_blocks) != n_stages:
            raise ConfigError("stage_blocks and stage_widths differ in length", key="model.stage_blocks")
        if not 1 <= cfg.injection_point <= n_stages:
            raise ConfigError(
                f"injection stage {cfg.injection_point} outside 1..{n_stages}", key="model.injection_point")
        # stem halves the input, stages 2.. halve again
        self.stride = 2 ** n_stages
        if cfg.image_size % self.stride:
            raise ConfigError(f"image size must be a multiple of {self.stride}", key="data.image_size")
        self.stem = nn.Sequential(
            nn.Conv2d(3, cfg.stage_widths[0], 3, 2, 1, bias=False),
            nn.BatchNorm2d(cfg.stage_widths[0]),
            nn.ReLU(inplace=True),
        )
        stages = []
        cin = cfg.stage_widths[0]
        for s, (blocks, width) in enumerate(zip(cfg.stage_blocks, cfg.stage_widths)):
            stride = 1 if s == 0 else 2
            layers = [BasicBlock(cin, width, stride)]
            layers += [BasicBlock(width, width, 1) for _ in range(blocks - 1)]
            stages.append(nn.Sequential(*layers))
            cin = width
        self.stages = nn.ModuleList(stages)
        self.final_width = cin
        side = cfg.image_size // 2 // 2 ** (cfg.injection_point - 1)
        self.injection_hw = (side, side)
        self.decoder = nn.Conv2d(cin, 3 * self.stride**2, 1)
        self.mask_token = MaskToken(cfg.stage_widths[cfg.injection_point - 1], cfg.injection_point)
        for m in self.modules():
            if isinstance(m, nn.Conv2d) and m is not self.decoder:
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        if cfg.num_classes:
            self.attach_head(cfg.num_classes)

    def stage_side(self, stage):
        return self.cfg.image_size // 2 // 2 ** (stage - 1)

    def depth_labels(self):
        labels = ["stem"]
        for s, blocks in enumerate(self.cfg.stage_blocks, start=1):
            labels += [f"stage{s}.block{b}" for b in range(blocks)]
        return labels

    def _to_grid(self, fmap):
        return fmap

    def _run(self, x, inject, return_taps):
        z = self.stem(x)
        taps = [("stem", z)] if return_taps else []
        for s, stage in enumerate(self.stages, start=1):
            for b, block in enumerate(stage):
                z = block(z)
                if inject is not None and s == self.cfg.injection_point and b == len(stage) - 1:
                    z = inject_mask_token(z, inject[0], inject[1])
                if return_taps:
                    taps.append((f"stage{s}.block{b}", z))
        return FeatureMap(z, depth="final", taps=taps)


_FAMILIES = {"transformer": VisionTransformer, "cnn": ResNet}


def build_backbone(cfg, seed=0):
    """Instantiate a backbone with parameters drawn from a seed-local RNG."""
    if isinstance(cfg, dict):
        cfg = BackboneConfig(**cfg)
    try:
        cls = _FAMILIES[cfg.family]
    except KeyError:
        raise ConfigError(f"unknown model family {cfg.family!r}", key="model.family") from None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        model = cls(cfg)
    return model
