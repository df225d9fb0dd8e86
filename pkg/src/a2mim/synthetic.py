"""Procedural shape-classification image folders for desk-scale runs.

Ten classes of filled or outlined geometric shapes, drawn at a random scale,
position, small rotation and color over a textured background with small
distractor blobs.  Color statistics carry no label information; only the
shape does, so classification requires combining several patches.
"""

import math
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

__all__ = ["SHAPE_CLASSES", "render_shape_image", "make_shapes_dataset"]

SHAPE_CLASSES = (
    "cross", "diamond", "disc", "hexagon", "lshape",
    "plus", "ring", "square", "tshape", "triangle",
)

_SS = 4  # supersampling factor for anti-aliased edges


def _polygon(name):
    """Unit-scale outline centred on the origin, or None for round shapes."""
    if name == "square":
        return [(-1, -1), (1, -1), (1, 1), (-1, 1)]
    if name == "diamond":
        return [(0, -1.15), (0.75, 0), (0, 1.15), (-0.75, 0)]
    if name == "triangle":
        return [(0, -1.1), (1.05, 0.85), (-1.05, 0.85)]
    if name == "hexagon":
        return [(math.cos(a), math.sin(a)) for a in np.linspace(0, 2 * math.pi, 7)[:-1]]
    if name == "plus":
        t = 0.35
        return [(-t, -1), (t, -1), (t, -t), (1, -t), (1, t), (t, t), (t, 1), (-t, 1),
                (-t, t), (-1, t), (-1, -t), (-t, -t)]
    if name == "cross":
        return [(x * c - y * s, x * s + y * c) for x, y in _polygon("plus")
                for c, s in [(math.cos(math.pi / 4), math.sin(math.pi / 4))]]
    if name == "lshape":
        return [(-0.9, -1), (-0.2, -1), (-0.2, 0.35), (0.9, 0.35), (0.9, 1), (-0.9, 1)]
    if name == "tshape":
        return [(-1, -1), (1, -1), (1, -0.35), (0.33, -0.35), (0.33, 1), (-0.33, 1), (-0.33, -0.35), (-1, -0.35)]
    return None


def _random_color(rng):
    return rng.uniform(0, 1, size=3)


def _contrasting(rng, bg, min_dist=0.45):
    for _ in range(50):
        c = _random_color(rng)
        if np.abs(c - bg).sum() / 3 > min_dist / 2 and np.linalg.norm(c - bg) > min_dist:
            return c
    return 1.0 - bg


def render_shape_image(name, rng, size=32):
    """Return a uint8 ``(size, size, 3)`` image of shape class ``name``."""
    big = size * _SS
    bg = _random_color(rng)
    # low-frequency background gradient plus pixel noise
    yy, xx = np.mgrid[0:size, 0:size] / size
    angle = rng.uniform(0, 2 * math.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy)[..., None] * rng.uniform(-0.25, 0.25, size=3)
    base = np.clip(bg + ramp + rng.normal(0, 0.04, size=(size, size, 3)), 0, 1)
    canvas = Image.fromarray((base * 255).astype(np.uint8)).resize((big, big), Image.NEAREST)
    draw = ImageDraw.Draw(canvas)

    fg = _contrasting(rng, bg)
    fill = tuple(int(v * 255) for v in fg)
    scale = rng.uniform(0.26, 0.40) * big
    cx = rng.uniform(scale * 1.05, big - scale * 1.05)
    cy = rng.uniform(scale * 1.05, big - scale * 1.05)
    rot = math.radians(rng.uniform(-20, 20))
    c, s = math.cos(rot), math.sin(rot)

    for _ in range(int(rng.integers(1, 4))):
        r = rng.uniform(0.03, 0.06) * big
        px, py = rng.uniform(0, big, size=2)
        col = tuple(int(v * 255) for v in _random_color(rng))
        draw.ellipse([px - r, py - r, px + r, py + r], fill=col)

    poly = _polygon(name)
    if poly is not None:
        pts = [(cx + scale * (x * c - y * s), cy + scale * (x * s + y * c)) for x, y in poly]
        draw.polygon(pts, fill=fill)
    elif name == "disc":
        draw.ellipse([cx - scale, cy - scale, cx + scale, cy + scale], fill=fill)
    elif name == "ring":
        draw.ellipse([cx - scale, cy - scale, cx + scale, cy + scale], outline=fill,
                     width=max(1, int(scale * rng.uniform(0.28, 0.4))))
    else:
        raise ValueError(f"unknown shape {name!r}")

    img = canvas.filter(ImageFilter.BoxBlur(1)).resize((size, size), Image.BOX)
    return np.asarray(img, dtype=np.uint8)


def make_shapes_dataset(root, n_train_per_class=250, n_val_per_class=100, size=32, seed=0,
                        classes=SHAPE_CLASSES):
    """Write ``root/{train,val}/<class>/NNNNN.png`` and return ``root``.

    Existing complete folders are left untouched.
    """
    root = Path(root)
    marker = root / f".complete-{n_train_per_class}-{n_val_per_class}-{size}-{seed}"
    if marker.exists():
        return root
    for split, count, offset in (("train", n_train_per_class, 0), ("val", n_val_per_class, 1)):
        for k, name in enumerate(classes):
            d = root / split / name
            d.mkdir(parents=True, exist_ok=True)
            rng = np.random.default_rng([seed, offset, k])
            for i in range(count):
                Image.fromarray(render_shape_image(name, rng, size)).save(d / f"{i:05d}.png")
    marker.touch()
    return root
