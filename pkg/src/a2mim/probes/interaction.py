"""Multi-order interactions between pairs of image patches.

A set function ``f`` is evaluated on boolean "kept" vectors over ``n``
players (patches); absent patches are replaced by a baseline.  For a pair
``(i, j)`` and context ``S`` of size ``m`` drawn from the other ``n - 2``
players::

    delta = f(S + {i, j}) - f(S + {i}) - f(S + {j}) + f(S)

The order-``m`` interaction is the mean of ``delta`` over contexts.  Set
functions here are vectorised: they take a ``(K, n)`` bool array and return
``K`` values.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ..data import normalize_images
from ..errors import ConfigError, GeometryError, NumericError
from ..masking import round_half_up
from .report import write_csv, write_json

__all__ = [
    "DEFAULT_ORDER_FRACTIONS", "ENUMERATION_LIMIT", "InteractionEstimate", "InteractionReport",
    "masked_model_output_f", "model_set_function", "multiorder_interaction",
    "interaction_strength", "interaction_strength_distribution",
]

DEFAULT_ORDER_FRACTIONS = tuple(round(0.05 * k, 2) for k in range(20))
ENUMERATION_LIMIT = 5000
P_CLAMP = 1e-6


@dataclass
class InteractionEstimate:
    value: float
    std_err: float
    n_contexts: int
    exact: bool


@dataclass
class InteractionReport:
    n_players: int
    fractions: list
    orders: list
    mean_abs_I: list
    J: list
    J_area: list
    n_images: int
    pairs_per_image: int
    contexts_per_pair: int
    baseline: list
    seed: int
    provenance: dict = field(default_factory=dict)

    def rows(self):
        return list(zip(self.fractions, self.orders, self.mean_abs_I, self.J, self.J_area))

    def write(self, out_dir, stem="interactions"):
        write_csv(f"{out_dir}/{stem}.csv", ["fraction", "order", "mean_abs_I", "J", "J_area"], self.rows())
        write_json(f"{out_dir}/{stem}.json", asdict(self))


def _logit_of_true_class(logits, label):
    p = torch.softmax(logits.double(), dim=-1)[..., label].clamp(P_CLAMP, 1 - P_CLAMP)
    return torch.log(p / (1 - p))


def _compose(image, kept, baseline, grid):
    """Images with dropped patches replaced by ``baseline``; ``kept`` is ``(K, n)``."""
    c, h, w = image.shape
    if h % grid or w % grid:
        raise GeometryError(f"image {h}x{w} is not divisible into a {grid}x{grid} grid")
    ph, pw = h // grid, w // grid
    k = torch.as_tensor(np.asarray(kept), dtype=torch.bool).view(-1, grid, grid)
    px = k.repeat_interleave(ph, dim=1).repeat_interleave(pw, dim=2).unsqueeze(1)
    base = torch.as_tensor(baseline, dtype=image.dtype)
    if base.dim() == 1:
        base = base.view(c, 1, 1)
    return torch.where(px, image.unsqueeze(0), base.expand(c, h, w).unsqueeze(0))


@torch.no_grad()
def masked_model_output_f(model, image, label, kept, baseline=0.0, grid=8, chunk=512):
    """log(p / (1 - p)) of the true class with only the ``kept`` patches visible.

    ``kept`` is a bool vector of ``grid * grid`` entries, or ``(K, n)`` for a batch.
    """
    label = int(label)
    if label < 0 or (model.head is not None and label >= model.head.out_features):
        raise ConfigError(f"label {label} is not a class of this model", key="data.num_classes")
    kept = np.asarray(kept, dtype=bool)
    single = kept.ndim == 1
    kept = kept.reshape(-1, grid * grid)
    was_training = model.training
    model.eval()
    out = []
    for s in range(0, len(kept), chunk):
        x = _compose(image, kept[s:s + chunk], baseline, grid)
        out.append(_logit_of_true_class(model.classify(x), label))
    model.train(was_training)
    vals = torch.cat(out).numpy()
    if not np.isfinite(vals).all():
        raise NumericError("non-finite model output while scoring masked inputs")
    return float(vals[0]) if single else vals


def model_set_function(model, image, label, baseline=0.0, grid=8, chunk=512):
    """Bind a model and image into a vectorised set function."""
    def f(kept):
        return masked_model_output_f(model, image, label, kept, baseline, grid, chunk)
    return f


def _contexts(n, i, j, m, samples, rng, method):
    rest = np.array([k for k in range(n) if k not in (i, j)])
    total = math.comb(len(rest), m)
    exact = method == "enumerate" or (method == "auto" and total <= ENUMERATION_LIMIT)
    if exact:
        if total > 50 * ENUMERATION_LIMIT:
            raise ConfigError(f"refusing to enumerate {total} contexts", key="probe.samples")
        from itertools import combinations
        ctx = np.zeros((total, n), dtype=bool)
        for r, combo in enumerate(combinations(rest, m)):
            ctx[r, list(combo)] = True
        return ctx, True
    if samples < 1:
        raise ConfigError("sampling needs at least one context", key="probe.samples")
    keys = rng.random((samples, len(rest)))
    chosen = rest[np.argsort(keys, axis=1)[:, :m]]
    ctx = np.zeros((samples, n), dtype=bool)
    np.put_along_axis(ctx, chosen, True, axis=1)
    return ctx, False


def _four_masks(ctx, i, j):
    with_ij, with_i, with_j = ctx.copy(), ctx.copy(), ctx.copy()
    with_ij[:, [i, j]] = True
    with_i[:, i] = True
    with_j[:, j] = True
    return np.concatenate([with_ij, with_i, with_j, ctx])


def _combine(vals, k):
    return vals[:k] - vals[k:2 * k] - vals[2 * k:3 * k] + vals[3 * k:4 * k]


def _deltas(f, ctx, i, j):
    vals = np.asarray(f(_four_masks(ctx, i, j)), dtype=np.float64)
    return _combine(vals, len(ctx))


def multiorder_interaction(f, n, i, j, m, samples=100, seed=0, method="auto"):
    """Estimate the order-``m`` interaction of players ``i`` and ``j``.

    ``method`` is ``"auto"`` (enumerate when at most ``ENUMERATION_LIMIT``
    contexts exist), ``"enumerate"`` or ``"sample"``.  The standard error is
    zero for exact enumeration.
    """
    if not (0 <= i < n and 0 <= j < n) or i == j:
        raise ConfigError(f"invalid player pair ({i}, {j}) for n={n}", key="probe.pair")
    if not 0 <= m <= n - 2:
        raise ConfigError(f"order m={m} outside [0, {n - 2}]", key="probe.orders")
    if method not in ("auto", "enumerate", "sample"):
        raise ConfigError(f"unknown method {method!r}", key="probe.method")
    rng = np.random.default_rng(seed)
    ctx, exact = _contexts(n, i, j, m, samples, rng, method)
    d = _deltas(f, ctx, i, j)
    err = 0.0 if exact or len(d) < 2 else float(d.std(ddof=1) / math.sqrt(len(d)))
    return InteractionEstimate(float(d.mean()), err, len(d), exact)


def _orders(n, fractions):
    return [round_half_up(r * (n - 2)) for r in fractions]


def interaction_strength(mean_abs):
    """Normalise per-order mean |I| by its mean over orders (so the result averages to 1)."""
    mean_abs = np.asarray(mean_abs, dtype=np.float64)
    denom = mean_abs.mean()
    if not denom > 0:
        raise NumericError("all interactions are zero; strength is undefined")
    return mean_abs / denom


def _pair_batch(n, fractions, pairs, contexts, rng):
    """Random pairs and contexts for every order; ``cells`` maps each block to its order."""
    orders = _orders(n, fractions)
    blocks, cells = [], []
    for o, m in enumerate(orders):
        for _ in range(pairs):
            i, j = (int(v) for v in rng.choice(n, size=2, replace=False))
            ctx, _ = _contexts(n, i, j, m, contexts, rng, "sample")
            blocks.append((ctx, i, j))
            cells.append(o)
    return orders, blocks, cells


def _evaluate_blocks(f, blocks):
    """Mean delta for every block, with all set-function calls in one batch."""
    vals = np.asarray(f(np.concatenate([_four_masks(*blk) for blk in blocks])), dtype=np.float64)
    out, pos = [], 0
    for ctx, _, _ in blocks:
        k = len(ctx)
        out.append(_combine(vals[pos:pos + 4 * k], k).mean())
        pos += 4 * k
    return np.array(out)


def interaction_strength_distribution(model, dataset, n_images=8, grid=8, fractions=DEFAULT_ORDER_FRACTIONS,
                                      pairs_per_image=4, contexts_per_pair=16, seed=0, baseline=0.0,
                                      set_function=None):
    """Relative interaction strength ``J`` across orders, averaged over images and pairs.

    Images are drawn from ``dataset`` with ``seed``.  The baseline is the
    value dropped patches take in normalised pixel space (0 is the dataset
    mean).  ``set_function(image, label)`` can override the model scorer.
    """
    if n_images < 1 or pairs_per_image < 1 or contexts_per_pair < 1:
        raise ConfigError("interaction sampling sizes must be positive", key="probe.samples")
    if len(dataset) == 0:
        raise ConfigError("empty evaluation split", key="data.root")
    n = grid * grid
    if not fractions or any(not 0 <= r <= 1 for r in fractions):
        raise ConfigError("order fractions must be a non-empty list in [0, 1]", key="probe.orders")
    orders = _orders(n, fractions)
    picks = np.sort(np.random.default_rng(seed).choice(len(dataset), size=min(n_images, len(dataset)),
                                                        replace=False))
    batch_pixels, labels = _normalised(dataset, picks)
    per_order = [[] for _ in fractions]
    for idx, x, y in zip(picks, batch_pixels, labels):
        f = set_function(x, int(y)) if set_function else model_set_function(model, x, int(y), baseline, grid)
        # per-image stream keeps results independent of processing order
        rng = np.random.default_rng([seed, int(idx)])
        _, blocks, cells = _pair_batch(n, fractions, pairs_per_image, contexts_per_pair, rng)
        for o, val in zip(cells, _evaluate_blocks(f, blocks)):
            per_order[o].append(abs(val))
    mean_abs = [float(np.mean(v)) for v in per_order]
    strength = interaction_strength(mean_abs)
    return InteractionReport(
        n_players=n, fractions=[float(r) for r in fractions], orders=orders, mean_abs_I=mean_abs,
        J=strength.tolist(), J_area=(strength / len(strength)).tolist(),
        n_images=len(picks), pairs_per_image=pairs_per_image, contexts_per_pair=contexts_per_pair,
        baseline=np.broadcast_to(np.asarray(baseline, dtype=float), (3,)).tolist(), seed=seed)


def _normalised(dataset, indices):
    raw = dataset.raw(indices)
    pixels = normalize_images(raw, dataset.spec.mean, dataset.spec.std)
    return pixels, dataset.labels[indices]
