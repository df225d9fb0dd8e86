"""Desk-scale experiment: A2MIM pre-training vs random init, with and without the frequency loss.

Every stage writes its own directory under ``out_root`` and a ``result.json``
when it finishes.  A later call reuses a finished stage when the stored
settings match, so an interrupted experiment resumes where it stopped.  Each
result records a fingerprint of the modules that determine the numbers;
``stale_stages`` lists results produced by different sources.

Layout::

    seed<k>/pretrain_lam<λ>/     checkpoints, metrics.csv, result.json (masked PSNR)
    seed<k>/finetune_lam<λ>/     fine-tune from that checkpoint
    seed<k>/finetune_random/     identical fine-tune from random init
    repeat/seed<k>/...           an independent second run of seed k (λ = first entry)
"""

import hashlib
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .backbones import BackboneConfig, build_backbone
from .checkpoint import model_from_checkpoint
from .data import DatasetSpec, load_image_folder
from .engine import TrainConfig, finetune, pretrain
from .reconstruction import reconstruction_psnr
from .synthetic import make_shapes_dataset

log = logging.getLogger(__name__)

__all__ = ["DeskSettings", "source_fingerprint", "load_desk_data", "pretrain_stage", "finetune_stage",
           "desk_experiment", "stale_stages", "summarize"]


@dataclass
class DeskSettings:
    data_root: str
    n_train_per_class: int = 250
    n_val_per_class: int = 100
    data_seed: int = 0
    pretrain_epochs: int = 30
    finetune_epochs: int = 20
    batch_size: int = 128
    seeds: tuple = (0, 1, 2)
    lambdas: tuple = (0.1, 0.0)
    psnr_seed: int = 1234
    backbone: dict = field(default_factory=lambda: BackboneConfig().to_dict())

    def key(self, *parts):
        blob = json.dumps([asdict(self), parts], sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


NUMERIC_MODULES = ("backbones", "checkpoint", "data", "engine", "masking", "reconstruction", "spectral", "synthetic")


def source_fingerprint():
    """Hash of the modules whose code determines every training number."""
    h = hashlib.sha256()
    for name in NUMERIC_MODULES:
        h.update(name.encode())
        h.update((Path(__file__).parent / f"{name}.py").read_bytes())
    return h.hexdigest()[:16]


def load_desk_data(settings):
    root = make_shapes_dataset(settings.data_root, settings.n_train_per_class, settings.n_val_per_class,
                               seed=settings.data_seed)
    train = load_image_folder(DatasetSpec(str(root), "train"))
    val = load_image_folder(DatasetSpec(str(root), "val", mean=train.spec.mean, std=train.spec.std))
    return train, val


def _cached(out, key):
    path = out / "result.json"
    if path.exists():
        res = json.loads(path.read_text())
        if res.get("key") == key:
            return res
    return None


def _finish(out, key, started, **payload):
    res = {"key": key, "source": source_fingerprint(), "seconds": time.time() - started, **payload}
    (out / "result.json").write_text(json.dumps(res, indent=2, sort_keys=True))
    return res


def _lam_tag(lam):
    return f"lam{lam:g}"


def pretrain_stage(settings, data, seed, lam, out):
    out = Path(out)
    key = settings.key("pretrain", seed, lam)
    done = _cached(out, key)
    if done:
        return done
    started = time.time()
    train, val = data
    torch.manual_seed(seed)
    model = build_backbone(BackboneConfig(**settings.backbone), seed=seed)
    cfg = TrainConfig(epochs=settings.pretrain_epochs, batch_size=settings.batch_size, lambda_freq=lam, seed=seed)
    model, metrics = pretrain(model, train, cfg, out_dir=out)
    psnr_pred, psnr_fill = reconstruction_psnr(model, val, ratio=cfg.mask_ratio, patch_size=cfg.mask_patch_size,
                                               seed=settings.psnr_seed)
    return _finish(out, key, started, seed=seed, lam=lam, psnr_masked=psnr_pred, psnr_filled=psnr_fill,
                   final_total=metrics.epochs[-1]["total"], checkpoint=str(out / "checkpoints" / "final"))


def finetune_stage(settings, data, seed, out, init=None):
    out = Path(out)
    key = settings.key("finetune", seed, None if init is None else Path(init).parent.parent.name)
    done = _cached(out, key)
    if done:
        return done
    started = time.time()
    train, val = data
    torch.manual_seed(seed)
    if init is None:
        model = build_backbone(BackboneConfig(**settings.backbone), seed=seed)
    else:
        model, _ = model_from_checkpoint(init, seed=seed)
    cfg = TrainConfig(phase="finetune", epochs=settings.finetune_epochs, batch_size=settings.batch_size, seed=seed)
    _, hist, _ = finetune(model, train, val, cfg, out_dir=out)
    return _finish(out, key, started, seed=seed, init=None if init is None else str(init), history=hist,
                   final=hist[-1], checkpoint=str(out / "checkpoints" / "final"))


def seed_runs(settings, data, seed, root):
    root = Path(root) / f"seed{seed}"
    res = {"random": finetune_stage(settings, data, seed, root / "finetune_random")}
    for lam in settings.lambdas:
        pre = pretrain_stage(settings, data, seed, lam, root / f"pretrain_{_lam_tag(lam)}")
        ft = finetune_stage(settings, data, seed, root / f"finetune_{_lam_tag(lam)}", init=pre["checkpoint"])
        res[_lam_tag(lam)] = {"pretrain": pre, "finetune": ft}
    return res


def desk_experiment(settings, out_root, repeat_seed=0):
    """Run (or resume) every stage; returns the nested results and writes ``summary.json``."""
    out_root = Path(out_root)
    data = load_desk_data(settings)
    results = {f"seed{s}": seed_runs(settings, data, s, out_root) for s in settings.seeds}
    if repeat_seed is not None:
        rep = out_root / "repeat" / f"seed{repeat_seed}"
        lam = settings.lambdas[0]
        pre = pretrain_stage(settings, data, repeat_seed, lam, rep / f"pretrain_{_lam_tag(lam)}")
        ft = finetune_stage(settings, data, repeat_seed, rep / f"finetune_{_lam_tag(lam)}", init=pre["checkpoint"])
        rand = finetune_stage(settings, data, repeat_seed, rep / "finetune_random")
        results["repeat"] = {"seed": repeat_seed, "pretrain": pre, "finetune": ft, "random": rand}
    summary = summarize(settings, results)
    (out_root / "summary.json").write_text(json.dumps({"results": results, "summary": summary}, indent=2,
                                                      sort_keys=True))
    return results, summary


def stale_stages(results):
    """Stage directories whose recorded fingerprint differs from the current sources."""
    current = source_fingerprint()
    found = []

    def walk(node):
        if isinstance(node, dict):
            if "source" in node and "key" in node and node["source"] != current:
                found.append(node.get("checkpoint"))
            for v in node.values():
                walk(v)

    walk(results)
    return found


def summarize(settings, results):
    main, ablate = _lam_tag(settings.lambdas[0]), _lam_tag(settings.lambdas[-1])
    rows = [results[f"seed{s}"] for s in settings.seeds]
    med = statistics.median
    return {
        "random_final": med(r["random"]["final"] for r in rows),
        "pretrained_final": med(r[main]["finetune"]["final"] for r in rows),
        "gap_points": 100 * med(r[main]["finetune"]["final"] - r["random"]["final"] for r in rows),
        "ablation_final": med(r[ablate]["finetune"]["final"] for r in rows),
        "psnr_main": med(r[main]["pretrain"]["psnr_masked"] for r in rows),
        "psnr_ablation": med(r[ablate]["pretrain"]["psnr_masked"] for r in rows),
        "main_hours": sum(r["random"]["seconds"] + r[main]["pretrain"]["seconds"] + r[main]["finetune"]["seconds"]
                          for r in rows) / 3600,
    }
