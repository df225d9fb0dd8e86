"""Command-line entry point: ``a2mim <command> [--config FILE] [--set section.key=value ...]``.

Exit status is 0 on success, 2 for configuration errors (the message names
the key) and 1 for runtime failures.  A run directory that did not complete
contains a ``FAILED`` file with the diagnostic.
"""

import argparse
import csv
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np
import torch
from safetensors.torch import save_file

from .backbones import BackboneConfig, build_backbone
from .checkpoint import model_from_checkpoint
from .config import dump_config, load_config
from .data import DatasetSpec, load_image_folder, normalize_images
from .engine import TrainConfig, finetune, linear_probe, pretrain
from .errors import ConfigError
from .probes import interaction_strength_distribution, occlusion_curve, spectrum_and_variance_profile
from .probes.report import write_csv, write_json
from .reconstruction import render_reconstruction_grid
from .synthetic import make_shapes_dataset

log = logging.getLogger("a2mim")

COMMANDS = ("pretrain", "finetune", "linear-probe", "occlusion", "interactions", "spectrum", "reconstruct")
EFFECTIVE_CONFIG = "config.cfg"


# ---- config -> objects ------------------------------------------------------

def dataset_spec(cfg, split, stats=None):
    d = cfg["data"]
    mean, std = (stats if stats else (d["mean"], d["std"]))
    return DatasetSpec(root=d["root"], split=split, num_classes=d["num_classes"], image_size=d["image_size"],
                       mean=mean, std=std, crop_scale=d["crop_scale"], hflip=d["hflip"], seed=cfg["train"]["seed"])


def load_splits(cfg, need_train=True, need_eval=True, stats=None):
    """Training split (statistics source) and evaluation split normalised with the same statistics.

    ``stats`` (mean, std) from a checkpoint spares loading the training split
    when only the evaluation split is needed.
    """
    d = cfg["data"]
    if d["synthetic_per_class"] > 0:
        make_shapes_dataset(d["root"], d["synthetic_per_class"], d["synthetic_eval_per_class"],
                            size=d["image_size"], seed=cfg["train"]["seed"])
    if d["mean"] is not None and d["std"] is not None:
        stats = (d["mean"], d["std"])
    train = None
    if need_train or stats is None:
        train = load_image_folder(dataset_spec(cfg, d["train_split"], stats))
        stats = (train.spec.mean, train.spec.std)
    val = load_image_folder(dataset_spec(cfg, d["eval_split"], stats)) if need_eval else None
    return train, val


def backbone_config(cfg):
    m = cfg["model"]
    return BackboneConfig(family=m["family"], image_size=cfg["data"]["image_size"], depth=m["depth"],
                          width=m["width"], heads=m["heads"], patch_size=m["patch_size"], mlp_ratio=m["mlp_ratio"],
                          stage_blocks=m["stage_blocks"], stage_widths=m["stage_widths"],
                          injection_point=m["injection_point"], num_classes=cfg["data"]["num_classes"])


def train_config(cfg, phase):
    t, k = cfg["train"], cfg["mask"]
    return TrainConfig(phase=phase, epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
                       weight_decay=t["weight_decay"], warmup_epochs=t["warmup_epochs"], schedule=t["schedule"],
                       milestone_epoch=t["milestone_epoch"], mask_ratio=k["ratio"], mask_patch_size=k["patch_size"],
                       lambda_freq=t["lambda_freq"], normalize_omega=t["normalize_omega"], fill=k["fill"],
                       clip_grad=t["clip_grad"], augment=t["augment"], checkpoint_every=t["checkpoint_every"],
                       num_workers=t["num_workers"], seed=t["seed"])


def model_for(cfg, require_checkpoint=False, require_head=False):
    """Backbone from ``model.checkpoint`` when set, else freshly initialised; plus provenance."""
    path = cfg["model"]["checkpoint"]
    if path is None:
        if require_checkpoint:
            raise ConfigError("this command needs a trained model", key="model.checkpoint")
        return build_backbone(backbone_config(cfg), seed=cfg["train"]["seed"]), {"checkpoint": None, "stats": None}
    if not Path(path).is_dir():
        raise ConfigError(f"checkpoint {path} does not exist", key="model.checkpoint")
    model, ckpt = model_from_checkpoint(path, seed=cfg["train"]["seed"])
    if require_head and model.head is None:
        raise ConfigError(f"checkpoint {path} has no classification head; fine-tune it first",
                          key="model.checkpoint")
    data = ckpt.manifest.get("config", {}).get("data", {})
    stats = (tuple(data["mean"]), tuple(data["std"])) if data.get("mean") and data.get("std") else None
    return model, {"checkpoint": str(path), "checkpoint_sha256": ckpt.manifest["tensor_sha256"],
                   "checkpoint_kind": ckpt.manifest["kind"], "stats": stats}


def validate(cfg, command):
    """Checks that need no data or compute."""
    backbone_config(cfg)
    train_config(cfg, "finetune" if command != "pretrain" else "pretrain")
    if cfg["data"]["image_size"] % cfg["mask"]["patch_size"]:
        raise ConfigError("image size must be a multiple of the mask patch size", key="mask.patch_size")
    p = cfg["probe"]
    for key in ("grid", "images", "pairs", "contexts", "batch_size", "patch_size"):
        if p[key] < 1:
            raise ConfigError(f"probe.{key} must be >= 1", key=f"probe.{key}")
    if cfg["data"]["image_size"] % p["grid"]:
        raise ConfigError("image size must be divisible by the interaction grid", key="probe.grid")
    if cfg["model"]["checkpoint"] is None and command in ("occlusion", "interactions", "spectrum", "reconstruct"):
        raise ConfigError(f"{command} needs a trained model", key="model.checkpoint")


# ---- commands --------------------------------------------------------------

def cmd_pretrain(cfg, out):
    train, _ = load_splits(cfg, need_eval=False)
    model, prov = model_for(cfg)
    prov.pop("stats")
    tc = train_config(cfg, "pretrain")
    pretrain(model, train, tc, out_dir=out, resume=cfg["train"]["resume"], run_config={"provenance": prov})
    return {"checkpoint": str(out / "checkpoints" / "final")}


def cmd_finetune(cfg, out):
    train, val = load_splits(cfg)
    model, prov = model_for(cfg)
    prov.pop("stats")
    _, hist, _ = finetune(model, train, val, train_config(cfg, "finetune"), out_dir=out,
                          run_config={"provenance": prov})
    write_csv(out / "accuracy.csv", ["epoch", "top1"], [(e - 1, a) for e, a in enumerate(hist)])
    return {"final_top1": hist[-1], "checkpoint": str(out / "checkpoints" / "final")}


def cmd_linear_probe(cfg, out):
    train, val = load_splits(cfg)
    model, prov = model_for(cfg)
    prov.pop("stats")
    acc, head = linear_probe(model, train, val, train_config(cfg, "linear_probe"))
    save_file({k: v.contiguous() for k, v in head.state_dict().items()}, out / "linear_head.safetensors")
    write_csv(out / "linear_probe.csv", ["top1"], [(acc,)])
    write_json(out / "linear_probe.json", {"top1": acc, **prov})
    return {"top1": acc}


def cmd_occlusion(cfg, out):
    model, prov = model_for(cfg, require_checkpoint=True, require_head=True)
    _, val = load_splits(cfg, need_train=False, stats=prov.pop("stats"))
    p = cfg["probe"]
    rep = occlusion_curve(model, val, p["ratios"], mode=p["mode"], patch_size=p["patch_size"], seed=p["seed"],
                          batch_size=p["batch_size"])
    rep.provenance = prov
    rep.write(out)
    return {"top1": rep.top1}


def cmd_interactions(cfg, out):
    model, prov = model_for(cfg, require_checkpoint=True, require_head=True)
    _, val = load_splits(cfg, need_train=False, stats=prov.pop("stats"))
    p = cfg["probe"]
    rep = interaction_strength_distribution(model, val, n_images=p["images"], grid=p["grid"],
                                            fractions=p["fractions"], pairs_per_image=p["pairs"],
                                            contexts_per_pair=p["contexts"], seed=p["seed"])
    rep.provenance = prov
    rep.write(out)
    return {"mean_J": float(np.mean(rep.J))}


def _eval_pixels(cfg, val, n):
    idx = np.sort(np.random.default_rng(cfg["probe"]["seed"]).choice(len(val), size=min(n, len(val)),
                                                                     replace=False))
    return normalize_images(val.raw(idx), val.spec.mean, val.spec.std)


def cmd_spectrum(cfg, out):
    model, prov = model_for(cfg, require_checkpoint=True)
    _, val = load_splits(cfg, need_train=False, stats=prov.pop("stats"))
    prof = spectrum_and_variance_profile(model, _eval_pixels(cfg, val, cfg["probe"]["batch_size"]))
    prof.provenance = prov
    prof.write(out)
    return {"depths": len(prof.labels)}


def cmd_reconstruct(cfg, out):
    model, prov = model_for(cfg, require_checkpoint=True)
    _, val = load_splits(cfg, need_train=False, stats=prov.pop("stats"))
    pixels = _eval_pixels(cfg, val, cfg["probe"]["images"])
    grid = render_reconstruction_grid(model, pixels, val.spec.mean, val.spec.std, ratio=cfg["mask"]["ratio"],
                                      patch_size=cfg["mask"]["patch_size"], seed=cfg["probe"]["seed"],
                                      fill=cfg["mask"]["fill"])
    grid.save(out / "reconstruction.png")
    write_csv(out / "reconstruction.csv", ["psnr_prediction", "psnr_filled"],
              [(grid.psnr_prediction, grid.psnr_filled)])
    write_json(out / "reconstruction.json", {"psnr_prediction": grid.psnr_prediction,
                                             "psnr_filled": grid.psnr_filled, **prov})
    return {"psnr_prediction": grid.psnr_prediction, "psnr_filled": grid.psnr_filled}


HANDLERS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "linear-probe": cmd_linear_probe,
    "occlusion": cmd_occlusion,
    "interactions": cmd_interactions,
    "spectrum": cmd_spectrum,
    "reconstruct": cmd_reconstruct,
}


# ---- plotting ----------------------------------------------------------------

PLOTS = {
    "pretrain": ("metrics.csv", "step", ["l_spa", "total"]),
    "finetune": ("accuracy.csv", "epoch", ["top1"]),
    "occlusion": ("occlusion.csv", "ratio", ["top1"]),
    "interactions": ("interactions.csv", "fraction", ["J"]),
    "spectrum": ("spectrum.csv", "depth", ["delta_log_amp", "variance"]),
}


def plot_outputs(command, out):
    """Render the command's CSV as a PNG line chart; needs matplotlib."""
    if command not in PLOTS:
        return None
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib is not installed; skipping --plot")
        return None

    name, xkey, ykeys = PLOTS[command]
    with open(out / name) as fh:
        rows = list(csv.DictReader(fh))
    fig, axes = plt.subplots(1, len(ykeys), figsize=(4 * len(ykeys), 3), squeeze=False)
    x = [r[xkey] for r in rows]
    numeric_x = xkey != "depth"
    for ax, key in zip(axes[0], ykeys):
        ys = [float(r[key]) if r[key] else np.nan for r in rows]
        ax.plot([float(v) for v in x] if numeric_x else range(len(x)), ys, marker="o", ms=3)
        if not numeric_x:
            ax.set_xticks(range(len(x)), x, rotation=60, fontsize=6)
        ax.set_xlabel(xkey)
        ax.set_ylabel(key)
    fig.tight_layout()
    path = out / name.replace(".csv", ".png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ---- dispatch ----------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="a2mim", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="INI config file with [data] [mask] [model] [train] [probe] sections")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--out", help="output directory (default: $A2MIM_OUT/<command> or runs/<command>)")
    parser.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")
    parser.add_argument("--plot", action="store_true", help="also render PNG plots of the CSV outputs")
    parser.add_argument("-q", "--quiet", action="store_true")
    return parser


def default_out(command):
    return Path(os.environ.get("A2MIM_OUT", "runs")) / command


def dispatch(command, config=None, overrides=(), out=None, seed=None, plot=False):
    """Run one command; returns the process exit status."""
    out_dir = None
    try:
        overrides = list(overrides) + ([f"train.seed={seed}"] if seed is not None else [])
        cfg = load_config(config, overrides)
        validate(cfg, command)
        torch.manual_seed(cfg["train"]["seed"])
        out_dir = Path(out) if out else default_out(command)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "FAILED").unlink(missing_ok=True)
        dump_config(cfg, out_dir / EFFECTIVE_CONFIG)
        summary = HANDLERS[command](cfg, out_dir)
        if plot:
            plot_outputs(command, out_dir)
        write_json(out_dir / "summary.json", {"command": command, **summary})
        print(json.dumps({"command": command, "out": str(out_dir), **summary}, default=str))
        return 0
    except ConfigError as exc:
        key = f" [{exc.key}]" if exc.key else ""
        print(f"config error{key}: {exc}", file=sys.stderr)
        _mark_failed(out_dir, f"config error{key}: {exc}\n")
        return 2
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        _mark_failed(out_dir, traceback.format_exc())
        return 1


def _mark_failed(out_dir, text):
    if out_dir is not None and out_dir.is_dir():
        (out_dir / "FAILED").write_text(text, encoding="utf-8")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    return dispatch(args.command, args.config, args.overrides, args.out, args.seed, args.plot)


if __name__ == "__main__":
    sys.exit(main())
