"""Probe the desk-experiment models: occlusion curves, interaction strength and feature spectra.

Compares the fine-tuned model from random init with the one fine-tuned
from the A2MIM checkpoint (same seed), and profiles the pre-trained
encoders with and without the frequency loss.  Needs a finished
``demos/run_desk.py`` directory.

    python3 demos/probe_desk_models.py --desk desk_runs --out desk_runs/probes
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from a2mim.checkpoint import model_from_checkpoint
from a2mim.data import DatasetSpec, load_image_folder, normalize_images
from a2mim.probes import interaction_strength_distribution, occlusion_curve, spectrum_and_variance_profile
from a2mim.probes.report import write_csv

RATIOS = tuple(round(0.1 * k, 1) for k in range(10))


def load(path):
    model, ckpt = model_from_checkpoint(Path(path) / "checkpoints" / "final")
    return model.eval(), ckpt


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--desk", default="desk_runs")
    ap.add_argument("--out", default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--images", type=int, default=8, help="images for the interaction probe")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    desk = Path(args.desk)
    out = Path(args.out or desk / "probes")
    out.mkdir(parents=True, exist_ok=True)
    runs = desk / f"seed{args.seed}"
    finetuned = {"random": runs / "finetune_random", "a2mim": runs / "finetune_lam0.1"}
    pretrained = {"lam0.1": runs / "pretrain_lam0.1", "lam0": runs / "pretrain_lam0"}

    _, ckpt = load(finetuned["a2mim"])
    stats = ckpt.manifest["config"]["data"]
    val = load_image_folder(DatasetSpec(str(desk / "data"), "val", mean=stats["mean"], std=stats["std"]))

    summary = {}
    occ_rows, j_rows = [], []
    for name, path in finetuned.items():
        model, _ = load(path)
        for mode in ("random", "salient"):
            rep = occlusion_curve(model, val, RATIOS, mode=mode, patch_size=4, seed=args.seed)
            occ_rows += [(name, mode, r, t) for r, t in zip(rep.ratios, rep.top1)]
        rep = interaction_strength_distribution(model, val, n_images=args.images, seed=args.seed)
        j_rows += [(name, f, o, j) for f, o, j in zip(rep.fractions, rep.orders, rep.J)]
        low = [j for f, j in zip(rep.fractions, rep.J) if f <= 0.05]
        middle = [j for f, j in zip(rep.fractions, rep.J) if 0.05 < f <= 0.5]
        summary[name] = {"J_low": sum(low) / len(low), "J_middle": sum(middle) / len(middle)}
    write_csv(out / "occlusion.csv", ["model", "mode", "ratio", "top1"], occ_rows)
    write_csv(out / "interactions.csv", ["model", "fraction", "order", "J"], j_rows)

    pixels = normalize_images(val.raw(np.arange(min(64, len(val)))), val.spec.mean, val.spec.std)
    spec_rows = []
    for name, path in pretrained.items():
        model, _ = load(path)
        prof = spectrum_and_variance_profile(model, pixels)
        spec_rows += [(name, label, d, v) for label, d, v in zip(prof.labels, prof.delta_log_amp, prof.variance)]
    write_csv(out / "spectrum.csv", ["model", "depth", "delta_log_amp", "variance"], spec_rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
