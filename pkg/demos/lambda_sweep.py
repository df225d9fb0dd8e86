"""Pre-train and fine-tune at several frequency-loss weights, reusing the desk-experiment stages.

Each (seed, lambda) pair gets its own pretrain and fine-tune directory under
``--out``; finished pairs are reused.  Useful to see how the weight of the
frequency term against the L1 term changes fine-tuning accuracy.

    python3 demos/lambda_sweep.py --lambdas 0.001 0.01 --seeds 0 --out desk_runs/sweep
"""

import argparse
import json
import logging
from pathlib import Path

import torch

from a2mim.desk import DeskSettings, finetune_stage, load_desk_data, pretrain_stage


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.001, 0.01])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--data", default="desk_runs/data", help="shapes dataset root (generated when missing)")
    ap.add_argument("--out", default="desk_runs/sweep")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)

    settings = DeskSettings(data_root=args.data)
    data = load_desk_data(settings)
    out = Path(args.out)
    rows = []
    for seed in args.seeds:
        for lam in args.lambdas:
            tag = f"seed{seed}_lam{lam:g}"
            pre = pretrain_stage(settings, data, seed, lam, out / tag / "pretrain")
            ft = finetune_stage(settings, data, seed, out / tag / "finetune", init=pre["checkpoint"])
            rows.append({"seed": seed, "lambda": lam, "psnr_masked": pre["psnr_masked"], "top1": ft["final"]})
            print(json.dumps(rows[-1]))
    (out / "sweep.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
