"""Run (or resume) the desk experiment: pre-training vs random init, with and without the frequency loss.

Stages that already finished with the same settings are reused, so the
script can be interrupted and restarted.  Expect a few hours on one CPU.

    python3 demos/run_desk.py --out desk_runs
"""

import argparse
import json
import logging
from pathlib import Path

import torch

from a2mim.desk import DeskSettings, desk_experiment, stale_stages


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="desk_runs", help="experiment directory")
    ap.add_argument("--threads", type=int, default=1, help="torch CPU threads")
    args = ap.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(args.threads)
    out = Path(args.out)
    settings = DeskSettings(data_root=str(out / "data"))
    results, summary = desk_experiment(settings, out)
    print(json.dumps(summary, indent=2, sort_keys=True))
    stale = stale_stages(results)
    if stale:
        print(f"warning: {len(stale)} stages were produced by different sources")


if __name__ == "__main__":
    main()
