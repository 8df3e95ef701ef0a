"""Run every ablation preset on one seed and print a comparison table.

Stage 0 is shared by all presets; Stage 1 is shared by every preset that keeps
the default content encoder (``no-multiscale`` trains its own).
"""

import argparse
import logging
from pathlib import Path

import torch

from direid.cli import format_report
from direid.config import load_config
from direid.experiment import PRESETS, ensure_dataset, run_preset

ORDER = ("no-dil", "full", "no-multiscale", "no-attention", "finv-only", "fsen-only")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--presets", nargs="+", default=list(ORDER), choices=sorted(PRESETS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    cfg = load_config(args.config, args.set)
    ensure_dataset(cfg)
    out = Path(args.out)
    stage0, shared_stage1, files = None, None, []
    for name in args.presets:
        own_encoder = PRESETS[name].encoder_scales is not None
        res = run_preset(cfg, name, out / name, stage0, None if own_encoder else shared_stage1)
        stage0 = stage0 or res["stage0"]
        if not own_encoder and res["stage1"] is not None:
            shared_stage1 = shared_stage1 or res["stage1"]
        files.append(out / name / f"metrics_{name}_{PRESETS[name].variant}.json")
    print(format_report([str(f) for f in files]))


if __name__ == "__main__":
    main()
