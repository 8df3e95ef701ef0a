"""Train the desk-scale runs behind acceptance criteria 5-7 (3 seeds x {full, no-dil}).

Finished seeds are cached under ``--root`` keyed by their config digest, so the
acceptance suite (``pytest -m acceptance``) only re-evaluates checkpoints. Run it
ahead of time on a quiet machine: roughly 1 h per seed on one CPU core.
"""

import argparse
import json
import logging
import time

import torch

from direid.config import load_config
from direid.experiment import ensure_dataset, evaluate_desk_seed, train_desk_seed

ACCEPT_SEEDS = (0, 1, 2)


def desk_config(root, seed, extra=()):
    return load_config(overrides=[f"data.root={root}/data", f"seed={seed}",
                                  "train.ddgan.log_every=50", "train.dfen.log_every=50",
                                  "train.pretrain_id.log_every=50", *extra])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default="runs/acceptance")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(ACCEPT_SEEDS))
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    for seed in args.seeds:
        cfg = desk_config(args.root, seed, args.set)
        ensure_dataset(cfg)
        t = time.time()
        record = train_desk_seed(cfg, f"{args.root}/seed{seed}")
        stats = evaluate_desk_seed(cfg, record)
        print(json.dumps({"seed": seed, "minutes": round((time.time() - t) / 60, 1), **stats}),
              flush=True)


if __name__ == "__main__":
    main()
