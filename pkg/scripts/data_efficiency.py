"""IRL vs BC-CNN as the number of training images per category grows.

    python scripts/data_efficiency.py --ipc 5 10 20 --seeds 0 1 2
"""
import argparse
import logging

import numpy as np

from scanirl.analysis import StudyConfig, data_efficiency_sweep
from scanirl.dataio import SyntheticSceneConfig, generate_synthetic_corpus, make_splits
from scanirl.nets import ArchConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--ipc", type=int, nargs="+", default=[5, 10, 20])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    arch = ArchConfig((16, 8, 4), (16, 32), 32, "float32")
    ds = generate_synthetic_corpus(SyntheticSceneConfig()).dataset()
    split = make_splits(ds.images_by_task(), 0)
    res = {}
    for seed in args.seeds:
        for method, ipc, rep in data_efficiency_sweep(ds, split, args.ipc, study=StudyConfig(arch=arch, seed=seed)):
            res.setdefault((method, ipc), []).append(rep.tfp_auc)
            print(f"seed {seed}  {method:<7} {ipc:>3} ipc  TFP-AUC {rep.tfp_auc:.3f}", flush=True)
    print("\nmean TFP-AUC")
    for (method, ipc), v in sorted(res.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        print(f"{method:<7} {ipc:>3} ipc  {np.mean(v):.3f} (n={len(v)})")


if __name__ == "__main__":
    main()
