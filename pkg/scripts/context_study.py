"""Repeated context-effect estimates on corpora with a planted anchor and look-alike.

    python scripts/context_study.py --reps 10 --trainer bc_cnn
"""
import argparse
import logging

import numpy as np

from scanirl.analysis import StudyConfig, context_effect, train_method
from scanirl.baselines import BCConfig
from scanirl.dataio import SyntheticSceneConfig, generate_synthetic_corpus, make_splits
from scanirl.nets import ArchConfig
from scanirl.searchenv import SearchEnv


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=10)
    ap.add_argument("--trainer", choices=("irl", "bc_cnn"), default="bc_cnn")
    ap.add_argument("--scenes-per-task", type=int, default=30)
    ap.add_argument("--correlation", type=float, default=1.0)
    ap.add_argument("--n-eval", type=int, default=10)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    study = StudyConfig(arch=ArchConfig((16, 8, 4), (16, 32), 32, "float32"), bc=BCConfig(epochs=60, lr=1e-3))
    good = 0
    print("rep  anchor   lookalike")
    for rep in range(args.reps):
        cfg = SyntheticSceneConfig(scenes_per_task=args.scenes_per_task, anchor_correlation=args.correlation,
                                   lookalike_prob=1.0, seed=100 + rep)
        ds = generate_synthetic_corpus(cfg).dataset()
        split = make_splits(ds.images_by_task(), rep)
        train = ds.training_pairs(images=set(split.ids("train")))
        test = [t for t, _ in ds.training_pairs(images=set(split.ids("test")))]
        pol = train_method(args.trainer, train, study, SearchEnv(), rep)
        d = {cat: float(np.mean([context_effect(cat, task, test, pol, n_scanpaths=args.n_eval, seed=rep).delta
                                 for task in cfg.tasks]))
             for cat in ("anchor", "lookalike")}
        good += d["anchor"] > 0 and d["lookalike"] < 0
        print(f"{rep:>3}  {d['anchor']:+.3f}   {d['lookalike']:+.3f}", flush=True)
    print(f"{good}/{args.reps} repetitions with the expected signs")


if __name__ == "__main__":
    main()
