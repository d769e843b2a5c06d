"""Train IRL on the default synthetic corpus and compare it with the baselines.

    python scripts/synthetic_e2e.py --epochs 20 --widths 16,8,4 --critic 16,32 --hidden 32
"""
import argparse
import logging
import time

from scanirl import metrics as mt
from scanirl.analysis import bboxes_of, policy_scanpaths
from scanirl.baselines import BCConfig, bc_cnn_train, random_scanpaths
from scanirl.dataio import SyntheticSceneConfig, generate_synthetic_corpus, make_splits
from scanirl.gail import IRLTrainer, TrainConfig
from scanirl.nets import ArchConfig


def ints(s):
    return tuple(int(x) for x in s.split(","))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--widths", type=ints, default=(16, 8, 4))
    ap.add_argument("--critic", type=ints, default=(16, 32))
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--dtype", default="float32")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-eval", type=int, default=10)
    ap.add_argument("--csv", default=None, help="optional report CSV")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    arch = ArchConfig(args.widths, args.critic, args.hidden, args.dtype)
    ds = generate_synthetic_corpus(SyntheticSceneConfig()).dataset()
    split = make_splits(ds.images_by_task(), args.seed)
    train = ds.training_pairs(images=set(split.ids("train")))
    test = ds.training_pairs(images=set(split.ids("test")))
    trials = [t for t, _ in test]
    human = {(t.image_id, t.task): sps for t, sps in test}
    boxes = bboxes_of(trials)

    t0 = time.perf_counter()
    tr = IRLTrainer(train, TrainConfig(epochs=args.epochs, seed=args.seed), arch=arch)
    tr.train(callback=lambda ep, hist: logging.info("epoch %d done (%.0f s)", ep, time.perf_counter() - t0))
    t_irl = time.perf_counter() - t0
    bc, _ = bc_cnn_train(train, BCConfig(epochs=args.epochs, seed=args.seed), arch=arch)

    reports = [
        mt.evaluate(policy_scanpaths(tr.policy, trials, args.n_eval, args.seed + 1), human, boxes, "irl"),
        mt.evaluate(policy_scanpaths(bc, trials, args.n_eval, args.seed + 1), human, boxes, "bc_cnn"),
        mt.evaluate(random_scanpaths(human, list(human), args.n_eval, args.seed + 1), human, boxes, "random"),
        mt.evaluate(human, human, boxes, "expert", similarity=False),
    ]
    print(f"{'model':<8} {'TFP-AUC':>8} {'seq':>7} {'ratio':>7}")
    for r in reports:
        seq = "" if r.sequence_score is None else f"{r.sequence_score:.3f}"
        ratio = "" if r.scanpath_ratio is None else f"{r.scanpath_ratio:.3f}"
        print(f"{r.model:<8} {r.tfp_auc:>8.3f} {seq:>7} {ratio:>7}")
    print(f"IRL training took {t_irl:.0f} s")
    if args.csv:
        mt.write_report_csv(args.csv, reports)


if __name__ == "__main__":
    main()
