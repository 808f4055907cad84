"""Relative repeatability of a trained checkpoint against random sampling.

    python3 scripts/repeatability.py runs/default/checkpoint.bin [--pairs 100]
"""

import argparse

from _common import held_out_pairs
from stablekp import evaluation
from stablekp.autodiff import load_checkpoint
from stablekp.fpn import fpn_config_from_store


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("checkpoint")
    ap.add_argument("--pairs", type=int, default=100)
    ap.add_argument("--counts", default="4,8,16,32,64")
    ap.add_argument("--epsilon", type=float, default=0.03)
    args = ap.parse_args()

    params = load_checkpoint(args.checkpoint)
    det = evaluation.fpn_detector(params, fpn_config_from_store(params))
    pairs, _ = held_out_pairs(args.pairs)
    counts = [int(c) for c in args.counts.split(",")]
    print(evaluation.repeatability_report(det, pairs, counts, args.epsilon).to_csv(), end="")


if __name__ == "__main__":
    main()
