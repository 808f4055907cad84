"""Repeatability under additive Gaussian noise or random downsampling.

    python3 scripts/noise_sweep.py runs/default/checkpoint.bin --kind noise --levels 0,0.01,0.02
"""

import argparse

import numpy as np

from _common import held_out_pairs
from stablekp import evaluation
from stablekp.autodiff import load_checkpoint
from stablekp.fpn import fpn_config_from_store


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("checkpoint")
    ap.add_argument("--kind", choices=evaluation.SWEEP_KINDS, default="noise")
    ap.add_argument("--levels", default="0,0.005,0.01,0.02")
    ap.add_argument("--n", type=int, default=16)
    ap.add_argument("--pairs", type=int, default=100)
    ap.add_argument("--epsilon", type=float, default=0.03)
    args = ap.parse_args()

    params = load_checkpoint(args.checkpoint)
    cfg = fpn_config_from_store(params)
    pairs, areas = held_out_pairs(args.pairs)
    levels = [float(v) for v in args.levels.split(",")]
    rows = evaluation.robustness_sweep(evaluation.fpn_detector(params, cfg), pairs, args.kind,
                                       levels, args.n, args.epsilon, min_points=cfg.M)
    print(evaluation.sweep_rows_csv(rows, args.kind), end="")
    p = np.mean(1 - (1 - np.pi * args.epsilon ** 2 / areas) ** args.n)
    print(f"# chance level for {args.n} random surface points: {p:.4f}")


if __name__ == "__main__":
    main()
