"""Train the default detector on a synthetic corpus and save checkpoint plus loss curve.

    python3 scripts/train_detector.py --out runs/default [--steps 2000] [--K 9]
"""

import argparse
import time
from dataclasses import replace
from pathlib import Path

from stablekp import training
from stablekp.config import RunConfig, stage_seed
from stablekp.synthetic import make_corpus


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--K", type=int, default=9)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = replace(RunConfig(seed=args.seed), max_steps=args.steps, K_nodes=args.K, out=args.out)
    cfg.write(args.out)
    corpus = make_corpus(cfg.synthetic_count, cfg.synthetic_shapes, cfg.synthetic_points, 0.0,
                         stage_seed(cfg.seed, "data"))
    t0 = time.perf_counter()
    res = training.train(corpus, cfg.train_config(), Path(args.out))
    first, last = res.curve[0][1], res.curve[-1][1]
    print(f"{len(res.curve)} steps in {time.perf_counter() - t0:.0f}s, loss {first:.2f} -> {last:.2f}")


if __name__ == "__main__":
    main()
