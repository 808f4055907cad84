"""Train one detector per (M, K) cell and classify its outputs for degeneracy.

    python3 scripts/mk_sweep.py --M 64 --K 9,24,64 --steps 2000 --out sweep.csv

Every cell trains from scratch, so the default grid takes several minutes.
"""

import argparse
from dataclasses import replace

from stablekp import degeneracy, training
from stablekp.config import RunConfig, stage_seed
from stablekp.synthetic import make_corpus


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--M", default="64")
    ap.add_argument("--K", default="9,24,64")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--eval-count", type=int, default=30)
    ap.add_argument("--out", default="sweep.csv")
    args = ap.parse_args()

    cfg = replace(RunConfig(), max_steps=args.steps)
    corpus = make_corpus(cfg.synthetic_count, cfg.synthetic_shapes, cfg.synthetic_points, 0.0,
                         stage_seed(cfg.seed, "data"))
    evals = make_corpus(args.eval_count, cfg.synthetic_shapes, cfg.synthetic_points, 0.0,
                        stage_seed(cfg.seed, "degeneracy"))
    cells = degeneracy.mk_sweep(lambda c, tc: training.train(c, tc).params, cfg.train_config(),
                                [int(m) for m in args.M.split(",")],
                                [int(k) for k in args.K.split(",")], corpus, evals,
                                epsilon=cfg.resolved_epsilon, seed=stage_seed(cfg.seed, "degeneracy"))
    text = degeneracy.sweep_csv(cells)
    with open(args.out, "w") as fh:
        fh.write(text)
    print(text, end="")
    for c in cells:
        print(f"# M={c.M} K={c.K} fractions={ {k: round(v, 2) for k, v in c.fractions.items()} }")


if __name__ == "__main__":
    main()
