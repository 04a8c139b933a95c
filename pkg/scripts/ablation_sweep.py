"""Run every ablation axis on a small configuration and print the rows.

    python scripts/ablation_sweep.py --out runs/ablation --epochs 3
"""

import argparse

from sodnet.config import toy_config
from sodnet.dataio import gen_synthetic
from sodnet.train import ABLATION_AXES, ablate


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--axes", default=",".join(ABLATION_AXES))
    args = ap.parse_args()
    cfg = toy_config(**{"train.epochs": str(args.epochs)})
    n = cfg.train.image_size
    samples = gen_synthetic(cfg.train.synthetic, n, n, cfg.seed)
    for axis in args.axes.split(","):
        for r in ablate(cfg, axis, samples, out_dir=args.out):
            print(f"{axis:14s} {r.value:13s} loss {r.final_loss:.4f}  mae {r.mae:.4f}  "
                  f"E {r.e_mean:.4f}  S {r.s_measure:.4f}  wF {r.wf:.4f}")


if __name__ == "__main__":
    main()
