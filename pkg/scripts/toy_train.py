"""Train the desk-scale model on 64 generated 64x64 images and report the run.

    python scripts/toy_train.py --out runs/toy [key=value ...]
"""

import argparse
import time

from sodnet.config import toy_config
from sodnet.dataio import gen_synthetic
from sodnet.train import train


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("overrides", nargs="*", help="config overrides such as train.batch=2")
    args = ap.parse_args()
    cfg = toy_config(**dict(kv.split("=", 1) for kv in args.overrides))
    n = cfg.train.image_size
    samples = gen_synthetic(cfg.train.synthetic, n, n, cfg.seed)
    t0 = time.perf_counter()
    res = train(cfg, samples, args.out, verbose=True)
    first, last = res.log[0], res.log[-1]
    print(f"loss {first[1]:.4f} -> {last[1]:.4f} (ratio {last[1] / first[1]:.3f}), "
          f"held-out MAE {last[2]:.4f}, {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
