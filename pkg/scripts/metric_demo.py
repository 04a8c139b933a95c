"""Score a few hand-made predictions against one mask to show how the metrics react."""

import numpy as np

from sodnet import metrics as M


def main() -> None:
    G = np.zeros((32, 32), dtype=bool)
    G[8:24, 10:22] = True
    rng = np.random.default_rng(0)
    cases = {
        "perfect": G.astype(float),
        "blurred": np.clip(G + rng.normal(0, 0.2, G.shape), 0, 1),
        "shifted": np.roll(G, 4, axis=1).astype(float),
        "all grey": np.full(G.shape, 0.5),
        "inverted": (~G).astype(float),
    }
    print(f"{'case':10s} {'MAE':>7s} {'E':>7s} {'S':>7s} {'wF':>7s} {'maxF':>7s}")
    for name, P in cases.items():
        r = M.evaluate_pair(P, G)
        print(f"{name:10s} {r.mae:7.4f} {r.e_mean:7.4f} {r.s_measure:7.4f} {r.wf:7.4f} {r.f_curve.max():7.4f}")


if __name__ == "__main__":
    main()
