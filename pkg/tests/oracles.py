"""Direct, slow re-statements of the evaluation metrics used as test oracles.

These avoid scipy and the counting shortcuts of the library code: nearest
foreground pixels are found by exhaustive search, the blur is an explicit
kernel loop, the E-measure builds the per-pixel alignment matrix, and the
curves count a confusion matrix per threshold. Functions taking ``Ps``
accept a batch (B, H, W) of predictions against one mask.
"""

from __future__ import annotations

import math

import numpy as np

EPS = np.spacing(1.0)
TS = [k / 255 for k in range(256)]


def mae(P, G) -> float:
    h, w = G.shape
    return sum(abs(float(P[i, j]) - float(G[i, j])) for i in range(h) for j in range(w)) / (h * w)


def e_measure_mean(Ps, G) -> np.ndarray:
    Gf = G.astype(np.float64)
    all_bg, all_fg = not G.any(), G.all()
    scores = np.zeros(len(Ps))
    for t in TS:
        Bp = (Ps >= t).astype(np.float64)
        if all_bg:
            phi = 1.0 - Bp
        elif all_fg:
            phi = Bp
        else:
            fp = Bp - Bp.mean(axis=(1, 2), keepdims=True)
            fg = Gf - Gf.mean()
            xi = 2 * fp * fg / (fp * fp + fg * fg)
            phi = (xi + 1) ** 2 / 4
        scores += phi.mean(axis=(1, 2))
    return scores / len(TS)


def _s_object(vals: list[float]) -> float:
    n = len(vals)
    mu = sum(vals) / n
    std = math.sqrt(sum((v - mu) ** 2 for v in vals) / (n - 1)) if n > 1 else 0.0
    return 2 * mu / (mu * mu + 1 + std + EPS)


def _ssim(p: list[float], g: list[float]) -> float:
    n = len(p)
    x = sum(p) / n
    y = sum(g) / n
    sx = sum((a - x) ** 2 for a in p) / (n - 1 + EPS)
    sy = sum((b - y) ** 2 for b in g) / (n - 1 + EPS)
    sxy = sum((a - x) * (b - y) for a, b in zip(p, g)) / (n - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def s_measure(P, G, alpha: float = 0.5) -> float:
    h, w = G.shape
    cells = [(i, j) for i in range(h) for j in range(w)]
    fg = [float(P[i, j]) for i, j in cells if G[i, j]]
    bg = [1.0 - float(P[i, j]) for i, j in cells if not G[i, j]]
    y = len(fg) / (h * w)
    if y == 0:
        return 1.0 - sum(float(P[i, j]) for i, j in cells) / (h * w)
    if y == 1:
        return sum(fg) / (h * w)
    obj = y * _s_object(fg) + (1 - y) * _s_object(bg)
    rows = [i for i, j in cells if G[i, j]]
    cols = [j for i, j in cells if G[i, j]]
    cy = round(sum(rows) / len(rows)) + 1
    cx = round(sum(cols) / len(cols)) + 1
    region = 0.0
    for r0, r1, c0, c1 in ((0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)):
        block = [(i, j) for i in range(r0, r1) for j in range(c0, c1)]
        if not block:
            continue
        p = [float(P[i, j]) for i, j in block]
        g = [float(G[i, j]) for i, j in block]
        region += _ssim(p, g) * len(block) / (h * w)
    return max(0.0, alpha * obj + (1 - alpha) * region)


def nearest_foreground(G) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive search; ties go to the first foreground pixel in row-major order."""
    h, w = G.shape
    fg = [(i, j) for i in range(h) for j in range(w) if G[i, j]]
    dist = np.zeros((h, w))
    near = np.zeros((h, w), dtype=np.int64)
    for i in range(h):
        for j in range(w):
            best, arg = None, None
            for a, b in fg:
                d2 = (i - a) ** 2 + (j - b) ** 2
                if best is None or d2 < best:
                    best, arg = d2, a * w + b
            dist[i, j] = math.sqrt(best)
            near[i, j] = arg
    return dist, near


def gauss_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) // 2
    k = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            k[i, j] = math.exp(-((i - r) ** 2 + (j - r) ** 2) / (2 * sigma * sigma))
    k[k < np.finfo(np.float64).eps * k.max()] = 0.0
    return k / k.sum()


def weighted_f_measure(Ps, G, beta2: float = 1.0) -> np.ndarray:
    h, w = G.shape
    B = len(Ps)
    if not G.any():
        return np.array([1.0 if not np.any(P) else 0.0 for P in Ps])
    dist, near = nearest_foreground(G)
    K = gauss_kernel()
    r = K.shape[0] // 2
    Gf = G.astype(np.float64)
    E = np.abs(Ps - Gf)
    Et = np.empty_like(E)
    for i in range(h):
        for j in range(w):
            a, b = divmod(int(near[i, j]), w)
            Et[:, i, j] = E[:, a, b]
    EA = np.zeros_like(E)
    for i in range(h):
        for j in range(w):
            acc = np.zeros(B)
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    a, b = i + di, j + dj
                    if 0 <= a < h and 0 <= b < w:
                        acc = acc + K[di + r, dj + r] * Et[:, a, b]
            EA[:, i, j] = acc
    Ew = np.empty_like(E)
    for i in range(h):
        for j in range(w):
            if G[i, j]:
                Ew[:, i, j] = np.where(EA[:, i, j] < E[:, i, j], EA[:, i, j], E[:, i, j])
            else:
                Ew[:, i, j] = E[:, i, j] * (2.0 - math.exp(math.log(0.5) / 5.0 * dist[i, j]))
    ew_fg = Ew[:, G]
    tpw = Gf.sum() - ew_fg.sum(axis=1)
    fpw = Ew[:, ~G].sum(axis=1)
    R = 1.0 - ew_fg.mean(axis=1)
    P = tpw / (tpw + fpw + EPS)
    return (1 + beta2) * R * P / (R + beta2 * P + EPS)


def pr_and_f_curves(Ps, G, beta2: float = 0.3):
    B = len(Ps)
    lo = Ps.min(axis=(1, 2), keepdims=True)
    hi = Ps.max(axis=(1, 2), keepdims=True)
    Pn = np.where(hi > lo, (Ps - lo) / np.where(hi > lo, hi - lo, 1.0), Ps)
    n_fg = int(G.sum())
    pr = np.zeros((B, 256, 2))
    f = np.zeros((B, 256))
    for k, t in enumerate(TS):
        Bp = Pn > t
        tp = (Bp & G).sum(axis=(1, 2)).astype(np.float64)
        fp = (Bp & ~G).sum(axis=(1, 2)).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            prec = np.where(tp + fp > 0, tp / (tp + fp), 1.0)
            rec = tp / n_fg if n_fg else np.zeros(B)
            den = beta2 * prec + rec
            f[:, k] = np.where(den > 0, (1 + beta2) * prec * rec / den, 0.0)
        pr[:, k, 0] = prec
        pr[:, k, 1] = rec
    return pr, f
