"""Salient-object evaluation: MAE, mean E-measure, S-measure, weighted F, PR and F curves.

Every metric takes a prediction P with values in [0, 1] and a boolean ground
truth G. P may carry a leading batch axis (N, H, W) against a single G, in
which case an array of N scores is returned.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve, distance_transform_edt

from .dataio import DataError, bilinear_resize, list_stems, load_mask, load_pgm

EPS = np.spacing(1.0)
THRESHOLDS = np.arange(256) / 255.0
CURVE_BETA2 = 0.3
WF_BETA2 = 1.0
WF_SIGMA = 5.0
WF_KERNEL = 7


def _prep(P, G):
    P = np.asarray(P, dtype=np.float64)
    G = np.asarray(G, dtype=bool)
    if G.ndim != 2:
        raise ValueError(f"ground truth must be 2-D, got shape {G.shape}")
    single = P.ndim == 2
    if single:
        P = P[None]
    if P.shape[1:] != G.shape:
        raise ValueError(f"prediction {P.shape[-2:]} and ground truth {G.shape} differ in shape")
    return P, G, single


def _out(v, single):
    return float(v[0]) if single else v


def _count_at_least(vals: np.ndarray, t: np.ndarray, strict: bool) -> np.ndarray:
    """Per row of ``vals`` (B, n), how many entries are >= t (or > t); returns (B, len(t))."""
    B, n = vals.shape
    if B * n * len(t) <= 1 << 22:
        hit = vals[:, None, :] > t[None, :, None] if strict else vals[:, None, :] >= t[None, :, None]
        return hit.sum(axis=2)
    side = "right" if strict else "left"
    return np.stack([n - np.searchsorted(np.sort(row), t, side=side) for row in vals])


def mae(P, G) -> float:
    P, G, single = _prep(P, G)
    return _out(np.abs(P - G).mean(axis=(1, 2)), single)


# ---------------------------------------------------------------------------
# E-measure


def e_measure_curve(P, G) -> np.ndarray:
    """Enhanced-alignment score at each of the 256 thresholds (binarised as P >= t)."""
    P, G, single = _prep(P, G)
    N = G.size
    n_fg = int(G.sum())
    tp = _count_at_least(P[:, G], THRESHOLDS, strict=False)
    fp = _count_at_least(P[:, ~G], THRESHOLDS, strict=False)
    pred_fg = tp + fp
    if n_fg == 0:
        total = (N - pred_fg).astype(np.float64)
    elif n_fg == N:
        total = pred_fg.astype(np.float64)
    else:
        fn = n_fg - tp
        tn = N - pred_fg - fn
        mp = pred_fg / N
        mg = n_fg / N
        total = np.zeros(tp.shape)
        for count, a, b in ((tp, 1 - mp, 1 - mg), (fp, 1 - mp, -mg), (fn, -mp, 1 - mg), (tn, -mp, -mg)):
            # b is never 0 here, so the alignment denominator is positive
            xi = 2 * a * b / (a * a + b * b)
            total = total + count * (xi + 1) ** 2 / 4
    curve = total / N
    return curve[0] if single else curve


def e_measure_mean(P, G) -> float:
    curve = e_measure_curve(P, G)
    return float(curve.mean()) if curve.ndim == 1 else curve.mean(axis=-1)


# ---------------------------------------------------------------------------
# S-measure


def _s_object(vals: np.ndarray) -> np.ndarray:
    """vals: (B, n) -> (B,). Similarity of a region to the all-ones map."""
    n = vals.shape[1]
    mean = vals.mean(axis=1)
    std = vals.std(axis=1, ddof=1) if n > 1 else np.zeros(vals.shape[0])
    return 2 * mean / (mean * mean + 1 + std + EPS)


def _ssim(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """p: (B, h, w) block, g: (h, w) bool block -> (B,)."""
    N = g.size
    p = p.reshape(p.shape[0], -1)
    g = g.reshape(-1).astype(np.float64)
    x = p.mean(axis=1)
    y = g.mean()
    sx = ((p - x[:, None]) ** 2).sum(axis=1) / (N - 1 + EPS)
    sy = ((g - y) ** 2).sum() / (N - 1 + EPS)
    sxy = ((p - x[:, None]) * (g - y)[None]).sum(axis=1) / (N - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    return np.where(alpha != 0, alpha / (beta + EPS), np.where(beta == 0, 1.0, 0.0))


def s_measure(P, G, alpha: float = 0.5):
    P, G, single = _prep(P, G)
    y = G.mean()
    if y == 0:
        return _out(1 - P.mean(axis=(1, 2)), single)
    if y == 1:
        return _out(P.mean(axis=(1, 2)), single)
    obj = _s_object(P[:, G]) * y + _s_object(1 - P[:, ~G]) * (1 - y)
    h, w = G.shape
    ys, xs = np.nonzero(G)
    cy = int(np.round(ys.mean())) + 1
    cx = int(np.round(xs.mean())) + 1
    region = np.zeros(P.shape[0])
    for r0, r1, c0, c1 in ((0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)):
        area = (r1 - r0) * (c1 - c0)
        if area == 0:
            continue
        region = region + _ssim(P[:, r0:r1, c0:c1], G[r0:r1, c0:c1]) * (area / (h * w))
    return _out(np.maximum(0.0, alpha * obj + (1 - alpha) * region), single)


# ---------------------------------------------------------------------------
# weighted F-measure


def gaussian_kernel(size: int = WF_KERNEL, sigma: float = WF_SIGMA) -> np.ndarray:
    r = (size - 1) / 2
    y, x = np.ogrid[-r : r + 1, -r : r + 1]
    k = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    k[k < np.finfo(k.dtype).eps * k.max()] = 0
    return k / k.sum()


def _lattice_offsets(d2: int) -> list[tuple[int, int]]:
    """All (dy, dx) with dy^2 + dx^2 == d2, in row-major order of the target pixel."""
    out = []
    r = math.isqrt(d2)
    for dy in range(-r, r + 1):
        rem = d2 - dy * dy
        dx = math.isqrt(rem)
        if dx * dx == rem:
            out.extend([(dy, -dx), (dy, dx)] if dx else [(dy, 0)])
    return out


def nearest_foreground(G: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance to, and flat index of, the nearest foreground pixel.

    Ties go to the smallest row-major index, so the result does not depend
    on the distance-transform implementation.
    """
    h, w = G.shape
    dist = distance_transform_edt(~G)
    d2 = np.rint(dist * dist).astype(np.int64)
    idx = np.arange(h * w).reshape(h, w)
    nearest = np.where(G, idx, -1)
    for val in np.unique(d2[~G]):
        ys, xs = np.nonzero((d2 == val) & ~G)
        found = np.full(len(ys), -1)
        for dy, dx in _lattice_offsets(int(val)):
            ty, tx = ys + dy, xs + dx
            ok = (found < 0) & (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
            ok[ok] &= G[ty[ok], tx[ok]]
            found[ok] = ty[ok] * w + tx[ok]
            if (found >= 0).all():
                break
        nearest[ys, xs] = found
    return np.sqrt(d2.astype(np.float64)), nearest


def weighted_f_measure(P, G, beta2: float = WF_BETA2):
    P, G, single = _prep(P, G)
    B = P.shape[0]
    if not G.any():
        # nothing to recall: perfect only if nothing was predicted
        return _out(np.where((P == 0).all(axis=(1, 2)), 1.0, 0.0), single)
    dist, nearest = nearest_foreground(G)
    Gf = G.astype(np.float64)
    E = np.abs(P - Gf)
    Et = E.reshape(B, -1)[:, nearest.reshape(-1)].reshape(E.shape)
    K = gaussian_kernel()
    EA = convolve(Et, K[None], mode="constant", cval=0.0)
    min_e = np.where(G & (EA < E), EA, E)
    weight = np.where(G, 1.0, 2.0 - np.exp(math.log(0.5) / 5.0 * dist))
    Ew = min_e * weight
    ew_fg = Ew[:, G]
    tpw = G.sum() - ew_fg.sum(axis=1)
    fpw = Ew[:, ~G].sum(axis=1)
    R = 1 - ew_fg.mean(axis=1)
    Pw = tpw / (tpw + fpw + EPS)
    Q = (1 + beta2) * R * Pw / (R + beta2 * Pw + EPS)
    return _out(Q, single)


# ---------------------------------------------------------------------------
# curves


def minmax_normalize(P: np.ndarray) -> np.ndarray:
    lo = P.min(axis=(-2, -1), keepdims=True)
    hi = P.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    return np.where(span > 0, (P - lo) / np.where(span > 0, span, 1.0), P)


def pr_and_f_curves(P, G, beta2: float = CURVE_BETA2):
    """Precision/recall (256, 2) and F (256,) at thresholds k/255, binarised as P > t.

    P is min-max normalised first. Empty predictions count as precision 1;
    an empty ground truth gives recall 0.
    """
    P, G, single = _prep(P, G)
    P = minmax_normalize(P)
    tp = _count_at_least(P[:, G], THRESHOLDS, strict=True)
    fp = _count_at_least(P[:, ~G], THRESHOLDS, strict=True)
    pos = tp + fp
    n_fg = int(G.sum())
    prec = np.where(pos > 0, tp / np.maximum(pos, 1), 1.0)
    rec = tp / n_fg if n_fg else np.zeros(tp.shape)
    num = (1 + beta2) * prec * rec
    den = beta2 * prec + rec
    f = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    pr = np.stack([prec, rec], axis=-1)
    return (pr[0], f[0]) if single else (pr, f)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    mae: float
    e_mean: float
    s_measure: float
    wf: float
    pr_curve: np.ndarray = field(repr=False)
    f_curve: np.ndarray = field(repr=False)

    def scalars(self) -> dict[str, float]:
        return {"mae": self.mae, "e_mean": self.e_mean, "s_measure": self.s_measure, "wf": self.wf}


def evaluate_pair(P, G) -> MetricReport:
    pr, f = pr_and_f_curves(P, G)
    return MetricReport(mae(P, G), e_measure_mean(P, G), s_measure(P, G), weighted_f_measure(P, G), pr, f)


def mean_report(reports: list[MetricReport]) -> MetricReport:
    if not reports:
        raise ValueError("no reports to average")
    return MetricReport(
        float(np.mean([r.mae for r in reports])),
        float(np.mean([r.e_mean for r in reports])),
        float(np.mean([r.s_measure for r in reports])),
        float(np.mean([r.wf for r in reports])),
        np.mean([r.pr_curve for r in reports], axis=0),
        np.mean([r.f_curve for r in reports], axis=0),
    )


@dataclass
class DirEvaluation:
    mean: MetricReport
    per_image: dict[str, MetricReport]
    warnings: list[str]


def evaluate_dirs(pred_dir, gt_dir) -> DirEvaluation:
    """Average per-image metrics over stems present in both directories.

    Predictions whose size differs from the ground truth are resized to it
    bilinearly. Unpaired files are skipped and reported as warnings.
    """
    preds = set(list_stems(pred_dir, ".pgm"))
    gts = set(list_stems(gt_dir, ".pgm"))
    warnings = [f"no ground truth for prediction {s}" for s in sorted(preds - gts)]
    warnings += [f"no prediction for ground truth {s}" for s in sorted(gts - preds)]
    common = sorted(preds & gts)
    if not common:
        raise DataError(f"no matching prediction/ground-truth pairs between {pred_dir} and {gt_dir}")
    per_image = {}
    for stem in common:
        P = load_pgm(Path(pred_dir) / f"{stem}.pgm")
        G = load_mask(Path(gt_dir) / f"{stem}.pgm")
        if P.shape != G.shape:
            warnings.append(f"{stem}: prediction {P.shape} resized to {G.shape}")
            P = np.clip(bilinear_resize(P, G.shape), 0.0, 1.0)
        per_image[stem] = evaluate_pair(P, G)
    return DirEvaluation(mean_report(list(per_image.values())), per_image, warnings)


def write_report_csv(ev: DirEvaluation, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["name", "mae", "e_mean", "s_measure", "wf"])
        for name, rep in list(ev.per_image.items()) + [("__mean__", ev.mean)]:
            wr.writerow([name] + [f"{v:.10f}" for v in rep.scalars().values()])


def write_curves_csv(rep: MetricReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["threshold", "precision", "recall", "f"])
        for k in range(256):
            wr.writerow([k, f"{rep.pr_curve[k, 0]:.10f}", f"{rep.pr_curve[k, 1]:.10f}", f"{rep.f_curve[k]:.10f}"])
