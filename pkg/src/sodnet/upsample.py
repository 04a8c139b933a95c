"""Token upsampling: fold with overlap, plain fold, pixel shuffle and bilinear."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import SequenceFeature
from .config import UPSAMPLE_METHODS, ConfigError
from .nn import Linear, Module
from .tensor import DimensionError, Tensor


def fold_output_tokens(h_out: int, k: int, s: int, p: int) -> int:
    """Number of patch positions along one axis for an output extent ``h_out``."""
    return (h_out + 2 * p - k) // s + 1


def check_fold_geometry(h: int, k: int, s: int, p: int) -> None:
    """Raise unless ``h`` patches at stride ``s`` tile an ``s*h`` output exactly."""
    if s < 1 or k < s or p < 0 or fold_output_tokens(s * h, k, s, p) != h:
        raise ConfigError(f"fold geometry unsatisfiable for h={h}, k={k}, s={s}, p={p}")


def overlap_counts(h: int, w: int, k: int, s: int, p: int) -> np.ndarray:
    """How many patches cover each output pixel."""
    counts = np.zeros((s * h + 2 * p, s * w + 2 * p))
    for i in range(h):
        for j in range(w):
            counts[i * s : i * s + k, j * s : j * s + k] += 1
    return counts[p : p + s * h, p : p + s * w]


def fold_tokens(x: SequenceFeature, k: int, s: int, p: int, normalize: bool = False) -> SequenceFeature:
    """Scatter each (c*k*k)-channel token as a c-channel k x k patch and overlap-add."""
    if x.c % (k * k):
        raise DimensionError(f"fold: {x.c} channels not divisible by k*k={k * k}")
    check_fold_geometry(x.h, k, s, p)
    check_fold_geometry(x.w, k, s, p)
    c = x.c // (k * k)
    patches = T.reshape(x.tokens, x.lead + (x.h, x.w, c, k, k))
    m = T.fold(patches, k, s, p, (s * x.h, s * x.w))
    if normalize and k > s:
        counts = overlap_counts(x.h, x.w, k, s, p)[:, :, None]
        m = m * Tensor((1.0 / counts).astype(m.data.dtype))
    return SequenceFeature.from_map(m)


def pixel_shuffle(x: SequenceFeature, s: int) -> SequenceFeature:
    """Rearrange (c*s*s) channels into an s x s block of c channels (channel-major)."""
    if x.c % (s * s):
        raise DimensionError(f"pixel_shuffle: {x.c} channels not divisible by s*s={s * s}")
    c = x.c // (s * s)
    lead = x.lead
    n = len(lead)
    t = T.reshape(x.tokens, lead + (x.h, x.w, c, s, s))
    axes = tuple(range(n)) + (n, n + 3, n + 1, n + 4, n + 2)
    t = T.transpose(t, axes)
    return SequenceFeature(T.reshape(t, lead + (x.h * s * x.w * s, c)), x.h * s, x.w * s)


def resize_bilinear(m: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Bilinear resize of the last two axes of ``m`` (..., h, w)."""
    h, w = m.shape[-2:]
    ho, wo = out_hw
    if (h, w) == (ho, wo):
        return m
    dtype = m.data.dtype
    ry = Tensor(T.interp_matrix(h, ho, dtype))
    rxt = Tensor(T.interp_matrix(w, wo, dtype).T.copy())
    return T.matmul(T.matmul(ry, m), rxt)


def upsample_bilinear(x: SequenceFeature, s: int) -> SequenceFeature:
    n = len(x.lead)
    m = x.to_map()
    chw = T.transpose(m, tuple(range(n)) + (n + 2, n, n + 1))
    up = resize_bilinear(chw, (s * x.h, s * x.w))
    return SequenceFeature.from_map(T.transpose(up, tuple(range(n)) + (n + 1, n + 2, n)))


class Upsampler(Module):
    """One upsampling step of ratio ``s``; learned methods own a channel expansion."""

    def __init__(self, c: int, method: str, k: int, s: int, p: int, normalize: bool = False):
        if method not in UPSAMPLE_METHODS:
            raise ConfigError(f"unknown upsample method {method!r}; expected one of {UPSAMPLE_METHODS}")
        if s < 1 or k < s or p < 0:
            raise ConfigError(f"invalid upsample step k={k}, s={s}, p={p}")
        self.method = method
        self.s = s
        self.k, self.p = (k, p) if method == "fold_overlap" else (s, 0)
        self.normalize = normalize
        if method == "fold_overlap":
            self.expand = Linear(c, c * k * k)
        elif method in ("fold", "pixel_shuffle"):
            self.expand = Linear(c, c * s * s)
        else:
            self.expand = None

    def check(self, h: int, w: int) -> None:
        check_fold_geometry(h, self.k, self.s, self.p)
        check_fold_geometry(w, self.k, self.s, self.p)

    def __call__(self, x: SequenceFeature) -> SequenceFeature:
        if self.method == "bilinear":
            return upsample_bilinear(x, self.s)
        e = x.with_tokens(self.expand(x.tokens))
        if self.method == "pixel_shuffle":
            return pixel_shuffle(e, self.s)
        return fold_tokens(e, self.k, self.s, self.p, self.normalize)


def upsample_fold_overlap(x: SequenceFeature, expand: Linear, k: int, s: int, p: int) -> SequenceFeature:
    return fold_tokens(x.with_tokens(expand(x.tokens)), k, s, p)


def upsample(x: SequenceFeature, up: Upsampler) -> SequenceFeature:
    return up(x)
