"""Scaled dot-product attention: global (MSA), windowed (W-MSA / SW-MSA) and cross."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module, Parameter
from .tensor import DimensionError, Tensor


class InvalidMaskError(ValueError):
    pass


@dataclass
class SequenceFeature:
    """Tokens (..., l, c) of an h x w map in row-major order."""

    tokens: Tensor
    h: int
    w: int

    def __post_init__(self):
        if self.tokens.ndim < 2 or self.tokens.shape[-2] != self.h * self.w:
            raise DimensionError(
                f"token count {self.tokens.shape[-2:]} does not match spatial shape {self.h}x{self.w}"
            )

    @property
    def l(self) -> int:
        return self.h * self.w

    @property
    def c(self) -> int:
        return self.tokens.shape[-1]

    @property
    def lead(self) -> tuple:
        return self.tokens.shape[:-2]

    def to_map(self) -> Tensor:
        return T.reshape(self.tokens, self.lead + (self.h, self.w, self.c))

    @classmethod
    def from_map(cls, m: Tensor) -> "SequenceFeature":
        *lead, h, w, c = m.shape
        return cls(T.reshape(m, tuple(lead) + (h * w, c)), h, w)

    def with_tokens(self, tokens: Tensor) -> "SequenceFeature":
        return SequenceFeature(tokens, self.h, self.w)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


@dataclass
class AttentionConfig:
    d_model: int
    n_heads: int = 1
    window: tuple[int, int] | None = None

    def __post_init__(self):
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} must divide d_model={self.d_model}")
        if self.window is not None:
            self.window = _pair(self.window)
            if min(self.window) < 1:
                raise ValueError(f"window extents must be >= 1, got {self.window}")


def default_heads(d: int) -> int:
    """Decoder default: one head per 64 channels, at least one."""
    h = max(1, d // 64)
    while d % h:
        h -= 1
    return h


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise InvalidMaskError("attention mask has a fully masked query row")
    d = q.shape[-1]
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d))
    return T.matmul(T.softmax(logits, -1, mask), v)


# ---------------------------------------------------------------------------
# self-attention projections


def _rel_index(wh: int, ww: int, table_w: tuple[int, int]) -> np.ndarray:
    """Index into a (2*th-1)*(2*tw-1) bias table for a wh x ww window."""
    th, tw = table_w
    ys, xs = np.meshgrid(np.arange(wh), np.arange(ww), indexing="ij")
    ys, xs = ys.reshape(-1), xs.reshape(-1)
    dy = ys[:, None] - ys[None, :] + th - 1
    dx = xs[:, None] - xs[None, :] + tw - 1
    return dy * (2 * tw - 1) + dx


class SelfAttention(Module):
    """Q/K/V and output projections shared by msa, window_msa and shifted_window_msa.

    Keys carry no bias: it would add a per-row constant to the logits, which
    softmax cancels, leaving the parameter without gradient.
    """

    def __init__(self, dim: int, n_heads: int = 1, rel_pos_window=None):
        if dim % n_heads:
            raise ValueError(f"n_heads={n_heads} must divide dim={dim}")
        self.dim = dim
        self.n_heads = n_heads
        self.qkv = Linear(dim, 3 * dim, bias=False)
        self.q_bias = Parameter((dim,), init="zeros")
        self.v_bias = Parameter((dim,), init="zeros")
        self.proj = Linear(dim, dim)
        self.rel_window = _pair(rel_pos_window) if rel_pos_window is not None else None
        if self.rel_window is not None:
            th, tw = self.rel_window
            self.rel_table = Parameter(((2 * th - 1) * (2 * tw - 1), n_heads))

    def _bias(self, wh: int, ww: int) -> Tensor | None:
        if self.rel_window is None:
            return None
        th, tw = self.rel_window
        if wh > th or ww > tw:
            raise DimensionError(f"window {wh}x{ww} exceeds bias table window {th}x{tw}")
        idx = _rel_index(wh, ww, self.rel_window)
        n = wh * ww
        b = T.take(self.rel_table, idx.reshape(-1), axis=0)
        return T.transpose(T.reshape(b, (n, n, self.n_heads)), (2, 0, 1))

    def attend(self, x: Tensor, mask: np.ndarray | None = None, bias: Tensor | None = None) -> Tensor:
        """x: (B, G, N, C) groups of tokens attending within each group."""
        B, G, N, C = x.shape
        if C != self.dim:
            raise DimensionError(f"attention expects {self.dim} channels, got {C}")
        H = self.n_heads
        hd = C // H
        zeros = Tensor(np.zeros(C, dtype=x.data.dtype))
        b = T.concat([self.q_bias, zeros, self.v_bias], axis=0)
        qkv = T.linear(x, self.qkv.weight, b)
        qkv = T.transpose(T.reshape(qkv, (B, G, N, 3, H, hd)), (3, 0, 1, 4, 2, 5))
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(hd))
        if bias is not None:
            logits = logits + bias
        if mask is not None:
            if not mask.any(axis=-1).all():
                raise InvalidMaskError("attention mask has a fully masked query row")
            mask = mask[:, None, :, :]
        out = T.matmul(T.softmax(logits, -1, mask), v)
        out = T.reshape(T.transpose(out, (0, 1, 3, 2, 4)), (B, G, N, C))
        return self.proj(out)


def _flat_lead(x: SequenceFeature) -> tuple[tuple, int]:
    lead = x.lead
    return lead, int(np.prod(lead)) if lead else 1


def msa(x: SequenceFeature, attn: SelfAttention) -> SequenceFeature:
    """Global multi-head self-attention over all tokens."""
    if x.c != attn.dim:
        raise DimensionError(f"msa: feature has {x.c} channels, attention expects {attn.dim}")
    lead, B = _flat_lead(x)
    t = T.reshape(x.tokens, (B, 1, x.l, x.c))
    out = attn.attend(t)
    return x.with_tokens(T.reshape(out, lead + (x.l, x.c)))


# ---------------------------------------------------------------------------
# windows


@dataclass
class PadRecord:
    lead: tuple
    h: int
    w: int
    hp: int
    wp: int
    wh: int
    ww: int

    @property
    def n_windows(self) -> int:
        return (self.hp // self.wh) * (self.wp // self.ww)


def _padded_extent(n: int, win: int, extra: int) -> int:
    return -(-n // win) * win + extra


def _partition_array(a: np.ndarray, wh: int, ww: int) -> np.ndarray:
    hp, wp = a.shape
    return a.reshape(hp // wh, wh, wp // ww, ww).transpose(0, 2, 1, 3).reshape(-1, wh * ww)


def _partition_map(m: Tensor, B: int, hp: int, wp: int, c: int, wh: int, ww: int) -> Tensor:
    t = T.reshape(m, (B, hp // wh, wh, wp // ww, ww, c))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (B, (hp // wh) * (wp // ww), wh * ww, c))


def _merge_map(wins: Tensor, B: int, hp: int, wp: int, c: int, wh: int, ww: int) -> Tensor:
    t = T.reshape(wins, (B, hp // wh, wp // ww, wh, ww, c))
    t = T.transpose(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (B, hp, wp, c))


def window_partition(x: SequenceFeature, win, extra_pad=(0, 0)):
    """Split into non-overlapping tiles.

    Returns (windows (B, n_win, wh*ww, c), PadRecord, padded (n_win, wh*ww) bool).
    The map is zero-padded on the bottom/right to window multiples, plus
    ``extra_pad`` further rows/cols (whole windows only).
    """
    wh, ww = _pair(win)
    if wh < 1 or ww < 1:
        raise ValueError(f"window extents must be >= 1, got {(wh, ww)}")
    eh, ew = extra_pad
    if eh % wh or ew % ww:
        raise ValueError("extra_pad must be a multiple of the window extents")
    lead, B = _flat_lead(x)
    hp, wp = _padded_extent(x.h, wh, eh), _padded_extent(x.w, ww, ew)
    m = T.reshape(x.tokens, (B, x.h, x.w, x.c))
    if hp != x.h or wp != x.w:
        m = T.pad(m, [(0, 0), (0, hp - x.h), (0, wp - x.w), (0, 0)])
    padded = np.ones((hp, wp), dtype=bool)
    padded[: x.h, : x.w] = False
    rec = PadRecord(lead, x.h, x.w, hp, wp, wh, ww)
    return _partition_map(m, B, hp, wp, x.c, wh, ww), rec, _partition_array(padded, wh, ww)


def window_merge(windows: Tensor, rec: PadRecord) -> SequenceFeature:
    B = windows.shape[0]
    c = windows.shape[-1]
    m = _merge_map(windows, B, rec.hp, rec.wp, c, rec.wh, rec.ww)
    if rec.hp != rec.h or rec.wp != rec.w:
        m = m[:, : rec.h, : rec.w, :]
    return SequenceFeature(T.reshape(m, rec.lead + (rec.h * rec.w, c)), rec.h, rec.w)


def _band(n: int, win: int, shift: int) -> np.ndarray:
    r = np.zeros(n, dtype=np.int64)
    if shift > 0:
        r[n - win : n - shift] = 1
        r[n - shift :] = 2
    return r


def _windowed(x: SequenceFeature, attn: SelfAttention, win, shift=(0, 0), extra_pad=(0, 0)) -> SequenceFeature:
    if x.c != attn.dim:
        raise DimensionError(f"window attention: feature has {x.c} channels, attention expects {attn.dim}")
    wh, ww = _pair(win)
    sh, sw = shift
    lead, B = _flat_lead(x)
    eh, ew = extra_pad
    hp, wp = _padded_extent(x.h, wh, eh), _padded_extent(x.w, ww, ew)
    c = x.c
    m = T.reshape(x.tokens, (B, x.h, x.w, c))
    if hp != x.h or wp != x.w:
        m = T.pad(m, [(0, 0), (0, hp - x.h), (0, wp - x.w), (0, 0)])
    padded = np.ones((hp, wp), dtype=bool)
    padded[: x.h, : x.w] = False
    if sh or sw:
        m = T.roll(m, (-sh, -sw), axis=(1, 2))
        padded = np.roll(padded, (-sh, -sw), axis=(0, 1))
    wins = _partition_map(m, B, hp, wp, c, wh, ww)
    n = wh * ww
    mask = None
    if padded.any() or sh or sw:
        pw = _partition_array(padded, wh, ww)
        region = _band(hp, wh, sh)[:, None] * 3 + _band(wp, ww, sw)[None, :]
        rw = _partition_array(region, wh, ww)
        eye = np.eye(n, dtype=bool)
        mask = (rw[:, :, None] == rw[:, None, :]) & (~pw[:, None, :] | eye[None])
    out = attn.attend(wins, mask, attn._bias(wh, ww))
    m = _merge_map(out, B, hp, wp, c, wh, ww)
    if sh or sw:
        m = T.roll(m, (sh, sw), axis=(1, 2))
    if hp != x.h or wp != x.w:
        m = m[:, : x.h, : x.w, :]
    return SequenceFeature(T.reshape(m, lead + (x.l, c)), x.h, x.w)


def window_msa(x: SequenceFeature, attn: SelfAttention, win, extra_pad=(0, 0)) -> SequenceFeature:
    """Self-attention restricted to non-overlapping windows; padding is masked and cropped."""
    return _windowed(x, attn, win, (0, 0), extra_pad)


def shifted_window_msa(x: SequenceFeature, attn: SelfAttention, win, shift=None) -> SequenceFeature:
    """Window attention on a map cyclically shifted by half a window.

    Tokens wrapped across the border by the shift are masked from each other.
    """
    wh, ww = _pair(win)
    if shift is None:
        shift = (wh // 2, ww // 2)
    return _windowed(x, attn, (wh, ww), tuple(shift))


# ---------------------------------------------------------------------------
# cross-attention


class CrossAttention(Module):
    """Queries from one feature, keys/values from another; no output projection."""

    def __init__(self, c_query: int, c_context: int, d: int, n_heads: int = 1):
        if d % n_heads:
            raise ValueError(f"n_heads={n_heads} must divide d={d}")
        self.d = d
        self.n_heads = n_heads
        self.q = Linear(c_query, d)
        self.k = Linear(c_context, d, bias=False)
        self.v = Linear(c_context, d)

    def __call__(self, query: SequenceFeature, context: SequenceFeature) -> Tensor:
        return cross_attention(query, context, self)


def _split_heads(t: Tensor, H: int) -> Tensor:
    *lead, l, d = t.shape
    t = T.reshape(t, tuple(lead) + (l, H, d // H))
    nd = t.ndim
    return T.transpose(t, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def _merge_heads(t: Tensor) -> Tensor:
    *lead, H, l, hd = t.shape
    nd = t.ndim
    t = T.transpose(t, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    return T.reshape(t, tuple(lead) + (l, H * hd))


def cross_attention(low: SequenceFeature, high: SequenceFeature, ca: CrossAttention) -> Tensor:
    """Queries from ``low``, keys/values from ``high``; returns (..., l_low, d)."""
    if low.c != ca.q.weight.shape[0] or high.c != ca.k.weight.shape[0]:
        raise DimensionError(
            f"cross_attention: channels ({low.c}, {high.c}) vs projections "
            f"({ca.q.weight.shape[0]}, {ca.k.weight.shape[0]})"
        )
    q, k, v = ca.q(low.tokens), ca.k(high.tokens), ca.v(high.tokens)
    H = ca.n_heads
    if H == 1:
        return scaled_dot_attention(q, k, v)
    out = scaled_dot_attention(_split_heads(q, H), _split_heads(k, H), _split_heads(v, H))
    return _merge_heads(out)
