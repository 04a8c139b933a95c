"""Hierarchical shifted-window transformer encoder producing three feature levels."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .attention import SelfAttention, SequenceFeature, shifted_window_msa, window_msa
from .config import EncoderConfig
from .nn import MLP, LayerNorm, Linear, Module
from .tensor import Tensor
from .upsample import Upsampler


class InputShapeError(ValueError):
    pass


@dataclass
class MultilevelFeatures:
    """F1, F2, F3 at strides 4, 8, 16; F4 (stride 32) is kept for wide context."""

    F1: SequenceFeature
    F2: SequenceFeature
    F3: SequenceFeature
    F4: SequenceFeature

    def levels(self) -> list[SequenceFeature]:
        return [self.F1, self.F2, self.F3]


def encoder_heads(dim: int) -> int:
    return max(1, dim // 32)


class PatchEmbed(Module):
    def __init__(self, patch: int, dim: int, in_ch: int = 3):
        self.patch = patch
        self.in_ch = in_ch
        self.proj = Linear(in_ch * patch * patch, dim)

    def __call__(self, image: Tensor) -> SequenceFeature:
        squeeze = image.ndim == 3
        if squeeze:
            image = T.reshape(image, (1,) + image.shape)
        if image.ndim != 4 or image.shape[1] != self.in_ch:
            raise InputShapeError(f"expected image (B, {self.in_ch}, H, W), got {image.shape}")
        B, C, H, W = image.shape
        p = self.patch
        if H % p or W % p:
            raise InputShapeError(f"image {H}x{W} not divisible by patch size {p}")
        h, w = H // p, W // p
        t = T.reshape(image, (B, C, h, p, w, p))
        t = T.transpose(t, (0, 2, 4, 1, 3, 5))
        t = self.proj(T.reshape(t, (B, h * w, C * p * p)))
        if squeeze:
            t = T.reshape(t, (h * w, t.shape[-1]))
        return SequenceFeature(t, h, w)


def patch_embed(image: Tensor, embed: PatchEmbed) -> SequenceFeature:
    return embed(image)


class SwinBlock(Module):
    """Pre-norm (shifted) window attention and MLP, each with a residual."""

    def __init__(self, dim: int, n_heads: int, window: int, shifted: bool, mlp_ratio: float = 4.0,
                 rel_pos_bias: bool = True):
        self.window = window
        self.shifted = shifted
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, n_heads, rel_pos_window=window if rel_pos_bias else None)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio))

    def __call__(self, x: SequenceFeature) -> SequenceFeature:
        win = self.window
        shift = self.shifted
        if min(x.h, x.w) <= win:
            # the window already covers the map: shrink it and do not shift
            win = min(x.h, x.w)
            shift = False
        z = x.with_tokens(T.layer_norm(x.tokens, self.norm1.gamma, self.norm1.beta, self.norm1.eps))
        a = shifted_window_msa(z, self.attn, win) if shift else window_msa(z, self.attn, win)
        t = x.tokens + a.tokens
        t = t + self.mlp(self.norm2(t))
        return x.with_tokens(t)


class SwinPair(Module):
    def __init__(self, dim: int, n_heads: int, window: int, mlp_ratio: float = 4.0, rel_pos_bias: bool = True):
        self.regular = SwinBlock(dim, n_heads, window, False, mlp_ratio, rel_pos_bias)
        self.shifted = SwinBlock(dim, n_heads, window, True, mlp_ratio, rel_pos_bias)

    def __call__(self, x: SequenceFeature) -> SequenceFeature:
        return self.shifted(self.regular(x))


def swin_pair(x: SequenceFeature, pair: SwinPair) -> SequenceFeature:
    return pair(x)


class PatchMerging(Module):
    """Concatenate each 2x2 token neighbourhood and project 4c -> 2c."""

    def __init__(self, dim: int):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, bias=False)

    def __call__(self, x: SequenceFeature) -> SequenceFeature:
        m = x.to_map()
        n = len(x.lead)
        ph, pw = x.h % 2, x.w % 2
        if ph or pw:
            m = T.pad(m, [(0, 0)] * n + [(0, ph), (0, pw), (0, 0)])
        lead_sl = (slice(None),) * n
        parts = [m[lead_sl + (slice(a, None, 2), slice(b, None, 2))] for a, b in ((0, 0), (1, 0), (0, 1), (1, 1))]
        cat = T.concat(parts, axis=-1)
        out = SequenceFeature.from_map(self.reduction(self.norm(cat)))
        return out


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, fuse_method: str = "fold_overlap"):
        cfg.validate()
        self.cfg = cfg
        dims = cfg.stage_dims
        self.embed = PatchEmbed(cfg.patch_size, dims[0])
        self.stages = []
        for dim, depth in zip(dims, cfg.stage_depths):
            self.stages.append(
                [SwinPair(dim, encoder_heads(dim), cfg.window, cfg.mlp_ratio, cfg.rel_pos_bias)
                 for _ in range(depth // 2)]
            )
        self.merges = [PatchMerging(d) for d in dims[:3]]
        self.norms = [LayerNorm(d) for d in dims]
        self.fuse_align = Linear(dims[3], dims[2])
        self.fuse_up = Upsampler(dims[2], fuse_method, 3, 2, 1)

    @property
    def min_divisor(self) -> int:
        return self.cfg.patch_size * 4

    def __call__(self, image: Tensor) -> MultilevelFeatures:
        H, W = image.shape[-2:]
        d = self.min_divisor
        if H % d or W % d:
            raise InputShapeError(f"image {H}x{W} not divisible by {d}")
        x = self.embed(image)
        outs = []
        for i, pairs in enumerate(self.stages):
            if i > 0:
                x = self.merges[i - 1](x)
            for pair in pairs:
                x = pair(x)
            outs.append(x.with_tokens(self.norms[i](x.tokens)))
        f1, f2, f3, f4 = outs
        up = self.fuse_up(f4.with_tokens(self.fuse_align(f4.tokens)))
        if (up.h, up.w) != (f3.h, f3.w):
            # odd stride-16 maps: stage 4 was padded, so crop the upsampled map back
            n = len(up.lead)
            m = up.to_map()[(slice(None),) * n + (slice(0, f3.h), slice(0, f3.w))]
            up = SequenceFeature.from_map(m)
        return MultilevelFeatures(f1, f2, f3.with_tokens(f3.tokens + up.tokens), f4)


def encode(image: Tensor, encoder: Encoder) -> MultilevelFeatures:
    return encoder(image)
