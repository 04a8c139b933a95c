"""Multistage decoder: multilevel interaction, mixed attention, token upsampling and heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import CrossAttention, SelfAttention, SequenceFeature, default_heads, msa, window_msa
from .config import DecoderConfig, EncoderConfig
from .encoder import Encoder, MultilevelFeatures
from .nn import MLP, LayerNorm, Linear, Module, init_parameters
from .tensor import DimensionError, Tensor
from .upsample import Upsampler, resize_bilinear


class ContractError(ValueError):
    pass


@dataclass
class StageOutput:
    F_M: SequenceFeature
    F_P: Tensor  # (..., l, 1) logits
    F_I: SequenceFeature


def _heads(cfg: DecoderConfig, d: int) -> int:
    if cfg.n_heads:
        if d % cfg.n_heads:
            raise DimensionError(f"decoder n_heads={cfg.n_heads} does not divide width {d}")
        return cfg.n_heads
    return default_heads(d)


def nearest_index(src_hw: tuple[int, int], dst_hw: tuple[int, int]) -> np.ndarray:
    """Flat source-token index for each destination token (nearest neighbour)."""
    (hs, ws), (hd, wd) = src_hw, dst_hw
    ry = np.arange(hd) * hs // hd
    rx = np.arange(wd) * ws // wd
    return (ry[:, None] * ws + rx[None, :]).reshape(-1)


class MIB(Module):
    """Multilevel interaction: cross-attend a feature to its higher levels, then an MLP.

    high_to_low queries with the low-level tokens. low_to_high queries with
    each higher level and carries the result back onto the low grid by
    nearest-neighbour resampling. bidirectional sums both.
    """

    def __init__(self, c_low: int, c_highs: list[int], cfg: DecoderConfig):
        if not c_highs:
            raise ContractError("MIB needs at least one higher-level feature")
        self.c_low = c_low
        self.c_highs = list(c_highs)
        heads = _heads(cfg, c_low)
        mode = cfg.interaction_mode
        self.h2l = [CrossAttention(c_low, ch, c_low, heads) for ch in c_highs] if mode != "low_to_high" else []
        self.l2h = [CrossAttention(ch, c_low, c_low, heads) for ch in c_highs] if mode != "high_to_low" else []
        self.norm = LayerNorm(c_low)
        self.mlp = MLP(c_low, int(c_low * cfg.mlp_ratio))

    def __call__(self, F: SequenceFeature, highs: list[SequenceFeature]) -> SequenceFeature:
        if not highs:
            raise ContractError("mib: empty list of higher-level features")
        if len(highs) != len(self.c_highs):
            raise ContractError(f"mib: built for {len(self.c_highs)} higher levels, got {len(highs)}")
        if F.c != self.c_low:
            raise DimensionError(f"mib: low-level feature has {F.c} channels, expected {self.c_low}")
        for hi, ch in zip(highs, self.c_highs):
            if hi.c != ch:
                raise DimensionError(f"mib: higher-level feature has {hi.c} channels, expected {ch}")
        acc = F.tokens
        for ca, hi in zip(self.h2l, highs):
            acc = acc + ca(F, hi)
        for ca, hi in zip(self.l2h, highs):
            idx = nearest_index((hi.h, hi.w), (F.h, F.w))
            acc = acc + T.take(ca(hi, F), idx, axis=-2)
        return F.with_tokens(acc + self.mlp(self.norm(acc)))


def mib(F: SequenceFeature, highs: list[SequenceFeature], block: MIB) -> SequenceFeature:
    return block(F, highs)


class MixedAttentionBlock(Module):
    """Window and global self-attention summed, then MLP(LN) with residual."""

    def __init__(self, d: int, cfg: DecoderConfig):
        heads = _heads(cfg, d)
        self.window = tuple(cfg.window)
        self.residual = cfg.mab_attention_residual
        self.local = SelfAttention(d, heads) if cfg.mab_attention in ("mixed", "window") else None
        self.glob = SelfAttention(d, heads) if cfg.mab_attention in ("mixed", "global") else None
        self.pre_norm = LayerNorm(d) if cfg.mab_pre_norm else None
        self.norm = LayerNorm(d)
        self.mlp = MLP(d, int(d * cfg.mlp_ratio))

    def __call__(self, x: SequenceFeature) -> SequenceFeature:
        z = x.with_tokens(self.pre_norm(x.tokens)) if self.pre_norm is not None else x
        terms = []
        if self.local is not None:
            terms.append(window_msa(z, self.local, self.window).tokens)
        if self.glob is not None:
            terms.append(msa(z, self.glob).tokens)
        hat = terms[0]
        for t in terms[1:]:
            hat = hat + t
        if self.residual:
            hat = hat + x.tokens
        return x.with_tokens(hat + self.mlp(self.norm(hat)))


class MABStack(Module):
    """Lift to the working width, r mixed-attention blocks, restore the stage width."""

    def __init__(self, c_in: int, c_out: int, cfg: DecoderConfig):
        d = cfg.d_mab
        self.c_in = c_in
        self.lift = MLP(c_in, d, d)
        self.blocks = [MixedAttentionBlock(d, cfg) for _ in range(cfg.r)]
        self.restore = MLP(d, d, c_out)

    def __call__(self, x: SequenceFeature) -> SequenceFeature:
        if x.c != self.c_in:
            raise DimensionError(f"mab_stack: expected {self.c_in} channels, got {x.c}")
        x = x.with_tokens(self.lift(x.tokens))
        for blk in self.blocks:
            x = blk(x)
        return x.with_tokens(self.restore(x.tokens))


def mab_stack(x: SequenceFeature, stack: MABStack) -> SequenceFeature:
    return stack(x)


class DecoderStage(Module):
    def __init__(self, c_low: int, c_prev: int, c_highs: list[int], step: int, cfg: DecoderConfig):
        self.up = Upsampler(c_prev, cfg.upsample_method, cfg.fold_k[step], cfg.fold_s[step], cfg.fold_p[step],
                            cfg.fold_normalize)
        self.mib = MIB(c_low, c_highs, cfg)
        self.mab = MABStack(c_low + c_prev, c_low, cfg)
        self.head = Linear(c_low, 1)

    def __call__(self, F: SequenceFeature, highs: list[SequenceFeature], F_prev: SequenceFeature) -> StageOutput:
        up = self.up(F_prev)
        F_I = self.mib(F, highs)
        if (up.h, up.w) != (F_I.h, F_I.w):
            raise DimensionError(f"decode_stage: upsampled {up.h}x{up.w} vs interacted {F_I.h}x{F_I.w}")
        F_C = F_I.with_tokens(T.concat([F_I.tokens, up.tokens], axis=-1))
        F_M = self.mab(F_C)
        return StageOutput(F_M, self.head(F_M.tokens), F_I)


def decode_stage(F: SequenceFeature, highs: list[SequenceFeature], F_prev: SequenceFeature,
                 stage: DecoderStage) -> StageOutput:
    return stage(F, highs, F_prev)


def _context_dims(dims: tuple, across: int) -> tuple[list[int], list[int]]:
    levels = list(dims[:3]) + ([dims[3]] if across >= 3 else [])
    return levels[2 : 2 + across], levels[1 : 1 + across]


class Decoder(Module):
    def __init__(self, dims: tuple, cfg: DecoderConfig):
        cfg.validate()
        self.cfg = cfg
        c1, c2, c3, _ = dims
        ctx1, ctx2 = _context_dims(dims, cfg.across_levels)
        self.stage1 = DecoderStage(c2, c3, ctx1, 0, cfg)
        self.stage2 = DecoderStage(c1, c2, ctx2, 1, cfg)
        self.final_up = Upsampler(c1, cfg.upsample_method, cfg.fold_k[2], cfg.fold_s[2], cfg.fold_p[2],
                                  cfg.fold_normalize)
        self.final_head = Linear(c1, 1)

    def contexts(self, feats: MultilevelFeatures, f2_ctx: SequenceFeature | None = None):
        n = self.cfg.across_levels
        levels = [feats.F1, feats.F2, feats.F3] + ([feats.F4] if n >= 3 else [])
        if f2_ctx is not None:
            levels[1] = f2_ctx
        return levels[2 : 2 + n], levels[1 : 1 + n]

    def __call__(self, feats: MultilevelFeatures, out_hw: tuple[int, int]) -> list[Tensor]:
        ctx1, _ = self.contexts(feats)
        s1 = self.stage1(feats.F2, ctx1, feats.F3)
        _, ctx2 = self.contexts(feats, s1.F_I if self.cfg.ctx_source == "interacted" else None)
        s2 = self.stage2(feats.F1, ctx2, s1.F_M)
        full = self.final_up(s2.F_M)
        maps = []
        for feat, logits in ((s1.F_M, s1.F_P), (s2.F_M, s2.F_P), (full, self.final_head(full.tokens))):
            m = T.reshape(logits, feat.lead + (feat.h, feat.w))
            maps.append(resize_bilinear(m, out_hw))
        return maps


class SODModel(Module):
    """Encoder + decoder. Calling it returns logits maps, coarse to fine, at input resolution."""

    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig):
        self.encoder = Encoder(enc_cfg, dec_cfg.upsample_method)
        self.decoder = Decoder(tuple(enc_cfg.stage_dims), dec_cfg)

    def check_input(self, H: int, W: int) -> None:
        """Validate every upsampling geometry for an H x W input."""
        p = self.encoder.cfg.patch_size
        h1, w1 = H // p, W // p
        for up, (h, w) in ((self.decoder.stage1.up, (h1 // 4, w1 // 4)), (self.decoder.stage2.up, (h1 // 2, w1 // 2)),
                           (self.decoder.final_up, (h1, w1))):
            up.check(h, w)
        if self.decoder.final_up.s != p:
            raise DimensionError(f"final upsampling stride {self.decoder.final_up.s} must equal patch size {p}")

    def __call__(self, image: Tensor) -> list[Tensor]:
        feats = self.encoder(image)
        return self.decoder(feats, image.shape[-2:])


def build_model(enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, seed: int) -> SODModel:
    model = SODModel(enc_cfg, dec_cfg)
    init_parameters(model, seed)
    return model


def forward(image: Tensor, model: SODModel) -> list[Tensor]:
    return model(image)
