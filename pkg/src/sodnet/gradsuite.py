"""Finite-difference gradient checks over primitives, blocks and the toy model (64-bit)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import CrossAttention, SelfAttention, SequenceFeature, msa, shifted_window_msa, window_msa
from .config import DecoderConfig, EncoderConfig
from .decoder import MIB, MABStack, build_model
from .encoder import SwinPair
from .losses import bce_loss, iou_loss, joint_loss, multilevel_loss
from .tensor import Tensor
from .upsample import Upsampler

BLOCK_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    scope: str
    name: str
    seed: int
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error <= self.tol


def _t(rng, *shape, lo=None, hi=None) -> Tensor:
    if lo is not None:
        return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _rand_params(module, seed: int, scale: float = 0.3) -> None:
    """Re-draw every parameter at a scale where nonlinearities are exercised."""
    rng = np.random.default_rng(seed)
    for _, p in module.named_parameters():
        p.data = rng.normal(0.0, scale, size=p.shape)
        if p.init == "ones":
            p.data = 1.0 + p.data


def _op_cases(rng) -> dict[str, Callable[[], tuple[Callable[[], Tensor], list[Tensor]]]]:
    def w(fn, *ts):
        return fn, list(ts)

    a = _t(rng, 3, 4)
    b = _t(rng, 3, 4)
    pos = _t(rng, 3, 4, lo=0.5, hi=2.0)
    m1, m2 = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    lw, lb = _t(rng, 4, 6), _t(rng, 6)
    g, bt = _t(rng, 4), _t(rng, 4)
    mask = rng.random((3, 4)) > 0.3
    mask[:, 0] = True
    patches = _t(rng, 2, 2, 2, 3, 3)
    idx = np.array([0, 2, 2, 1])
    coef = rng.normal(size=(3, 4))
    c = Tensor(coef)
    return {
        "add": lambda: w(lambda: T.sum((a + b) * c), a, b),
        "sub": lambda: w(lambda: T.sum((a - b) * c), a, b),
        "mul": lambda: w(lambda: T.sum(a * b * c), a, b),
        "div": lambda: w(lambda: T.sum(a / pos * c), a, pos),
        "exp": lambda: w(lambda: T.sum(T.exp(a) * c), a),
        "log": lambda: w(lambda: T.sum(T.log(pos) * c), pos),
        "sigmoid": lambda: w(lambda: T.sum(T.sigmoid(a) * c), a),
        "gelu": lambda: w(lambda: T.sum(T.gelu(a) * c), a),
        "mean": lambda: w(lambda: T.sum(T.mean(a * c, axis=0) * T.mean(b, axis=0)), a, b),
        "reshape_transpose": lambda: w(lambda: T.sum(T.transpose(T.reshape(a, (4, 3))) * c), a),
        "concat": lambda: w(lambda: T.sum(T.concat([a, b], axis=0) * T.concat([c, c], axis=0)), a, b),
        "getitem": lambda: w(lambda: T.sum(a[1:, ::2] * c[1:, ::2]), a),
        "take": lambda: w(lambda: T.sum(T.take(a, idx, axis=1) * c), a),
        "pad_roll": lambda: w(lambda: T.sum(T.roll(T.pad(a, [(1, 0), (0, 2)]), (1, -1), (0, 1))[:3, :4] * c), a),
        "matmul": lambda: w(lambda: T.sum(T.gelu(T.matmul(m1, m2))), m1, m2),
        "linear": lambda: w(lambda: T.sum(T.gelu(T.linear(a, lw, lb))), a, lw, lb),
        "softmax_masked": lambda: w(lambda: T.sum(T.softmax(a, -1, mask) * c), a),
        "layer_norm": lambda: w(lambda: T.sum(T.layer_norm(a, g, bt) * c), a, g, bt),
        "fold": lambda: w(lambda: T.sum(T.gelu(T.fold(patches, 3, 2, 1, (4, 4)))), patches),
        "clamp_abs": lambda: w(lambda: T.sum(T.abs(T.clamp_min(a, 0.1)) * c), a),
    }


def check_ops(seed: int, h: float = 1e-5) -> list[CheckResult]:
    out = []
    with T.default_dtype(np.float64):
        rng = np.random.default_rng(seed)
        for name, make in _op_cases(rng).items():
            fn, ts = make()
            out.append(CheckResult("ops", name, seed, T.grad_check_many(fn, ts, h), BLOCK_TOL))
    return out


def _feature(rng, lead, h, w, c) -> SequenceFeature:
    return SequenceFeature(_t(rng, *lead, h * w, c), h, w)


def _block_cases(seed: int):
    rng = np.random.default_rng(seed)
    cases = {}

    attn = SelfAttention(8, 2)
    _rand_params(attn, seed)
    x = _feature(rng, (1,), 5, 6, 8)
    cases["msa"] = (lambda: T.sum(T.gelu(msa(x, attn).tokens)), [x.tokens] + attn.parameters())
    cases["window_msa_padded"] = (lambda: T.sum(T.gelu(window_msa(x, attn, (4, 4)).tokens)), [x.tokens])
    cases["shifted_window_msa"] = (lambda: T.sum(T.gelu(shifted_window_msa(x, attn, (4, 4)).tokens)),
                                   [x.tokens] + attn.parameters())

    pair = SwinPair(8, 2, 2)
    _rand_params(pair, seed + 1)
    xs = _feature(rng, (1,), 4, 4, 8)
    cases["swin_pair"] = (lambda: T.sum(T.gelu(pair(xs).tokens)), [xs.tokens] + pair.parameters())

    ca = CrossAttention(6, 10, 8, 2)
    _rand_params(ca, seed + 2)
    lo, hi = _feature(rng, (1,), 4, 4, 6), _feature(rng, (1,), 2, 2, 10)
    cases["cross_attention"] = (lambda: T.sum(T.gelu(ca(lo, hi))), [lo.tokens, hi.tokens] + ca.parameters())

    dcfg = DecoderConfig(r=2, d_mab=8, window=(2, 2), interaction_mode="bidirectional", n_heads=2)
    mib = MIB(6, [10, 12], dcfg)
    _rand_params(mib, seed + 3)
    hi2 = _feature(rng, (1,), 1, 2, 12)
    cases["mib"] = (lambda: T.sum(T.gelu(mib(lo, [hi, hi2]).tokens)),
                    [lo.tokens, hi.tokens, hi2.tokens] + mib.parameters())

    mab = MABStack(6, 5, dcfg)
    _rand_params(mab, seed + 4)
    xm = _feature(rng, (1,), 4, 4, 6)
    cases["mab_stack"] = (lambda: T.sum(T.gelu(mab(xm).tokens)), [xm.tokens] + mab.parameters())

    up = Upsampler(3, "fold_overlap", 3, 2, 1)
    _rand_params(up, seed + 5)
    xu = _feature(rng, (1,), 2, 3, 3)
    cases["fold_overlap"] = (lambda: T.sum(T.gelu(up(xu).tokens)), [xu.tokens] + up.parameters())

    P = _t(rng, 2, 4, 4, lo=0.05, hi=0.95)
    G = Tensor((rng.random((2, 4, 4)) > 0.5).astype(np.float64))
    cases["bce"] = (lambda: bce_loss(P, G), [P])
    cases["iou"] = (lambda: iou_loss(P, G), [P])
    cases["joint"] = (lambda: joint_loss(P, G), [P])
    logits = [_t(rng, 2, 4, 4) for _ in range(3)]
    cases["multilevel"] = (lambda: multilevel_loss(logits, G), logits)
    return cases


def check_blocks(seed: int, h: float = 1e-5, n_samples: int | None = 12) -> list[CheckResult]:
    out = []
    with T.default_dtype(np.float64):
        rng = np.random.default_rng([seed, 7])
        for name, (fn, ts) in _block_cases(seed).items():
            err = T.grad_check_many(fn, ts, h, n_samples=n_samples, rng=rng)
            out.append(CheckResult("blocks", name, seed, err, BLOCK_TOL))
    return out


def toy_model_configs() -> tuple[EncoderConfig, DecoderConfig]:
    return (EncoderConfig(stage_dims=(4, 8, 16, 32), window=4),
            DecoderConfig(r=1, d_mab=16, window=(4, 4)))


def check_model(seed: int, h: float = 1e-5, n_samples: int = 1) -> list[CheckResult]:
    """Full model at 16x16 input; ``n_samples`` coordinates per parameter tensor plus the image."""
    with T.default_dtype(np.float64):
        enc, dec = toy_model_configs()
        model = build_model(enc, dec, seed)
        _rand_params(model, seed, scale=0.2)
        rng = np.random.default_rng([seed, 11])
        x = Tensor(rng.normal(size=(1, 3, 16, 16)), requires_grad=True)
        G = (rng.random((1, 16, 16)) > 0.5).astype(np.float64)
        err = T.grad_check_many(lambda: multilevel_loss(model(x), G), [x] + model.parameters(), h,
                                n_samples=n_samples, rng=rng)
    return [CheckResult("model", "toy_model", seed, err, MODEL_TOL)]


SCOPES = {"ops": check_ops, "blocks": check_blocks, "model": check_model}


def run(scopes=("ops", "blocks", "model"), seeds=range(5)) -> list[CheckResult]:
    out = []
    for scope in scopes:
        for s in seeds:
            out.extend(SCOPES[scope](s))
    return out

