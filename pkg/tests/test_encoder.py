import numpy as np
import pytest

from sodnet import tensor as T
from sodnet.attention import SequenceFeature
from sodnet.config import ConfigError, EncoderConfig
from sodnet.encoder import Encoder, InputShapeError, PatchEmbed, PatchMerging, SwinPair, encode, patch_embed, swin_pair
from sodnet.losses import multilevel_loss
from sodnet.nn import init_parameters
from sodnet.tensor import Tensor
from sodnet.upsample import resize_bilinear

TOY = EncoderConfig(stage_dims=(16, 32, 64, 128), window=4)


def make_encoder(cfg=TOY, seed=0):
    enc = Encoder(cfg)
    init_parameters(enc, seed)
    return enc


def test_patch_embed_token_count():
    emb = PatchEmbed(4, 32)
    init_parameters(emb, 0)
    x = patch_embed(Tensor(np.random.default_rng(0).random((3, 64, 64))), emb)
    assert x.tokens.shape == (256, 32) and (x.h, x.w) == (16, 16)
    with pytest.raises(InputShapeError):
        emb(Tensor(np.zeros((1, 3, 62, 64))))
    with pytest.raises(InputShapeError):
        emb(Tensor(np.zeros((1, 1, 64, 64))))


def test_patch_embed_is_per_patch_projection():
    emb = PatchEmbed(2, 5)
    init_parameters(emb, 1)
    img = np.random.default_rng(1).random((1, 3, 4, 6))
    out = emb(Tensor(img)).tokens.data[0]
    patch = img[0, :, 2:4, 4:6].reshape(-1)
    np.testing.assert_allclose(out[1 * 3 + 2], patch @ emb.proj.weight.data + emb.proj.bias.data, atol=1e-14)


def test_swin_pair_residual_only_is_identity():
    pair = SwinPair(8, 2, 4)
    init_parameters(pair, 0)
    for blk in (pair.regular, pair.shifted):
        for lin in (blk.attn.proj, blk.mlp.fc2):
            lin.weight.data[:] = 0
    x = SequenceFeature(Tensor(np.random.default_rng(2).normal(size=(1, 64, 8))), 8, 8)
    np.testing.assert_array_equal(swin_pair(x, pair).tokens.data, x.tokens.data)


def test_swin_pair_preserves_shape():
    pair = SwinPair(8, 2, 7)
    init_parameters(pair, 0)
    x = SequenceFeature(Tensor(np.random.default_rng(3).normal(size=(1, 56 * 56, 8))), 56, 56)
    assert swin_pair(x, pair).tokens.shape == (1, 3136, 8)


def test_swin_pair_gradient():
    rng = np.random.default_rng(4)
    pair = SwinPair(8, 2, 2)
    init_parameters(pair, 3)
    for p in pair.parameters():
        p.data = p.data + rng.normal(0, 0.3, size=p.shape)
    x = SequenceFeature(Tensor(rng.normal(size=(1, 16, 8)), requires_grad=True), 4, 4)
    err = T.grad_check_many(lambda: T.sum(T.gelu(pair(x).tokens)), [x.tokens] + pair.parameters(),
                            n_samples=6, rng=rng)
    assert err <= 1e-4


def test_patch_merging_halves_and_doubles():
    pm = PatchMerging(4)
    init_parameters(pm, 0)
    x = SequenceFeature(Tensor(np.random.default_rng(5).normal(size=(2, 36, 4))), 6, 6)
    y = pm(x)
    assert (y.h, y.w, y.c) == (3, 3, 8)
    odd = pm(SequenceFeature(Tensor(np.zeros((1, 15, 4))), 3, 5))
    assert (odd.h, odd.w) == (2, 3)


def test_encode_toy_strides():
    feats = encode(Tensor(np.random.default_rng(6).normal(size=(2, 3, 64, 64))), make_encoder())
    assert [f.l for f in feats.levels()] == [256, 64, 16]
    assert [f.c for f in feats.levels()] == [16, 32, 64]
    assert feats.F4.l == 4


def test_encode_224_matches_three_levels():
    feats = make_encoder(EncoderConfig(stage_dims=(8, 16, 32, 64)))(Tensor(np.zeros((1, 3, 224, 224))))
    assert [f.l for f in feats.levels()] == [3136, 784, 196]


def test_zero_input_gives_zero_features():
    feats = make_encoder()(Tensor(np.zeros((1, 3, 32, 32))))
    for f in feats.levels():
        np.testing.assert_array_equal(f.tokens.data, 0.0)


def test_encode_rejects_bad_sizes():
    enc = make_encoder()
    with pytest.raises(InputShapeError):
        enc(Tensor(np.zeros((1, 3, 40, 40))))
    assert enc(Tensor(np.zeros((1, 3, 16, 16)))).F3.l == 1


def test_encoder_config_validation():
    with pytest.raises(ConfigError):
        Encoder(EncoderConfig(stage_dims=(16, 24, 48, 96)))
    with pytest.raises(ConfigError):
        Encoder(EncoderConfig(stage_depths=(2, 3, 2, 2)))


def test_encode_deterministic():
    img = Tensor(np.random.default_rng(7).normal(size=(1, 3, 32, 32)))
    a = make_encoder(seed=3)(img)
    b = make_encoder(seed=3)(img)
    for fa, fb in zip(a.levels(), b.levels()):
        np.testing.assert_array_equal(fa.tokens.data, fb.tokens.data)


def test_every_encoder_parameter_gets_gradient():
    enc = make_encoder(EncoderConfig(stage_dims=(8, 16, 32, 64), window=4), seed=1)
    rng = np.random.default_rng(8)
    img = Tensor(rng.normal(size=(2, 3, 64, 64)))
    G = (rng.random((2, 16, 16)) > 0.5).astype(float)
    with T.Tape() as tape:
        f = enc(img)
        maps = [T.reshape(T.mean(x.tokens, axis=-1), (2, x.h, x.w)) for x in f.levels()]
        loss = multilevel_loss([resize_bilinear(m, (16, 16)) for m in maps], G)
        tape.backward(loss)
    dead = [n for n, p in enc.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert dead == []
