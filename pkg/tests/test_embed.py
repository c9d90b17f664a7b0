import numpy as np
import pytest

from glogseg import ops
from glogseg.embed import EmbedConfig, embed_forward, init_embed_weights, stem_forward
from glogseg.filters import bank_apply, init_bank
from glogseg.tensor import Tape, Tensor, backward
from conftest import max_rel


def _textured(size, seed=0):
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[:size, :size]
    img = np.cos(0.7 * x + 0.3 * y) + 0.5 * np.sin(0.4 * y) + 0.2 * rng.normal(size=(size, size))
    return Tensor(img[None])


def test_token_grid_shape():
    cfg = EmbedConfig()
    bank = init_bank(2, 5)
    w = init_embed_weights(cfg, 1 + bank.n_filters, np.random.default_rng(0))
    out = embed_forward(_textured(64), bank, w, cfg)
    assert out.shape == (48, 16, 16)


def test_batched_shape():
    cfg = EmbedConfig()
    bank = init_bank(2, 5)
    w = init_embed_weights(cfg, 8, np.random.default_rng(0))
    img = Tensor(np.random.default_rng(1).normal(size=(3, 1, 32, 32)))
    assert embed_forward(img, bank, w, cfg).shape == (3, 48, 8, 8)


def test_empty_bank_is_plain_conv_embedding():
    cfg = EmbedConfig()
    bank = init_bank(0, 0)
    img = _textured(32)
    assert stem_forward(img, bank) is img
    w = init_embed_weights(cfg, 1, np.random.default_rng(0))
    assert w["embed.0.w"].shape[1] == 1
    assert embed_forward(img, bank, w, cfg).shape == (48, 8, 8)


def test_stem_channel_order():
    bank = init_bank(2, 5)
    img = _textured(16)
    stem = stem_forward(img, bank).data
    assert stem.shape == (8, 16, 16)
    np.testing.assert_array_equal(stem[0], img.data[0])


def test_indivisible_input_rejected():
    cfg = EmbedConfig()
    w = init_embed_weights(cfg, 8, np.random.default_rng(0))
    with pytest.raises(ValueError):
        embed_forward(Tensor(np.zeros((1, 30, 32))), init_bank(2, 5), w, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        EmbedConfig(patch_size=4, embed_dim=48, conv_stack=((48, 2),))
    with pytest.raises(ValueError):
        EmbedConfig(patch_size=4, embed_dim=32, conv_stack=((24, 2), (48, 2)))


def test_gabor_params_get_nonzero_fd_matched_grads():
    cfg = EmbedConfig(patch_size=4, embed_dim=8, conv_stack=((6, 2), (8, 2)))
    bank = init_bank(2, 5)
    w = init_embed_weights(cfg, 8, np.random.default_rng(3))
    img = _textured(16, seed=4)
    proj = Tensor(np.random.default_rng(5).normal(size=(8, 4, 4)))

    def loss():
        return ops.sum(ops.mul(embed_forward(img, bank, w, cfg), proj))

    with Tape() as tape:
        out = loss()
    backward(tape, out, reset=True)
    analytic = bank.gabor.grad.copy()
    assert np.all(analytic != 0.0)
    num = np.zeros_like(analytic)
    for idx in np.ndindex(*analytic.shape):
        old = bank.gabor.data[idx]
        bank.gabor.data[idx] = old + 1e-4
        fp = loss().item()
        bank.gabor.data[idx] = old - 1e-4
        fm = loss().item()
        bank.gabor.data[idx] = old
        num[idx] = (fp - fm) / 2e-4
    assert max_rel(analytic, num) < 1e-4


def test_matches_reference_composition():
    cfg = EmbedConfig()
    bank = init_bank(2, 5)
    w = init_embed_weights(cfg, 8, np.random.default_rng(6))
    img = _textured(32, seed=7)
    x = ops.concat_channels([img, bank_apply(img, bank)])
    for i, (_, s) in enumerate(cfg.conv_stack):
        x = ops.conv2d(x, w[f"embed.{i}.w"], w[f"embed.{i}.b"], stride=s)
        x = ops.layer_norm(ops.gelu(x), w[f"embed.{i}.ln_g"], w[f"embed.{i}.ln_b"])
    np.testing.assert_array_equal(embed_forward(img, bank, w, cfg).data, x.data)
