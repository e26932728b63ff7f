import numpy as np
import pytest

from zsasr import encoders as enc
from zsasr.tensor import Rng, Tensor, grad_check, layer_norm


def tiny_cfg(**kw):
    base = dict(model_dim=4, n_heads=2, ff_multiplier=1, conv_kernel=3,
                n_speech_layers=1, n_shared_layers=2, feature_dim=3,
                max_len=16, adapter_dim=2)
    base.update(kw)
    return enc.ConformerConfig(**base)


@pytest.fixture
def setup():
    cfg = tiny_cfg()
    params: dict = {}
    enc.init_encoder_params(Rng(5), cfg, params, n_languages=2)
    return cfg, params


def test_model_dim_must_divide_heads():
    with pytest.raises(ValueError):
        tiny_cfg(model_dim=6, n_heads=4)


def test_block_preserves_shape(setup):
    cfg, params = setup
    for t in (1, 3, 7):
        x = Tensor(Rng(t).key("x").normal((t, cfg.model_dim)))
        out = enc.conformer_block(params, "enc.shared.0", x, cfg)
        assert out.shape == (t, cfg.model_dim)


def test_block_rejects_empty_sequence(setup):
    cfg, params = setup
    with pytest.raises(ValueError):
        enc.conformer_block(params, "enc.shared.0", Tensor(np.zeros((0, 4))), cfg)


def test_zero_weight_block_is_layer_norm_of_input(setup):
    cfg, params = setup
    prefix = "enc.shared.0"
    for k, p in params.items():
        if k.startswith(prefix) and (k.endswith(".w") or k.endswith(".dw")
                                     or ".attn.w" in k):
            p.data[:] = 0.0
    x = Tensor(Rng(9).key("x").normal((5, cfg.model_dim)))
    out = enc.conformer_block(params, prefix, x, cfg)
    want = layer_norm(x, params[f"{prefix}.final_ln.g"],
                      params[f"{prefix}.final_ln.b"])
    assert np.allclose(out.data, want.data, atol=1e-15)


def test_block_gradient(setup):
    # scalarize with a random weighting; a plain sum of layer-normed outputs
    # has near-zero gradients and checks nothing
    cfg, params = setup
    x_data = Rng(3).key("x").normal((3, cfg.model_dim))
    w = Rng(3).key("w").normal((3, cfg.model_dim))
    sub = {k: v for k, v in params.items() if k.startswith("enc.shared.0")}

    def f(q):
        merged = dict(params)
        merged.update(q)
        out = enc.conformer_block(merged, "enc.shared.0", Tensor(x_data), cfg)
        from zsasr.tensor import sum_
        return sum_(out * Tensor(w))

    report = grad_check(f, sub, eps=1e-5, tol=1e-4)
    assert report.passed, f"max rel err {report.max_rel_err:.2e}"


def test_speech_encode_output_length_no_subsampling(setup):
    cfg, params = setup
    feats = Rng(2).key("f").normal((6, cfg.feature_dim))
    out = enc.speech_encode(params, cfg, feats)
    assert out.shape == (6, cfg.model_dim)


def test_speech_encode_subsample_takes_ceiling():
    cfg = tiny_cfg(subsample=2)
    params: dict = {}
    enc.init_encoder_params(Rng(5), cfg, params, n_languages=1)
    feats = Rng(2).key("f").normal((5, cfg.feature_dim))
    out = enc.speech_encode(params, cfg, feats)
    assert out.shape == (3, cfg.model_dim)


def test_speech_encode_deterministic(setup):
    cfg, params = setup
    feats = Rng(4).key("f").normal((4, cfg.feature_dim))
    a = enc.speech_encode(params, cfg, feats)
    b = enc.speech_encode(params, cfg, feats)
    assert np.array_equal(a.data, b.data)


def test_adapter_zero_init_is_bit_exact_identity(setup):
    cfg, params = setup
    latents = Tensor(Rng(6).key("l").normal((4, cfg.model_dim)))
    with_adapters = enc.shared_encode(params, cfg, latents, 0, True, 2)
    without = enc.shared_encode(params, cfg, latents, 0, False, 2)
    assert np.array_equal(with_adapters.data, without.data)


def test_shared_encode_rejects_unknown_language(setup):
    cfg, params = setup
    latents = Tensor(np.zeros((3, cfg.model_dim)))
    with pytest.raises(IndexError):
        enc.shared_encode(params, cfg, latents, 5, True, 2)


def test_shared_encode_is_modality_agnostic(setup):
    # any T x D sequence goes through the same code path: speech latents or
    # upsampled text representations alike
    cfg, params = setup
    speechish = enc.speech_encode(params, cfg, Rng(7).key("f").normal((4, 3)))
    textish = Tensor(Rng(8).key("t").normal((9, cfg.model_dim)))
    for x in (speechish, textish):
        out = enc.shared_encode(params, cfg, x, 1, True, 2)
        assert out.shape == (x.shape[0], cfg.model_dim)


def test_full_encoder_gradient():
    cfg = tiny_cfg(n_speech_layers=1, n_shared_layers=1)
    params: dict = {}
    enc.init_encoder_params(Rng(11), cfg, params, n_languages=1)
    feats = Rng(12).key("f").normal((3, cfg.feature_dim))
    w = Rng(12).key("w").normal((3, cfg.model_dim))

    def f(q):
        from zsasr.tensor import sum_
        latents = enc.speech_encode(q, cfg, feats)
        out = enc.shared_encode(q, cfg, latents, 0, True, 1)
        return sum_(out * Tensor(w))

    report = grad_check(f, params, eps=1e-5, tol=1e-4)
    assert report.passed, f"max rel err {report.max_rel_err:.2e}"
