"""Conformer-style speech encoder and shared encoder with language adapters.

Both encoders are stacks of the same block: half-step feed-forward, full
context multi-head self-attention, a depthwise-conv module, a second half-step
feed-forward, and a closing layer norm, every module wrapped in a residual
connection. The shared encoder additionally applies a per-language residual
adapter (bottleneck down-projection, ReLU, zero-initialized up-projection)
after every block, so at initialization the adapters are an exact identity.

The shared encoder takes any T x D sequence: speech latents and upsampled
text representations go through the identical code path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (Rng, Tensor, add, depthwise_conv1d, ffn_block, layer_norm,
                     matmul, mha, mul, narrow, relu, sigmoid, swish, take_rows)


@dataclass
class ConformerConfig:
    model_dim: int = 64
    n_heads: int = 4
    ff_multiplier: int = 2
    conv_kernel: int = 7
    n_speech_layers: int = 2
    n_shared_layers: int = 6
    feature_dim: int = 16
    subsample: int = 1
    max_len: int = 256
    adapter_dim: int = 8

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by "
                             f"{self.n_heads} heads")


# ----------------------------------------------------------- parameter setup


def _linear(rng: Rng, params, name, n_in, n_out, scale=None):
    scale = scale if scale is not None else (1.0 / n_in) ** 0.5
    params[f"{name}.w"] = Tensor(rng.key(name).normal((n_in, n_out), scale),
                                 requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(n_out), requires_grad=True)


def _norm(params, name, dim):
    params[f"{name}.g"] = Tensor(np.ones(dim), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(dim), requires_grad=True)


def init_block_params(rng: Rng, params: dict, prefix: str, cfg: ConformerConfig):
    d = cfg.model_dim
    h = d * cfg.ff_multiplier
    for ff in ("ffn1", "ffn2"):
        _norm(params, f"{prefix}.{ff}.ln", d)
        _linear(rng, params, f"{prefix}.{ff}.in", d, h)
        _linear(rng, params, f"{prefix}.{ff}.out", h, d)
    _norm(params, f"{prefix}.attn.ln", d)
    for m in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.attn.{m}"] = Tensor(
            rng.key(f"{prefix}.attn.{m}").normal((d, d), (1.0 / d) ** 0.5),
            requires_grad=True)
    _norm(params, f"{prefix}.conv.ln", d)
    _linear(rng, params, f"{prefix}.conv.pw1", d, 2 * d)
    params[f"{prefix}.conv.dw"] = Tensor(
        rng.key(f"{prefix}.conv.dw").normal((cfg.conv_kernel, d),
                                            (1.0 / cfg.conv_kernel) ** 0.5),
        requires_grad=True)
    _linear(rng, params, f"{prefix}.conv.pw2", d, d)
    _norm(params, f"{prefix}.final_ln", d)


def init_encoder_params(rng: Rng, cfg: ConformerConfig, params: dict,
                        n_languages: int) -> None:
    _linear(rng, params, "enc.in_proj", cfg.feature_dim, cfg.model_dim)
    params["enc.pos"] = Tensor(
        rng.key("enc.pos").normal((cfg.max_len, cfg.model_dim), 0.1),
        requires_grad=True)
    for i in range(cfg.n_speech_layers):
        init_block_params(rng, params, f"enc.speech.{i}", cfg)
    for i in range(cfg.n_shared_layers):
        init_block_params(rng, params, f"enc.shared.{i}", cfg)
    init_adapter_params(rng, cfg, params, n_languages)


def init_adapter_params(rng: Rng, cfg: ConformerConfig, params: dict,
                        n_languages: int) -> None:
    """One (down, up) pair per shared block per language; up starts at zero so
    a fresh adapter bank is an identity map."""
    for i in range(cfg.n_shared_layers):
        for lang in range(n_languages):
            base = f"adapter.{i}.{lang}"
            # small down-projection init keeps early adapter updates gentle
            params[f"{base}.down.w"] = Tensor(
                rng.key(base).normal((cfg.model_dim, cfg.adapter_dim), 0.05),
                requires_grad=True)
            params[f"{base}.down.b"] = Tensor(np.zeros(cfg.adapter_dim),
                                              requires_grad=True)
            params[f"{base}.up.w"] = Tensor(
                np.zeros((cfg.adapter_dim, cfg.model_dim)), requires_grad=True)


# ------------------------------------------------------------------- forward


def _affine(params, name, x):
    return add(matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def _ln(params, name, x):
    return layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def _ffn(params, prefix, x):
    return ffn_block(x, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"],
                     params[f"{prefix}.in.w"], params[f"{prefix}.in.b"],
                     params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])


def multi_head_attention(params, prefix, x: Tensor, n_heads: int) -> Tensor:
    xn = _ln(params, f"{prefix}.ln", x)
    return mha(xn, params[f"{prefix}.wq"], params[f"{prefix}.wk"],
               params[f"{prefix}.wv"], params[f"{prefix}.wo"], n_heads)


def _conv_module(params, prefix, x: Tensor, d: int) -> Tensor:
    h = _affine(params, f"{prefix}.pw1", _ln(params, f"{prefix}.ln", x))
    a = narrow(h, 1, 0, d)
    gate = sigmoid(narrow(h, 1, d, d))
    h = mul(a, gate)
    h = depthwise_conv1d(h, params[f"{prefix}.dw"])
    return _affine(params, f"{prefix}.pw2", swish(h))


def conformer_block(params: dict, prefix: str, x: Tensor,
                    cfg: ConformerConfig) -> Tensor:
    if x.shape[0] == 0:
        raise ValueError("conformer block requires at least one frame")
    x = add(x, _ffn(params, f"{prefix}.ffn1", x) * 0.5)
    x = add(x, multi_head_attention(params, f"{prefix}.attn", x, cfg.n_heads))
    x = add(x, _conv_module(params, f"{prefix}.conv", x, cfg.model_dim))
    x = add(x, _ffn(params, f"{prefix}.ffn2", x) * 0.5)
    return _ln(params, f"{prefix}.final_ln", x)


def add_positions(params: dict, x: Tensor) -> Tensor:
    return add(x, narrow(params["enc.pos"], 0, 0, x.shape[0]))


def project_features(params: dict, cfg: ConformerConfig, features) -> Tensor:
    """Input projection, stride subsampling, positional embeddings. The
    self-supervised path masks these latents before the speech blocks run."""
    x = features if isinstance(features, Tensor) else Tensor(features)
    x = _affine(params, "enc.in_proj", x)
    if cfg.subsample > 1:
        idx = np.arange(0, x.shape[0], cfg.subsample)
        x = take_rows(x, idx)
    return add_positions(params, x)


def speech_blocks(params: dict, cfg: ConformerConfig, x: Tensor) -> Tensor:
    for i in range(cfg.n_speech_layers):
        x = conformer_block(params, f"enc.speech.{i}", x, cfg)
    return x


def speech_encode(params: dict, cfg: ConformerConfig, features) -> Tensor:
    """Project features to model width, subsample by stride, run the speech
    blocks. Output length is ceil(T / subsample)."""
    return speech_blocks(params, cfg, project_features(params, cfg, features))


def adapter(params: dict, block: int, lang_id: int, x: Tensor) -> Tensor:
    base = f"adapter.{block}.{lang_id}"
    h = relu(add(matmul(x, params[f"{base}.down.w"]), params[f"{base}.down.b"]))
    return matmul(h, params[f"{base}.up.w"])


def shared_encode(params: dict, cfg: ConformerConfig, latents: Tensor,
                  lang_id: int, use_adapters: bool, n_languages: int) -> Tensor:
    """Shared trunk over any modality's T x D sequence, with the language's
    residual adapter applied after each block when enabled."""
    if use_adapters and not (0 <= lang_id < n_languages):
        raise IndexError(f"unknown lang_id {lang_id}")
    x = latents
    for i in range(cfg.n_shared_layers):
        x = conformer_block(params, f"enc.shared.{i}", x, cfg)
        if use_adapters:
            x = add(x, adapter(params, i, lang_id, x))
    return x
