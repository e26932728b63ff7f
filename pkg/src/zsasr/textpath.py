"""The text branch: token embeddings upsampled to the speech frame rate.

Flow: token embedding extractor (lookup, conv layer, small transformer, then
a concatenated language embedding) -> duration selection -> resampler that
repeats each token embedding for its duration -> refiner (self-attention plus
lightweight convolution, projecting to the shared-encoder width) -> optional
time/feature masking. On paired data the durations come from transducer
Viterbi alignments; on unspoken text they come from the duration predictor
(or from the ablation variants: uniform 1..4, constant 1, or no resampling).

The consistency loss ties the refined text frames to speech encoder outputs
with an MSE whose speech side is a fixed target by default.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import _affine, _ffn, _linear, _ln, _norm, multi_head_attention
from .tensor import (Rng, ShapeError, Tensor, add, concat, depthwise_conv1d,
                     embedding, exp, matmul, mean_, mul, narrow, relu,
                     repeat_rows, reshape, stop_grad, sum_, swish, take_rows)


@dataclass
class TextEncoderConfig:
    embed_dim: int = 24
    n_conv_layers: int = 1
    conv_kernel: int = 5
    n_transformer_layers: int = 2
    n_heads: int = 4
    ff_multiplier: int = 2
    lang_embed_dim: int = 8
    refiner_layers: int = 1
    refiner_heads: int = 4
    refiner_conv_kernel: int = 5
    duration_blocks: int = 2
    duration_kernel: int = 3
    max_len: int = 512

    @property
    def out_dim(self) -> int:
        """Extractor output width: token features plus the language embedding."""
        return self.embed_dim + self.lang_embed_dim


@dataclass
class MaskSpec:
    time_masks: int = 1
    time_width: int = 2
    dim_masks: int = 1
    dim_width: int = 4


@dataclass
class AlignedTextRepr:
    frames: Tensor                  # T x D at speech frame rate (post-mask)
    durations: list[int]            # per surviving token, sums to T
    token_ids: list[int]
    lang_id: int
    mask: np.ndarray | None         # boolean T x D of zeroed cells, if masked


@dataclass
class TextForwardResult:
    repr: AlignedTextRepr
    token_embeddings: Tensor        # U x out_dim extractor output
    refined: Tensor                 # T x D before masking (consistency target side)


# --------------------------------------------------------------- parameters


def init_textpath_params(rng: Rng, cfg: TextEncoderConfig, params: dict,
                         vocab_size: int, n_languages: int, model_dim: int) -> None:
    e = cfg.embed_dim
    params["txt.embed"] = Tensor(rng.key("txt.embed").normal((vocab_size, e), 0.5),
                                 requires_grad=True)
    params["txt.pos"] = Tensor(rng.key("txt.pos").normal((cfg.max_len, e), 0.1),
                               requires_grad=True)
    for i in range(cfg.n_conv_layers):
        params[f"txt.conv{i}.dw"] = Tensor(
            rng.key(f"txt.conv{i}.dw").normal((cfg.conv_kernel, e),
                                              (1.0 / cfg.conv_kernel) ** 0.5),
            requires_grad=True)
        _linear(rng, params, f"txt.conv{i}.pw", e, e)
    for i in range(cfg.n_transformer_layers):
        _norm(params, f"txt.tr{i}.attn.ln", e)
        for m in ("wq", "wk", "wv", "wo"):
            params[f"txt.tr{i}.attn.{m}"] = Tensor(
                rng.key(f"txt.tr{i}.attn.{m}").normal((e, e), (1.0 / e) ** 0.5),
                requires_grad=True)
        _norm(params, f"txt.tr{i}.ffn.ln", e)
        _linear(rng, params, f"txt.tr{i}.ffn.in", e, e * cfg.ff_multiplier)
        _linear(rng, params, f"txt.tr{i}.ffn.out", e * cfg.ff_multiplier, e)
    params["txt.lang_embed"] = Tensor(
        rng.key("txt.lang_embed").normal((n_languages, cfg.lang_embed_dim), 0.5),
        requires_grad=True)

    d_in = cfg.out_dim
    for i in range(cfg.duration_blocks):
        params[f"dur.block{i}.dw"] = Tensor(
            rng.key(f"dur.block{i}.dw").normal((cfg.duration_kernel, d_in),
                                               (1.0 / cfg.duration_kernel) ** 0.5),
            requires_grad=True)
        _linear(rng, params, f"dur.block{i}.pw", d_in, d_in)
    # normalizing the head input keeps predictions near the trained range even
    # for token embeddings never seen in paired data (unseen scripts)
    _norm(params, "dur.ln", d_in)
    params["dur.head.w"] = Tensor(np.zeros((d_in, 1)), requires_grad=True)
    params["dur.head.b"] = Tensor(np.zeros(1), requires_grad=True)

    _linear(rng, params, "ref.in_proj", d_in, model_dim)
    params["ref.pos"] = Tensor(
        rng.key("ref.pos").normal((cfg.max_len, model_dim), 0.1),
        requires_grad=True)
    for i in range(cfg.refiner_layers):
        _norm(params, f"ref.{i}.attn.ln", model_dim)
        for m in ("wq", "wk", "wv", "wo"):
            params[f"ref.{i}.attn.{m}"] = Tensor(
                rng.key(f"ref.{i}.attn.{m}").normal((model_dim, model_dim),
                                                    (1.0 / model_dim) ** 0.5),
                requires_grad=True)
        _norm(params, f"ref.{i}.conv.ln", model_dim)
        params[f"ref.{i}.conv.dw"] = Tensor(
            rng.key(f"ref.{i}.conv.dw").normal((cfg.refiner_conv_kernel, model_dim),
                                               (1.0 / cfg.refiner_conv_kernel) ** 0.5),
            requires_grad=True)
        _linear(rng, params, f"ref.{i}.conv.pw", model_dim, model_dim)


# ------------------------------------------------------------------ forward


def embed_text(params: dict, cfg: TextEncoderConfig, tokens, lang_id: int) -> Tensor:
    """U x out_dim embeddings: lookup, conv stack, transformer with positions,
    then the language vector concatenated at every position."""
    tokens = list(tokens)
    x = embedding(params["txt.embed"], tokens)
    x = add(x, narrow(params["txt.pos"], 0, 0, len(tokens)))
    for i in range(cfg.n_conv_layers):
        h = depthwise_conv1d(x, params[f"txt.conv{i}.dw"])
        x = add(x, swish(_affine(params, f"txt.conv{i}.pw", h)))
    for i in range(cfg.n_transformer_layers):
        x = add(x, multi_head_attention(params, f"txt.tr{i}.attn", x, cfg.n_heads))
        x = add(x, _ffn(params, f"txt.tr{i}.ffn", x))
    lang = take_rows(params["txt.lang_embed"], [lang_id] * len(tokens))
    return concat([x, lang], axis=1)


def predict_durations(params: dict, cfg: TextEncoderConfig,
                      embeddings: Tensor) -> Tensor:
    """Strictly positive per-token duration estimates, exp of a conv-stack head.
    The head starts at zero, so an untrained model predicts exactly 1.0."""
    x = embeddings
    for i in range(cfg.duration_blocks):
        h = depthwise_conv1d(x, params[f"dur.block{i}.dw"])
        x = add(x, relu(_affine(params, f"dur.block{i}.pw", h)))
    x = _ln(params, "dur.ln", x)
    head = add(matmul(x, params["dur.head.w"]), params["dur.head.b"])
    return exp(reshape(head, (-1,)))


def integerize_durations(d: np.ndarray) -> list[int]:
    """Round-half-up with a floor of 1 so no token vanishes."""
    return [max(1, int(np.floor(v + 0.5))) for v in np.asarray(d, dtype=np.float64)]


def resample(embeddings: Tensor, durations) -> Tensor:
    """Repeat token u's embedding durations[u] times; output has sum(durations)
    rows. Rejects any duration < 1."""
    durations = list(int(d) for d in durations)
    if any(d < 1 for d in durations):
        raise ValueError(f"resample: durations must be >= 1, got {durations}")
    return repeat_rows(embeddings, durations)


def refine(params: dict, cfg: TextEncoderConfig, frames: Tensor) -> Tensor:
    """Smooth the step-wise resampled sequence and project to model width."""
    x = _affine(params, "ref.in_proj", frames)
    x = add(x, narrow(params["ref.pos"], 0, 0, x.shape[0]))
    for i in range(cfg.refiner_layers):
        x = add(x, multi_head_attention(params, f"ref.{i}.attn", x,
                                        cfg.refiner_heads))
        h = depthwise_conv1d(_ln(params, f"ref.{i}.conv.ln", x),
                             params[f"ref.{i}.conv.dw"])
        x = add(x, _affine(params, f"ref.{i}.conv.pw", swish(h)))
    return x


def mask_spec(frames: Tensor, spec: MaskSpec, rng: Rng) -> tuple[Tensor, np.ndarray]:
    """Zero out contiguous time spans and feature bands; widths clamp to the
    available extent. Returns the masked frames and the boolean mask."""
    t_len, d = frames.shape
    mask = np.zeros((t_len, d), dtype=bool)
    tw = min(spec.time_width, t_len)
    for i in range(spec.time_masks):
        if tw <= 0:
            break
        start = int(rng.key(f"time/{i}").integers(0, t_len - tw + 1))
        mask[start:start + tw, :] = True
    dw = min(spec.dim_width, d)
    for i in range(spec.dim_masks):
        if dw <= 0:
            break
        start = int(rng.key(f"dim/{i}").integers(0, d - dw + 1))
        mask[:, start:start + dw] = True
    if not mask.any():
        return frames, mask
    keep = Tensor((~mask).astype(np.float64))
    return mul(frames, keep), mask


def consistency_loss(speech_latents: Tensor, text_frames: Tensor,
                     frame_weights=None, stop_speech_gradient: bool = True) -> Tensor:
    """MSE between aligned speech and text frames. The speech side is treated
    as a fixed target unless two-sided gradients are requested."""
    if speech_latents.shape != text_frames.shape:
        raise ShapeError(
            f"consistency: speech {speech_latents.shape} vs text "
            f"{text_frames.shape}; a length mismatch means a broken alignment")
    target = stop_grad(speech_latents) if stop_speech_gradient else speech_latents
    sq = (text_frames - target) ** 2
    if frame_weights is None:
        return mean_(reshape(sq, (-1,)))
    w = np.asarray(frame_weights, dtype=np.float64)
    per_frame = mean_(sq, axis=1)
    return sum_(mul(per_frame, Tensor(w / w.sum())))


VALID_MODES = ("aligned", "predicted", "uniform", "one", "none")


def text_forward(params: dict, cfg: TextEncoderConfig, tokens, lang_id: int,
                 mode: str, durations=None, masking: MaskSpec | None = None,
                 rng: Rng | None = None) -> TextForwardResult:
    """Run the whole text branch under the requested duration policy.

    "aligned" requires externally supplied durations (from Viterbi alignment);
    zero-duration tokens there are treated as deleted. "predicted" uses the
    duration model; "uniform" samples 1..4 per token, "one" pins 1, and
    "none" skips resampling so frames stay at token rate.
    """
    if mode not in VALID_MODES:
        raise ValueError(f"unknown duration mode {mode!r}; expected one of {VALID_MODES}")
    tokens = list(tokens)
    emb = embed_text(params, cfg, tokens, lang_id)
    emb_full = emb  # duration training needs every token, deleted ones included
    if mode == "aligned":
        if durations is None:
            raise ValueError("aligned mode requires externally supplied durations")
        if len(durations) != len(tokens):
            raise ShapeError(f"{len(durations)} durations for {len(tokens)} tokens")
        durs = [int(d) for d in durations]
        keep = [i for i, d in enumerate(durs) if d > 0]
        if len(keep) < len(tokens):
            emb = take_rows(emb, keep)
        durs = [durs[i] for i in keep]
        frames = resample(emb, durs) if durs else emb
    elif mode == "predicted":
        durs = integerize_durations(predict_durations(params, cfg, emb).data)
        frames = resample(emb, durs)
    elif mode == "uniform":
        if rng is None:
            raise ValueError("uniform mode needs an rng")
        durs = [int(d) for d in rng.key("uniform-durs").integers(1, 5, size=len(tokens))]
        frames = resample(emb, durs)
    elif mode == "one":
        durs = [1] * len(tokens)
        frames = resample(emb, durs)
    else:  # "none": token-rate frames, no resampler in the path
        durs = [1] * len(tokens)
        frames = emb
    refined = refine(params, cfg, frames)
    mask = None
    out = refined
    if masking is not None:
        if rng is None:
            raise ValueError("masking needs an rng")
        out, mask = mask_spec(refined, masking, rng.key("mask"))
    repr_ = AlignedTextRepr(out, durs, tokens, lang_id, mask)
    return TextForwardResult(repr_, emb_full, refined)
