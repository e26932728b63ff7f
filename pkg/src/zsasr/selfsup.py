"""Self-supervised objectives on untranscribed speech.

A frozen random-projection quantizer turns raw feature frames into discrete
codes. Training masks spans of the projected speech latents, then applies two
losses: an InfoNCE contrastive loss at the speech encoder output against the
codeword of each masked frame (distractors are other masked frames' codewords)
and a masked-prediction cross-entropy at the shared encoder output over the
same codes. Both losses touch masked positions only.

Freezing the quantizer keeps MLM targets for a fixed utterance constant for
the whole run, which removes codebook collapse as a failure mode.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (Rng, Tensor, log_softmax, matmul, mean_, mul, neg,
                     normalize_rows, pick_per_row, reshape, sum_, take_rows)


@dataclass
class Quantizer:
    """Frozen random projection plus a unit-norm codebook."""
    projection: np.ndarray          # F x code_dim
    codebook: np.ndarray            # C x code_dim, rows unit-normalized
    mean: np.ndarray                # corpus feature mean (F,)
    std: np.ndarray                 # corpus feature std (F,)

    @property
    def n_codes(self) -> int:
        return self.codebook.shape[0]

    def project(self, features: np.ndarray) -> np.ndarray:
        z = (np.asarray(features, dtype=np.float64) - self.mean) / self.std
        z = z @ self.projection
        return z / np.sqrt((z * z).sum(axis=-1, keepdims=True) + 1e-12)

    def quantize(self, features: np.ndarray) -> np.ndarray:
        """Nearest codebook row (cosine distance) per frame."""
        return np.argmax(self.project(features) @ self.codebook.T, axis=-1)


def fit_quantizer(feature_sample: np.ndarray, n_codes: int, code_dim: int,
                  rng: Rng) -> Quantizer:
    """Corpus-level normalization plus random projection and codebook; frozen
    from here on."""
    feats = np.asarray(feature_sample, dtype=np.float64)
    mean = feats.mean(axis=0)
    std = feats.std(axis=0) + 1e-8
    proj = rng.key("projection").normal((feats.shape[1], code_dim))
    codes = rng.key("codebook").normal((n_codes, code_dim))
    codes /= np.sqrt((codes * codes).sum(axis=-1, keepdims=True))
    return Quantizer(proj, codes, mean, std)


@dataclass
class SpeechMask:
    frame_indices: np.ndarray       # sorted unique masked frame ids
    n_frames: int

    @property
    def fraction(self) -> float:
        return len(self.frame_indices) / max(1, self.n_frames)


def mask_speech(latent_in: Tensor, mask_prob: float, span: int, rng: Rng,
                mask_vector: Tensor) -> tuple[Tensor, SpeechMask]:
    """Replace sampled spans of frames with the learned mask vector.

    Span starts are drawn so each span fits inside the sequence; spans may
    overlap, so the masked fraction is at most n_spans * span / T.
    """
    if span < 1:
        raise ValueError(f"span must be >= 1, got {span}")
    t_len = latent_in.shape[0]
    n_spans = int(round(mask_prob * t_len / span)) if mask_prob > 0 else 0
    if mask_prob > 0:
        n_spans = max(1, n_spans)
    w = min(span, t_len)
    masked = np.zeros(t_len, dtype=bool)
    for i in range(n_spans):
        start = int(rng.key(f"span/{i}").integers(0, t_len - w + 1))
        masked[start:start + w] = True
    idx = np.flatnonzero(masked)
    if not idx.size:
        return latent_in, SpeechMask(idx, t_len)
    col = Tensor(masked.astype(np.float64).reshape(-1, 1))
    keep = Tensor((~masked).astype(np.float64).reshape(-1, 1))
    out = mul(latent_in, keep) + mul(mask_vector, col)
    return out, SpeechMask(idx, t_len)


def contrastive_loss(outputs: Tensor, positives: np.ndarray, n_distractors: int,
                     temperature: float, rng: Rng) -> Tensor:
    """InfoNCE over cosine similarities at masked frames.

    `outputs` is the (projected) encoder output at the M masked frames;
    `positives` the matching codeword vectors. Each frame's distractors are
    other masked frames' codewords; when fewer than requested exist, all are
    used, and at least one must exist.
    """
    m = outputs.shape[0]
    if m < 2:
        raise ValueError("contrastive loss needs at least one distractor frame")
    k = min(n_distractors, m - 1)
    pos = np.asarray(positives, dtype=np.float64)
    pos = pos / np.sqrt((pos * pos).sum(axis=-1, keepdims=True) + 1e-12)
    cand = np.empty((m, k + 1, pos.shape[1]))
    for i in range(m):
        others = np.delete(np.arange(m), i)
        pick = rng.key(f"distractors/{i}").permutation(m - 1)[:k]
        cand[i, 0] = pos[i]
        cand[i, 1:] = pos[others[pick]]
    out_n = normalize_rows(outputs)
    sims = sum_(mul(reshape(out_n, (m, 1, -1)), Tensor(cand)), axis=2)
    logp = log_softmax(sims * (1.0 / temperature), axis=-1)
    return neg(mean_(pick_per_row(logp, np.zeros(m, dtype=int))))


def mlm_loss(params: dict, shared_out_masked: Tensor, code_ids,
             counters: dict | None = None) -> Tensor:
    """Cross-entropy of the linear code classifier at masked positions."""
    code_ids = np.asarray(code_ids, dtype=np.int64)
    if shared_out_masked.shape[0] == 0 or code_ids.size == 0:
        if counters is not None:
            counters["mlm_empty_mask"] = counters.get("mlm_empty_mask", 0) + 1
        return Tensor(0.0)
    logits = matmul(shared_out_masked, params["mlm.w"]) + params["mlm.b"]
    logp = log_softmax(logits, axis=-1)
    return neg(mean_(pick_per_row(logp, code_ids)))


def init_selfsup_params(rng: Rng, params: dict, model_dim: int, code_dim: int,
                        n_codes: int) -> None:
    params["spk.mask_vec"] = Tensor(rng.key("spk.mask_vec").normal((model_dim,), 0.1),
                                    requires_grad=True)
    params["ctr.proj"] = Tensor(
        rng.key("ctr.proj").normal((model_dim, code_dim), (1.0 / model_dim) ** 0.5),
        requires_grad=True)
    params["mlm.w"] = Tensor(np.zeros((model_dim, n_codes)), requires_grad=True)
    params["mlm.b"] = Tensor(np.zeros(n_codes), requires_grad=True)
